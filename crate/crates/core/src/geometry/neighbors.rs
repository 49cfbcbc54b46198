use super::{dist2, GeometryError, LaplacianGraph, PointCloud, SpatialGrid};

/// Clouds at or below this size are searched by direct scan.
const BRUTE_FORCE_LIMIT: usize = 64;

/// k-nearest-neighbor graph by exhaustive scan. Self is excluded and ties
/// go to the lowest index.
pub fn knn_brute(cloud: &PointCloud, k: usize) -> Result<LaplacianGraph, GeometryError> {
    let n = cloud.len();
    if k == 0 || k >= n {
        return Err(GeometryError::NeighborCount { k, n });
    }
    let pts = cloud.points();
    let mut flat = Vec::with_capacity(n * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for (i, p) in pts.iter().enumerate() {
        cand.clear();
        cand.extend(
            pts.iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, q)| (dist2(p, q), j)),
        );
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        flat.extend(cand[..k].iter().map(|c| c.1));
    }
    Ok(LaplacianGraph::from_flat(k, flat))
}

/// k-nearest-neighbor graph; grid-accelerated on larger clouds with results
/// identical to [`knn_brute`].
pub fn knn(cloud: &PointCloud, k: usize) -> Result<LaplacianGraph, GeometryError> {
    let n = cloud.len();
    if n <= BRUTE_FORCE_LIMIT {
        return knn_brute(cloud, k);
    }
    if k == 0 || k >= n {
        return Err(GeometryError::NeighborCount { k, n });
    }
    let grid = SpatialGrid::new(cloud.points());
    let mut flat = Vec::with_capacity(n * k);
    for (i, p) in cloud.points().iter().enumerate() {
        flat.extend(grid.k_nearest(p, k, Some(i)).into_iter().map(|c| c.1));
    }
    Ok(LaplacianGraph::from_flat(k, flat))
}

/// For each query point, `(squared distance, index)` of its nearest source
/// point, by exhaustive scan.
pub fn nearest_brute(queries: &[[f64; 3]], source: &[[f64; 3]]) -> Vec<(f64, usize)> {
    queries
        .iter()
        .map(|q| {
            let mut best = (f64::INFINITY, 0);
            for (j, s) in source.iter().enumerate() {
                let d = dist2(q, s);
                if d < best.0 {
                    best = (d, j);
                }
            }
            best
        })
        .collect()
}

/// Same result as [`nearest_brute`], grid-accelerated for large inputs.
pub fn nearest_neighbors(queries: &[[f64; 3]], source: &[[f64; 3]]) -> Vec<(f64, usize)> {
    if source.len() <= BRUTE_FORCE_LIMIT || queries.len() <= BRUTE_FORCE_LIMIT {
        return nearest_brute(queries, source);
    }
    let grid = SpatialGrid::new(source);
    queries.iter().map(|q| grid.nearest(q)).collect()
}

/// Ball-query grouping: for each query, up to `group_size` source indices
/// within `radius` in ascending index order, padded with the first hit.
/// An empty ball falls back to the nearest source point.
pub fn ball_group(
    queries: &PointCloud,
    source: &PointCloud,
    radius: f64,
    group_size: usize,
) -> Result<Vec<Vec<usize>>, GeometryError> {
    if !(radius > 0.0) {
        return Err(GeometryError::Radius(radius));
    }
    if group_size == 0 {
        return Err(GeometryError::GroupSize);
    }
    let r2 = radius * radius;
    let src = source.points();
    Ok(queries
        .points()
        .iter()
        .map(|q| {
            let mut group: Vec<usize> = src
                .iter()
                .enumerate()
                .filter(|(_, s)| dist2(q, s) <= r2)
                .map(|(j, _)| j)
                .take(group_size)
                .collect();
            let pad = match group.first() {
                Some(&first) => first,
                None => nearest_brute(std::slice::from_ref(q), src)[0].1,
            };
            group.resize(group_size, pad);
            group
        })
        .collect())
}
