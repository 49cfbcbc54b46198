use super::{dist2, Point};

/// Uniform bucket grid for exact nearest-neighbor queries.
///
/// Queries expand Chebyshev rings of cells around the query cell and stop
/// once no unvisited cell can hold a point at or below the current k-th
/// distance, so results (including lowest-index tie-breaks) equal a
/// brute-force scan.
pub struct SpatialGrid<'a> {
    points: &'a [Point],
    origin: Point,
    cell: f64,
    dims: [usize; 3],
    starts: Vec<usize>,
    entries: Vec<usize>,
}

impl<'a> SpatialGrid<'a> {
    pub fn new(points: &'a [Point]) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
        let per_axis = ((points.len() as f64 / 2.0).cbrt().ceil() as usize).clamp(1, 64);
        let cell = if extent > 0.0 {
            extent / per_axis as f64
        } else {
            1.0
        };
        let mut dims = [1usize; 3];
        for a in 0..3 {
            dims[a] = (((hi[a] - lo[a]) / cell).floor() as usize + 1).min(per_axis + 1);
        }
        let mut grid = Self {
            points,
            origin: lo,
            cell,
            dims,
            starts: Vec::new(),
            entries: Vec::new(),
        };
        let ncells = dims[0] * dims[1] * dims[2];
        let cells: Vec<usize> = points.iter().map(|p| grid.flat(grid.cell_of(p))).collect();
        let mut counts = vec![0usize; ncells + 1];
        for &c in &cells {
            counts[c + 1] += 1;
        }
        for i in 0..ncells {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut entries = vec![0; points.len()];
        for (i, &c) in cells.iter().enumerate() {
            entries[fill[c]] = i;
            fill[c] += 1;
        }
        grid.starts = counts;
        grid.entries = entries;
        grid
    }

    fn cell_of(&self, p: &Point) -> [usize; 3] {
        let mut c = [0; 3];
        for a in 0..3 {
            let f = ((p[a] - self.origin[a]) / self.cell).floor();
            c[a] = if f <= 0.0 {
                0
            } else {
                (f as usize).min(self.dims[a] - 1)
            };
        }
        c
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        (c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]
    }

    /// The `k` nearest points to `q` as `(squared distance, index)` pairs in
    /// ascending order, skipping `exclude`.
    pub fn k_nearest(&self, q: &Point, k: usize, exclude: Option<usize>) -> Vec<(f64, usize)> {
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        if k == 0 {
            return best;
        }
        let qc = self.cell_of(q);
        let max_ring = (0..3)
            .map(|a| qc[a].max(self.dims[a] - 1 - qc[a]))
            .max()
            .unwrap();
        for r in 0..=max_ring {
            self.visit_ring(qc, r, |i| {
                if Some(i) == exclude {
                    return;
                }
                let d = dist2(q, &self.points[i]);
                if best.len() == k {
                    let last = best[k - 1];
                    if d > last.0 || (d == last.0 && i > last.1) {
                        return;
                    }
                }
                let pos = best.partition_point(|&(bd, bi)| bd < d || (bd == d && bi < i));
                best.insert(pos, (d, i));
                best.truncate(k);
            });
            if best.len() == k {
                // Unvisited cells lie at least r cells away in some axis.
                let bound = r as f64 * self.cell;
                if best[k - 1].0 < bound * bound * (1.0 - 1e-9) {
                    break;
                }
            }
        }
        best
    }

    pub fn nearest(&self, q: &Point) -> (f64, usize) {
        self.k_nearest(q, 1, None)[0]
    }

    fn visit_ring(&self, qc: [usize; 3], r: usize, mut f: impl FnMut(usize)) {
        let range = |a: usize| {
            let lo = qc[a].saturating_sub(r);
            let hi = (qc[a] + r).min(self.dims[a] - 1);
            lo..=hi
        };
        for x in range(0) {
            for y in range(1) {
                for z in range(2) {
                    let cheb = x.abs_diff(qc[0]).max(y.abs_diff(qc[1])).max(z.abs_diff(qc[2]));
                    if cheb != r {
                        continue;
                    }
                    let c = self.flat([x, y, z]);
                    for &i in &self.entries[self.starts[c]..self.starts[c + 1]] {
                        f(i);
                    }
                }
            }
        }
    }
}
