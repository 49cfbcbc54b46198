use serde::{Deserialize, Serialize};

use super::{dist2, GeometryError, PointCloud};

/// How the first farthest-point sample is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "index")]
pub enum FpsSeed {
    /// A fixed point index.
    Index(usize),
    /// The point with lexicographically smallest (x, y, z); independent of
    /// point order.
    Lexicographic,
}

impl FpsSeed {
    pub fn resolve(self, cloud: &PointCloud) -> usize {
        match self {
            FpsSeed::Index(i) => i,
            FpsSeed::Lexicographic => lexicographic_min(cloud),
        }
    }
}

/// Index of the lexicographically smallest point (lowest index on ties).
pub fn lexicographic_min(cloud: &PointCloud) -> usize {
    let pts = cloud.points();
    let mut best = 0;
    for (i, p) in pts.iter().enumerate().skip(1) {
        if p.partial_cmp(&pts[best]) == Some(std::cmp::Ordering::Less) {
            best = i;
        }
    }
    best
}

/// Greedy farthest-point sampling of `m` indices starting at `seed_index`.
///
/// Each step adds the unselected point with the largest squared distance to
/// the selected set, lowest index on ties.
pub fn fps(cloud: &PointCloud, m: usize, seed_index: usize) -> Result<Vec<usize>, GeometryError> {
    let n = cloud.len();
    if m == 0 || m > n {
        return Err(GeometryError::SampleCount { m, n });
    }
    if seed_index >= n {
        return Err(GeometryError::IndexOutOfRange {
            index: seed_index,
            len: n,
        });
    }
    let pts = cloud.points();
    let mut min_d = vec![f64::INFINITY; n];
    let mut out = Vec::with_capacity(m);
    let mut current = seed_index;
    for _ in 0..m {
        out.push(current);
        min_d[current] = f64::NEG_INFINITY;
        let c = pts[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in pts.iter().enumerate() {
            if min_d[i] == f64::NEG_INFINITY {
                continue;
            }
            let d = dist2(p, &c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        current = best;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_with_center() -> PointCloud {
        PointCloud::new(vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [1.0, 1.0, 0.0],
            [0.5, 0.5, 0.0],
        ])
        .unwrap()
    }

    /// Literal greedy enumeration: recompute every min distance from scratch.
    fn greedy_oracle(cloud: &PointCloud, m: usize, seed: usize) -> Vec<usize> {
        let pts = cloud.points();
        let mut sel = vec![seed];
        while sel.len() < m {
            let mut best = None;
            for i in 0..pts.len() {
                if sel.contains(&i) {
                    continue;
                }
                let d = sel
                    .iter()
                    .map(|&s| dist2(&pts[i], &pts[s]))
                    .fold(f64::INFINITY, f64::min);
                match best {
                    Some((_, bd)) if d <= bd => {}
                    _ => best = Some((i, d)),
                }
            }
            sel.push(best.unwrap().0);
        }
        sel
    }

    #[test]
    fn single_sample_is_seed() {
        assert_eq!(fps(&square_with_center(), 1, 3).unwrap(), vec![3]);
    }

    #[test]
    fn square_corners_selected_before_center() {
        let cloud = square_with_center();
        let sel = fps(&cloud, 4, 0).unwrap();
        assert_eq!(sel, greedy_oracle(&cloud, 4, 0));
        // Corner 3 is farthest from 0; then 1 and 2 tie at distance 1, lowest first.
        assert_eq!(sel, vec![0, 3, 1, 2]);
        assert!(!sel.contains(&4));
    }

    #[test]
    fn exhaustive_selection_is_a_permutation() {
        let cloud = square_with_center();
        let mut sel = fps(&cloud, 5, 0).unwrap();
        assert_eq!(sel, greedy_oracle(&cloud, 5, 0));
        sel.sort();
        assert_eq!(sel, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn duplicates_do_not_repeat_indices() {
        let cloud = PointCloud::new(vec![[0.0; 3]; 4]).unwrap();
        assert_eq!(fps(&cloud, 4, 2).unwrap(), vec![2, 0, 1, 3]);
    }

    #[test]
    fn out_of_range_requests() {
        let cloud = square_with_center();
        assert!(fps(&cloud, 0, 0).is_err());
        assert!(fps(&cloud, 6, 0).is_err());
        assert!(fps(&cloud, 2, 5).is_err());
    }

    #[test]
    fn lexicographic_seed_is_order_independent() {
        let cloud = square_with_center();
        assert_eq!(lexicographic_min(&cloud), 0);
        let rev = PointCloud::new(cloud.points().iter().rev().copied().collect()).unwrap();
        assert_eq!(rev.points()[lexicographic_min(&rev)], [0.0, 0.0, 0.0]);
    }
}
