use rand::seq::index::sample;
use rand::Rng;

use super::DataError;
use crate::geometry::{Point, PointCloud};

/// Occluded view of `complete`: the `keep_fraction` of points with the
/// largest projection on `view_dir` (ties to the lower index), resampled to
/// `n_out` points. Subsamples without replacement when enough points are
/// retained, otherwise keeps every retained point and pads with random
/// repeats.
pub fn make_partial<R: Rng>(
    complete: &PointCloud,
    view_dir: Point,
    keep_fraction: f64,
    n_out: usize,
    rng: &mut R,
) -> Result<PointCloud, DataError> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(DataError::KeepFraction(keep_fraction));
    }
    if n_out == 0 {
        return Err(DataError::Count("partial point count must be at least 1".into()));
    }
    let norm = view_dir.iter().map(|c| c * c).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(DataError::ViewDirection(view_dir));
    }
    let dir = view_dir.map(|c| c / norm);
    let pts = complete.points();
    let proj: Vec<f64> = pts
        .iter()
        .map(|p| p[0] * dir[0] + p[1] * dir[1] + p[2] * dir[2])
        .collect();
    let mut order: Vec<usize> = (0..pts.len()).collect();
    order.sort_by(|&a, &b| proj[b].total_cmp(&proj[a]).then(a.cmp(&b)));
    let keep = ((keep_fraction * pts.len() as f64).ceil() as usize).clamp(1, pts.len());
    let retained = &order[..keep];

    let picked: Vec<usize> = if n_out <= keep {
        sample(rng, keep, n_out).into_iter().map(|i| retained[i]).collect()
    } else {
        let mut all = retained.to_vec();
        all.extend((keep..n_out).map(|_| retained[rng.gen_range(0..keep)]));
        all
    };
    Ok(complete.select(&picked)?)
}
