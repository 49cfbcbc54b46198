use super::{nearest_brute, nearest_neighbors, GeometryError, Point, PointCloud};
use crate::tensor::{Tensor, Var};

fn mean_of(pairs: &[(f64, usize)]) -> f64 {
    pairs.iter().map(|p| p.0).sum::<f64>() / pairs.len() as f64
}

/// Mean squared nearest-neighbor distance in each direction:
/// `(X → Y, Y → X)`.
pub fn chamfer_directional(x: &PointCloud, y: &PointCloud) -> (f64, f64) {
    let xy = nearest_neighbors(x.points(), y.points());
    let yx = nearest_neighbors(y.points(), x.points());
    (mean_of(&xy), mean_of(&yx))
}

/// Bidirectional Chamfer distance (sum of both directional means).
pub fn chamfer_distance(x: &PointCloud, y: &PointCloud) -> f64 {
    let (a, b) = chamfer_directional(x, y);
    a + b
}

/// Chamfer distance by exhaustive O(|X|·|Y|) search.
pub fn chamfer_brute(x: &PointCloud, y: &PointCloud) -> f64 {
    mean_of(&nearest_brute(x.points(), y.points())) + mean_of(&nearest_brute(y.points(), x.points()))
}

/// Differentiable Chamfer distance between two `(n, 3)` point tensors.
///
/// The nearest-neighbor assignment is held fixed for the gradient.
pub fn chamfer<'t>(x: Var<'t>, y: Var<'t>) -> Result<Var<'t>, GeometryError> {
    let (xv, yv) = (x.value(), y.value());
    let xs: Vec<Point> = xv.to_points()?;
    let ys: Vec<Point> = yv.to_points()?;
    if xs.is_empty() || ys.is_empty() {
        return Err(GeometryError::EmptyCloud);
    }
    let xy = nearest_neighbors(&xs, &ys);
    let yx = nearest_neighbors(&ys, &xs);
    let value = mean_of(&xy) + mean_of(&yx);
    let (nx, ny) = (xs.len(), ys.len());
    Ok(x.tape().custom("chamfer", &[x, y], Tensor::scalar(value), move |g| {
        let g = g.item();
        let mut gx = vec![0.0; nx * 3];
        let mut gy = vec![0.0; ny * 3];
        let wx = 2.0 * g / nx as f64;
        for (i, &(_, j)) in xy.iter().enumerate() {
            for a in 0..3 {
                let d = wx * (xs[i][a] - ys[j][a]);
                gx[i * 3 + a] += d;
                gy[j * 3 + a] -= d;
            }
        }
        let wy = 2.0 * g / ny as f64;
        for (j, &(_, i)) in yx.iter().enumerate() {
            for a in 0..3 {
                let d = wy * (ys[j][a] - xs[i][a]);
                gy[j * 3 + a] += d;
                gx[i * 3 + a] -= d;
            }
        }
        vec![
            Some(Tensor::with_data(&[nx, 3], gx)),
            Some(Tensor::with_data(&[ny, 3], gy)),
        ]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, Tape};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(pts: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(pts.to_vec()).unwrap()
    }

    #[test]
    fn hand_evaluated_values() {
        let a = cloud(&[[0.0, 0.0, 0.0]]);
        let b = cloud(&[[3.0, 4.0, 0.0]]);
        assert_eq!(chamfer_distance(&a, &b), 50.0);
        let x = cloud(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let y = cloud(&[[1.0, 0.0, 0.0]]);
        assert_eq!(chamfer_distance(&x, &y), 2.0);
        assert_eq!(chamfer_distance(&x, &x), 0.0);
    }

    #[test]
    fn tensor_form_matches_plain_value() {
        let tape = Tape::new();
        let x = cloud(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let y = cloud(&[[1.0, 0.0, 0.0]]);
        let v = chamfer(tape.constant(x.to_tensor()), tape.constant(y.to_tensor())).unwrap();
        assert_eq!(v.item(), 2.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut rand_cloud = |n: usize| {
            Tensor::new(vec![n, 3], (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let params = vec![rand_cloud(32), rand_cloud(24)];
        let err = finite_diff_check(|_, v| Ok(chamfer(v[0], v[1]).unwrap()), &params, 1e-5).unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    fn arb_cloud() -> impl Strategy<Value = PointCloud> {
        prop::collection::vec(prop::array::uniform3(-5.0f64..5.0), 1..40)
            .prop_map(|p| PointCloud::new(p).unwrap())
    }

    proptest! {
        #[test]
        fn symmetric_nonnegative_translation_invariant(
            x in arb_cloud(),
            y in arb_cloud(),
            t in prop::array::uniform3(-3.0f64..3.0),
        ) {
            let d = chamfer_distance(&x, &y);
            prop_assert!(d >= 0.0);
            prop_assert_eq!(d, chamfer_distance(&y, &x));
            let moved = chamfer_distance(&x.translated(t), &y.translated(t));
            prop_assert!((moved - d).abs() <= 1e-12 * (1.0 + d));
        }

        #[test]
        fn zero_iff_mutual_coverage(x in arb_cloud()) {
            let mut dup = x.points().to_vec();
            dup.extend_from_slice(&x.points()[..1]);
            prop_assert_eq!(chamfer_distance(&x, &PointCloud::new(dup).unwrap()), 0.0);
            let shifted = x.translated([0.0, 0.0, 1e-3]);
            prop_assert!(chamfer_distance(&x, &shifted) > 0.0);
        }
    }
}
