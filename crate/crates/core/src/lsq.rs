//! Least-squares Laplacian deformation with soft control points.
//!
//! Solves `min Σ_i ‖(L x)_i − δ_i‖² + w² Σ_c ‖x_c − t_c‖²` with the uniform
//! graph Laplacian `L = I − (1/k)·A`, one dense normal-equation system
//! shared by the three coordinates.

use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

use crate::geometry::{GeometryError, LaplacianGraph, Point, PointCloud};

/// Smallest accepted Cholesky pivot relative to the largest one.
const PIVOT_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LsqError {
    #[error("control index {index} out of range for {n} points")]
    ControlIndex { index: usize, n: usize },
    #[error("duplicate control index {0}")]
    DuplicateControl(usize),
    #[error("{indices} control indices but {targets} targets")]
    ControlCount { indices: usize, targets: usize },
    #[error("{got} Laplacian targets for {n} points")]
    TargetCount { got: usize, n: usize },
    #[error("control weight must be positive and finite, got {0}")]
    Weight(f64),
    #[error("rank-deficient system (coordinate {coordinate}): the controls do not pin down every point")]
    RankDeficient { coordinate: char },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// `δ_i = p_i − (1/k) Σ_{j ∈ A(i)} p_j`.
pub fn laplacian_coordinates(cloud: &PointCloud, graph: &LaplacianGraph) -> Vec<Point> {
    let pts = cloud.points();
    let w = graph.weight();
    (0..graph.len())
        .map(|i| {
            let mut d = pts[i];
            for &j in graph.neighbors(i) {
                for a in 0..3 {
                    d[a] -= w * pts[j][a];
                }
            }
            d
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct LsqSystem {
    graph: LaplacianGraph,
    control_indices: Vec<usize>,
    control_targets: Vec<Point>,
    control_weight: f64,
    target_laplacians: Vec<Point>,
}

impl LsqSystem {
    pub fn new(
        graph: LaplacianGraph,
        control_indices: Vec<usize>,
        control_targets: Vec<Point>,
        control_weight: f64,
        target_laplacians: Vec<Point>,
    ) -> Result<Self, LsqError> {
        let n = graph.len();
        if control_indices.len() != control_targets.len() {
            return Err(LsqError::ControlCount {
                indices: control_indices.len(),
                targets: control_targets.len(),
            });
        }
        if target_laplacians.len() != n {
            return Err(LsqError::TargetCount {
                got: target_laplacians.len(),
                n,
            });
        }
        if !(control_weight > 0.0 && control_weight.is_finite()) {
            return Err(LsqError::Weight(control_weight));
        }
        let mut seen = vec![false; n];
        for &c in &control_indices {
            if c >= n {
                return Err(LsqError::ControlIndex { index: c, n });
            }
            if std::mem::replace(&mut seen[c], true) {
                return Err(LsqError::DuplicateControl(c));
            }
        }
        Ok(Self {
            graph,
            control_indices,
            control_targets,
            control_weight,
            target_laplacians,
        })
    }

    pub fn n(&self) -> usize {
        self.graph.len()
    }

    pub fn with_weight(&self, control_weight: f64) -> Result<Self, LsqError> {
        Self::new(
            self.graph.clone(),
            self.control_indices.clone(),
            self.control_targets.clone(),
            control_weight,
            self.target_laplacians.clone(),
        )
    }

    /// `Σ ‖(L x)_i − δ_i‖²` for a candidate solution.
    pub fn laplacian_residual(&self, x: &PointCloud) -> f64 {
        laplacian_coordinates(x, &self.graph)
            .iter()
            .zip(&self.target_laplacians)
            .map(|(a, b)| crate::geometry::dist2(a, b))
            .sum()
    }

    /// `Σ_c ‖x_c − t_c‖²` (unweighted).
    pub fn control_residual(&self, x: &PointCloud) -> f64 {
        self.control_indices
            .iter()
            .zip(&self.control_targets)
            .map(|(&c, t)| crate::geometry::dist2(&x.points()[c], t))
            .sum()
    }

    /// The minimized objective.
    pub fn objective(&self, x: &PointCloud) -> f64 {
        self.laplacian_residual(x) + self.control_weight.powi(2) * self.control_residual(x)
    }

    pub fn solve(&self) -> Result<PointCloud, LsqError> {
        let n = self.n();
        let w = self.graph.weight();
        // Row i of L: +1 at i, −1/k at each neighbor.
        let row = |i: usize| {
            std::iter::once((i, 1.0)).chain(self.graph.neighbors(i).iter().map(move |&j| (j, -w)))
        };
        let mut normal = DMatrix::<f64>::zeros(n, n);
        let mut rhs = [DVector::<f64>::zeros(n), DVector::zeros(n), DVector::zeros(n)];
        for i in 0..n {
            for (a, va) in row(i) {
                for (b, vb) in row(i) {
                    normal[(a, b)] += va * vb;
                }
                for (c, r) in rhs.iter_mut().enumerate() {
                    r[a] += va * self.target_laplacians[i][c];
                }
            }
        }
        let w2 = self.control_weight * self.control_weight;
        for (&c, t) in self.control_indices.iter().zip(&self.control_targets) {
            normal[(c, c)] += w2;
            for (axis, r) in rhs.iter_mut().enumerate() {
                r[c] += w2 * t[axis];
            }
        }
        let max_diag = normal.diagonal().max();
        let chol = Cholesky::new(normal).ok_or(LsqError::RankDeficient { coordinate: 'x' })?;
        let l_diag = chol.l_dirty().diagonal();
        let min_pivot = l_diag.iter().map(|v| v * v).fold(f64::INFINITY, f64::min);
        if !(min_pivot > PIVOT_TOLERANCE * max_diag) {
            return Err(LsqError::RankDeficient { coordinate: 'x' });
        }
        let cols: Vec<DVector<f64>> = rhs.iter().map(|r| chol.solve(r)).collect();
        let points = (0..n).map(|i| [cols[0][i], cols[1][i], cols[2][i]]).collect();
        Ok(PointCloud::new(points)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{chamfer_distance, knn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(seed: u64, n: usize) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
                .collect(),
        )
        .unwrap()
    }

    fn max_dev(a: &PointCloud, b: &PointCloud) -> f64 {
        a.points()
            .iter()
            .zip(b.points())
            .flat_map(|(p, q)| (0..3).map(move |i| (p[i] - q[i]).abs()))
            .fold(0.0, f64::max)
    }

    #[test]
    fn laplacian_coordinate_examples() {
        let chain = PointCloud::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]]).unwrap();
        let graph = knn(&chain, 2).unwrap();
        let delta = laplacian_coordinates(&chain, &graph);
        assert_eq!(delta[1], [-0.5, 0.0, 0.0]);
        let moved = laplacian_coordinates(&chain.translated([4.0, -2.0, 7.0]), &graph);
        for (a, b) in delta.iter().zip(&moved) {
            for i in 0..3 {
                assert!((a[i] - b[i]).abs() < 1e-12);
            }
        }
        // A point at its neighbors' centroid.
        let sym = PointCloud::new(vec![[-1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
        let g = LaplacianGraph::from_lists(2, &[vec![1, 2], vec![0, 2], vec![0, 1]]).unwrap();
        assert_eq!(laplacian_coordinates(&sym, &g)[1], [0.0, 0.0, 0.0]);
    }

    #[test]
    fn full_control_recovers_cloud() {
        let cloud = random_cloud(1, 60);
        let graph = knn(&cloud, 6).unwrap();
        let delta = laplacian_coordinates(&cloud, &graph);
        let sys = LsqSystem::new(graph, (0..60).collect(), cloud.points().to_vec(), 1e3, delta).unwrap();
        assert!(max_dev(&sys.solve().unwrap(), &cloud) < 1e-9);
    }

    #[test]
    fn chain_midpoint() {
        let chain = PointCloud::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]).unwrap();
        let graph = knn(&chain, 2).unwrap();
        let delta = laplacian_coordinates(&chain, &graph);
        assert_eq!(delta[1], [0.0, 0.0, 0.0]);
        let sys = LsqSystem::new(graph, vec![0, 2], vec![[0.0; 3], [2.0, 0.0, 0.0]], 1e3, delta).unwrap();
        let x = sys.solve().unwrap();
        for (a, e) in x.points()[1].iter().zip([1.0, 0.0, 0.0]) {
            assert!((a - e).abs() < 1e-9);
        }
    }

    #[test]
    fn no_controls_is_rank_deficient() {
        let cloud = random_cloud(2, 20);
        let graph = knn(&cloud, 4).unwrap();
        let delta = laplacian_coordinates(&cloud, &graph);
        let sys = LsqSystem::new(graph, vec![], vec![], 1e3, delta).unwrap();
        assert!(matches!(sys.solve(), Err(LsqError::RankDeficient { .. })));
    }

    #[test]
    fn invalid_systems_rejected() {
        let cloud = random_cloud(3, 10);
        let graph = knn(&cloud, 3).unwrap();
        let delta = laplacian_coordinates(&cloud, &graph);
        assert!(LsqSystem::new(graph.clone(), vec![10], vec![[0.0; 3]], 1.0, delta.clone()).is_err());
        assert!(LsqSystem::new(graph.clone(), vec![1, 1], vec![[0.0; 3]; 2], 1.0, delta.clone()).is_err());
        assert!(LsqSystem::new(graph.clone(), vec![1], vec![], 1.0, delta.clone()).is_err());
        assert!(LsqSystem::new(graph.clone(), vec![1], vec![[0.0; 3]], 0.0, delta.clone()).is_err());
        assert!(LsqSystem::new(graph, vec![1], vec![[0.0; 3]], 1.0, delta[..3].to_vec()).is_err());
    }

    #[test]
    fn control_residual_shrinks_with_weight() {
        // δ from a perturbed cloud, targets from the original: the two
        // objectives compete, so the weight matters.
        let truth = random_cloud(4, 80);
        let noisy = random_cloud(5, 80);
        let graph = knn(&truth, 6).unwrap();
        let delta = laplacian_coordinates(&noisy, &graph);
        let controls: Vec<usize> = (0..80).step_by(5).collect();
        let targets = controls.iter().map(|&c| truth.points()[c]).collect();
        let base = LsqSystem::new(graph, controls, targets, 1.0, delta).unwrap();
        let mut last = f64::INFINITY;
        for w in [1.0, 10.0, 100.0, 1000.0] {
            let sys = base.with_weight(w).unwrap();
            let r = sys.control_residual(&sys.solve().unwrap());
            assert!(r <= last + 1e-12, "w = {w}: {r} > {last}");
            last = r;
        }
    }

    #[test]
    fn more_controls_never_hurt_consistent_systems() {
        let truth = random_cloud(6, 50);
        let graph = knn(&truth, 5).unwrap();
        let delta = laplacian_coordinates(&truth, &graph);
        let mut last = f64::INFINITY;
        for count in [1, 5, 20, 50] {
            let controls: Vec<usize> = (0..count).collect();
            let targets = controls.iter().map(|&c| truth.points()[c]).collect();
            let sys = LsqSystem::new(graph.clone(), controls, targets, 1e3, delta.clone()).unwrap();
            let cd = chamfer_distance(&sys.solve().unwrap(), &truth);
            assert!(cd <= last + 1e-12);
            assert!(cd < 1e-12);
            last = cd;
        }
    }
}
