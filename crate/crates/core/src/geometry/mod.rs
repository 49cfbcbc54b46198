//! Point-cloud kernels: farthest-point sampling, neighborhoods, the uniform
//! Laplacian graph, and the differentiable Chamfer distance.
//!
//! Every search breaks distance ties toward the lowest index so results are
//! reproducible and independent of the search structure used.

mod chamfer;
mod grid;
mod neighbors;
mod sampling;

pub use chamfer::{chamfer, chamfer_brute, chamfer_directional, chamfer_distance};
pub use grid::SpatialGrid;
pub use neighbors::{ball_group, knn, knn_brute, nearest_brute, nearest_neighbors};
pub use sampling::{fps, lexicographic_min, FpsSeed};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("empty cloud")]
    EmptyCloud,
    #[error("non-finite coordinate at point {0}")]
    NonFinite(usize),
    #[error("sample count {m} out of range 1..={n}")]
    SampleCount { m: usize, n: usize },
    #[error("index {index} out of range for {len} points")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("neighbor count k = {k} requires more than {k} points, got {n}")]
    NeighborCount { k: usize, n: usize },
    #[error("radius must be positive, got {0}")]
    Radius(f64),
    #[error("group size must be at least 1")]
    GroupSize,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Point = [f64; 3];

#[inline]
pub fn dist2(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Ordered, non-empty list of finite 3D points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self, GeometryError> {
        if points.is_empty() {
            return Err(GeometryError::EmptyCloud);
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(GeometryError::NonFinite(i));
        }
        Ok(Self { points })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self, GeometryError> {
        Self::new(t.to_points()?)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_points(&self.points).expect("non-empty cloud")
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Always false; kept for API symmetry with `len`.
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self, GeometryError> {
        let points = indices
            .iter()
            .map(|&i| {
                self.points
                    .get(i)
                    .copied()
                    .ok_or(GeometryError::IndexOutOfRange {
                        index: i,
                        len: self.len(),
                    })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(points)
    }

    pub fn translated(&self, offset: Point) -> Self {
        Self {
            points: self
                .points
                .iter()
                .map(|p| [p[0] + offset[0], p[1] + offset[1], p[2] + offset[2]])
                .collect(),
        }
    }

    pub fn bounding_box(&self) -> (Point, Point) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (lo, hi)
    }

    pub fn bbox_diagonal(&self) -> f64 {
        let (lo, hi) = self.bounding_box();
        dist2(&lo, &hi).sqrt()
    }

    /// Concatenation, `self` first.
    pub fn concat(&self, other: &PointCloud) -> Self {
        let mut points = self.points.clone();
        points.extend_from_slice(&other.points);
        Self { points }
    }
}

/// Fixed-degree one-way adjacency with uniform weight `1/k` per edge.
#[derive(Clone, Debug, PartialEq)]
pub struct LaplacianGraph {
    k: usize,
    neighbors: Vec<usize>,
}

impl LaplacianGraph {
    /// Builds a graph from per-point neighbor lists, validating that each
    /// list has exactly `k` distinct in-range indices excluding its owner.
    pub fn from_lists(k: usize, lists: &[Vec<usize>]) -> Result<Self, GeometryError> {
        let n = lists.len();
        if k == 0 || k >= n {
            return Err(GeometryError::NeighborCount { k, n });
        }
        let mut neighbors = Vec::with_capacity(n * k);
        for (i, row) in lists.iter().enumerate() {
            if row.len() != k {
                return Err(GeometryError::NeighborCount { k, n: row.len() });
            }
            for (a, &j) in row.iter().enumerate() {
                if j >= n || j == i || row[..a].contains(&j) {
                    return Err(GeometryError::IndexOutOfRange { index: j, len: n });
                }
            }
            neighbors.extend_from_slice(row);
        }
        Ok(Self { k, neighbors })
    }

    pub(crate) fn from_flat(k: usize, neighbors: Vec<usize>) -> Self {
        debug_assert_eq!(neighbors.len() % k, 0);
        Self { k, neighbors }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.neighbors.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn weight(&self) -> f64 {
        1.0 / self.k as f64
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i * self.k..(i + 1) * self.k]
    }

    /// All neighbor indices, row-major (`len() * k` entries).
    pub fn flat(&self) -> &[usize] {
        &self.neighbors
    }

    /// Sum of edge weights leaving point `i`; 1 by construction.
    pub fn row_weight_sum(&self, i: usize) -> f64 {
        self.neighbors(i).iter().map(|_| self.weight()).sum()
    }

    /// True when every edge `i → j` has a matching `j → i`.
    pub fn is_symmetric(&self) -> bool {
        (0..self.len()).all(|i| self.neighbors(i).iter().all(|&j| self.neighbors(j).contains(&i)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cloud_invariants() {
        assert_eq!(PointCloud::new(vec![]), Err(GeometryError::EmptyCloud));
        assert_eq!(
            PointCloud::new(vec![[0.0; 3], [f64::NAN, 0.0, 0.0]]),
            Err(GeometryError::NonFinite(1))
        );
    }

    #[test]
    fn graph_validation() {
        assert!(LaplacianGraph::from_lists(1, &[vec![1], vec![0]]).is_ok());
        assert!(LaplacianGraph::from_lists(1, &[vec![0], vec![0]]).is_err());
        assert!(LaplacianGraph::from_lists(2, &[vec![1, 1], vec![0, 2], vec![0, 1]]).is_err());
        assert!(LaplacianGraph::from_lists(1, &[vec![3], vec![0]]).is_err());
        let g = LaplacianGraph::from_lists(2, &[vec![1, 2], vec![0, 2], vec![0, 1]]).unwrap();
        assert!(g.is_symmetric());
        assert!((g.row_weight_sum(1) - 1.0).abs() < 1e-15);
    }
}
