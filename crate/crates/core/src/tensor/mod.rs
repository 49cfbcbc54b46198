//! Dense f64 tensors with a reverse-mode differentiation tape.
//!
//! [`Tensor`] is a plain row-major value. Differentiable computation happens
//! through [`Var`] handles recorded on a [`Tape`]; calling [`Tape::backward`]
//! on a scalar result walks the tape in reverse and returns a [`Gradients`]
//! map. Parameters live in a [`ParamStore`] and are updated with [`Adam`].

mod adam;
mod gradcheck;
mod ops;
mod params;
mod tape;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{finite_diff_check, relative_error};
pub use ops::BatchNormMode;
pub use params::{ParamGrads, ParamId, ParamStore};
pub use tape::{BatchStats, Gradients, OpKind, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("invalid tensor shape {shape:?} for {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{op}: index {index} out of range for extent {extent}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },
}

pub(crate) fn mismatch(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}

/// Row-major dense tensor. Every extent is at least one.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || numel != data.len() {
            return Err(TensorError::InvalidShape {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && !shape.contains(&0),
            "tensor extents must be positive: {shape:?}"
        );
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds an `(rows, 3)` tensor from point triples.
    pub fn from_points(points: &[[f64; 3]]) -> Result<Self, TensorError> {
        let data = points.iter().flat_map(|p| p.iter().copied()).collect();
        Self::new(vec![points.len(), 3], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Interprets a `(rows, 3)` tensor as point triples.
    pub fn to_points(&self) -> Result<Vec<[f64; 3]>, TensorError> {
        if self.shape.len() != 2 || self.shape[1] != 3 {
            return Err(mismatch(
                "to_points",
                format!("expected (n, 3), got {:?}", self.shape),
            ));
        }
        Ok(self
            .data
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect())
    }

    pub(crate) fn with_data(shape: &[usize], data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub(crate) fn reshaped(mut self, shape: &[usize]) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner) block sizes.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_invariants_enforced() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
        assert!(Tensor::new(vec![], vec![1.0]).is_err());
    }

    #[test]
    fn axis_split_blocks() {
        assert_eq!(axis_split(&[2, 3, 4], 0), (1, 2, 12));
        assert_eq!(axis_split(&[2, 3, 4], 1), (2, 3, 4));
        assert_eq!(axis_split(&[2, 3, 4], 2), (6, 4, 1));
    }
}
