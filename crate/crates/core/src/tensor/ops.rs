//! Differentiable ops on [`Var`].
//!
//! Each op computes its forward value eagerly and records a closure that
//! maps the output gradient back onto its inputs. Broadcasting is limited to
//! adding a row vector to every row of a matrix.

use super::tape::{BatchStats, OpKind, Var};
use super::{axis_split, mismatch, Tensor, TensorError};

pub const BATCH_NORM_EPS: f64 = 1e-5;

/// Which statistics a batch-norm node normalizes with.
#[derive(Clone, Copy, Debug)]
pub enum BatchNormMode<'a> {
    /// Per-batch mean and biased variance over the row axis.
    Train,
    /// Stored running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// `c = a·b` (or with transposed operands), optionally accumulating into `c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: strides describe buffers of exactly m*k, k*n and m*n elements,
    // which the callers guarantee by construction.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn unary<'t>(
    x: Var<'t>,
    kind: OpKind,
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64, f64) -> f64 + 'static,
) -> Var<'t> {
    let xv = x.value();
    let data: Vec<f64> = xv.data().iter().map(|&v| f(v)).collect();
    let out = Tensor::with_data(xv.shape(), data);
    let saved_out = out.data().to_vec();
    x.tape().record(kind, out, &[x], move |g| {
        let data = g
            .data()
            .iter()
            .zip(xv.data())
            .zip(&saved_out)
            .map(|((&g, &x), &y)| g * df(x, y))
            .collect();
        vec![Some(Tensor::with_data(xv.shape(), data))]
    })
}

impl<'t> Var<'t> {
    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        let (a, b) = (self.value(), rhs.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
        let out = Tensor::with_data(&[m, n], out);
        let (need_a, need_b) = (self.requires_grad(), rhs.requires_grad());
        Ok(self.tape().record(OpKind::MatMul, out, &[self, rhs], move |g| {
            let ga = need_a.then(|| {
                let mut d = vec![0.0; m * k];
                gemm(m, n, k, g.data(), false, b.data(), true, &mut d, false);
                Tensor::with_data(&[m, k], d)
            });
            let gb = need_b.then(|| {
                let mut d = vec![0.0; k * n];
                gemm(k, m, n, a.data(), true, g.data(), false, &mut d, false);
                Tensor::with_data(&[k, n], d)
            });
            vec![ga, gb]
        }))
    }

    /// Elementwise sum. `rhs` may also be a row vector (`[c]` or `[1, c]`)
    /// added to every row of `self`.
    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        let (a, b) = (self.value(), rhs.value());
        if a.shape() == b.shape() {
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
            let out = Tensor::with_data(a.shape(), data);
            return Ok(self
                .tape()
                .record(OpKind::Add, out, &[self, rhs], |g| {
                    vec![Some(g.clone()), Some(g.clone())]
                }));
        }
        let cols = *a.shape().last().unwrap();
        let row_like = b.numel() == cols && b.shape().iter().rev().skip(1).all(|&e| e == 1);
        if !row_like || b.shape().len() > a.shape().len() {
            return Err(mismatch("add", format!("{:?} + {:?}", a.shape(), b.shape())));
        }
        let mut data = a.data().to_vec();
        for row in data.chunks_exact_mut(cols) {
            for (v, bias) in row.iter_mut().zip(b.data()) {
                *v += bias;
            }
        }
        let out = Tensor::with_data(a.shape(), data);
        let b_shape = b.shape().to_vec();
        Ok(self.tape().record(OpKind::Add, out, &[self, rhs], move |g| {
            let mut gb = vec![0.0; cols];
            for row in g.data().chunks_exact(cols) {
                for (acc, v) in gb.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            vec![Some(g.clone()), Some(Tensor::with_data(&b_shape, gb))]
        }))
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        let (a, b) = (self.value(), rhs.value());
        if a.shape() != b.shape() {
            return Err(mismatch("sub", format!("{:?} - {:?}", a.shape(), b.shape())));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::with_data(a.shape(), data);
        Ok(self.tape().record(OpKind::Sub, out, &[self, rhs], |g| {
            let neg = g.data().iter().map(|v| -v).collect();
            vec![Some(g.clone()), Some(Tensor::with_data(g.shape(), neg))]
        }))
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        let (a, b) = (self.value(), rhs.value());
        if a.shape() != b.shape() {
            return Err(mismatch("mul", format!("{:?} * {:?}", a.shape(), b.shape())));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::with_data(a.shape(), data);
        Ok(self.tape().record(OpKind::Mul, out, &[self, rhs], move |g| {
            let ga = g.data().iter().zip(b.data()).map(|(g, y)| g * y).collect();
            let gb = g.data().iter().zip(a.data()).map(|(g, x)| g * x).collect();
            vec![
                Some(Tensor::with_data(a.shape(), ga)),
                Some(Tensor::with_data(b.shape(), gb)),
            ]
        }))
    }

    pub fn scale(self, factor: f64) -> Var<'t> {
        unary(self, OpKind::Scale, |v| v * factor, move |_, _| factor)
    }

    /// ReLU with subgradient 0 at the kink.
    pub fn relu(self) -> Var<'t> {
        unary(
            self,
            OpKind::Relu,
            |v| v.max(0.0),
            |x, _| if x > 0.0 { 1.0 } else { 0.0 },
        )
    }

    pub fn square(self) -> Var<'t> {
        unary(self, OpKind::Square, |v| v * v, |x, _| 2.0 * x)
    }

    /// Square root; the gradient at exactly zero is taken as zero.
    pub fn sqrt(self) -> Var<'t> {
        unary(
            self,
            OpKind::Sqrt,
            f64::sqrt,
            |_, y| if y > 0.0 { 0.5 / y } else { 0.0 },
        )
    }

    /// Elementwise smooth-L1: `0.5·(σx)²` when `|x| < 1/σ²`, else `|x| − 0.5/σ²`.
    pub fn huber(self, sigma: f64) -> Var<'t> {
        let s2 = sigma * sigma;
        let knot = 1.0 / s2;
        unary(
            self,
            OpKind::Huber,
            move |x| {
                if x.abs() < knot {
                    0.5 * s2 * x * x
                } else {
                    x.abs() - 0.5 / s2
                }
            },
            move |x, _| {
                if x.abs() < knot {
                    s2 * x
                } else {
                    x.signum()
                }
            },
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>, TensorError> {
        let x = self.value();
        if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != x.numel() {
            return Err(mismatch("reshape", format!("{:?} -> {shape:?}", x.shape())));
        }
        let out = (*x).clone().reshaped(shape);
        let in_shape = x.shape().to_vec();
        Ok(self.tape().record(OpKind::Reshape, out, &[self], move |g| {
            vec![Some(g.clone().reshaped(&in_shape))]
        }))
    }

    /// Rows of `self` (axis 0) at `indices`, in order; repeats allowed.
    /// The backward pass scatter-adds into the selected rows.
    pub fn gather(self, indices: &[usize]) -> Result<Var<'t>, TensorError> {
        let x = self.value();
        let rows = x.shape()[0];
        if indices.is_empty() {
            return Err(mismatch("gather", "empty index list"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(TensorError::IndexOutOfRange {
                op: "gather",
                index: bad,
                extent: rows,
            });
        }
        let width = x.numel() / rows;
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            data.extend_from_slice(&x.data()[i * width..(i + 1) * width]);
        }
        let mut shape = x.shape().to_vec();
        shape[0] = indices.len();
        let out = Tensor::with_data(&shape, data);
        let indices = indices.to_vec();
        let in_shape = x.shape().to_vec();
        Ok(self.tape().record(OpKind::Gather, out, &[self], move |g| {
            let mut d = vec![0.0; rows * width];
            for (row, &i) in g.data().chunks_exact(width).zip(&indices) {
                for (acc, v) in d[i * width..(i + 1) * width].iter_mut().zip(row) {
                    *acc += v;
                }
            }
            vec![Some(Tensor::with_data(&in_shape, d))]
        }))
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| mismatch("concat", "no inputs"))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let rank = values[0].shape().len();
        if axis >= rank {
            return Err(mismatch("concat", format!("axis {axis} for rank {rank}")));
        }
        for v in &values[1..] {
            let ok = v.shape().len() == rank
                && v
                    .shape()
                    .iter()
                    .zip(values[0].shape())
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(mismatch(
                    "concat",
                    format!("{:?} vs {:?} on axis {axis}", values[0].shape(), v.shape()),
                ));
            }
        }
        let extents: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = extents.iter().sum();
        let (outer, _, inner) = axis_split(values[0].shape(), axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &e) in values.iter().zip(&extents) {
                data.extend_from_slice(&v.data()[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut shape = values[0].shape().to_vec();
        shape[axis] = total;
        let out = Tensor::with_data(&shape, data);
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        Ok(first.tape().record(OpKind::Concat, out, parts, move |g| {
            let mut grads: Vec<Vec<f64>> = extents
                .iter()
                .map(|&e| Vec::with_capacity(outer * e * inner))
                .collect();
            let mut offset = 0;
            for _ in 0..outer {
                for (gv, &e) in grads.iter_mut().zip(&extents) {
                    gv.extend_from_slice(&g.data()[offset..offset + e * inner]);
                    offset += e * inner;
                }
            }
            grads
                .into_iter()
                .zip(&shapes)
                .map(|(d, s)| Some(Tensor::with_data(s, d)))
                .collect()
        }))
    }

    fn reduce_shape(&self, op: &'static str, axis: usize) -> Result<(Vec<usize>, (usize, usize, usize)), TensorError> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(mismatch(op, format!("axis {axis} for shape {shape:?}")));
        }
        let split = axis_split(&shape, axis);
        let mut out = shape;
        out[axis] = 1;
        Ok((out, split))
    }

    /// Maximum along `axis` (kept with extent 1). Ties route the gradient to
    /// the lowest index.
    pub fn reduce_max(self, axis: usize) -> Result<Var<'t>, TensorError> {
        let (out_shape, (outer, extent, inner)) = self.reduce_shape("reduce_max", axis)?;
        let x = self.value();
        let mut data = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for a in 0..extent {
                let base = (o * extent + a) * inner;
                for i in 0..inner {
                    let v = x.data()[base + i];
                    let slot = o * inner + i;
                    if v > data[slot] || a == 0 {
                        data[slot] = v;
                        arg[slot] = a;
                    }
                }
            }
        }
        let out = Tensor::with_data(&out_shape, data);
        let in_shape = x.shape().to_vec();
        Ok(self.tape().record(OpKind::ReduceMax, out, &[self], move |g| {
            let mut d = vec![0.0; outer * extent * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let slot = o * inner + i;
                    d[(o * extent + arg[slot]) * inner + i] = g.data()[slot];
                }
            }
            vec![Some(Tensor::with_data(&in_shape, d))]
        }))
    }

    pub fn reduce_sum(self, axis: usize) -> Result<Var<'t>, TensorError> {
        self.reduce_linear("reduce_sum", OpKind::ReduceSum, axis, 1.0)
    }

    pub fn reduce_mean(self, axis: usize) -> Result<Var<'t>, TensorError> {
        let extent = self.shape().get(axis).copied().unwrap_or(1);
        self.reduce_linear("reduce_mean", OpKind::ReduceMean, axis, 1.0 / extent as f64)
    }

    fn reduce_linear(
        self,
        op: &'static str,
        kind: OpKind,
        axis: usize,
        factor: f64,
    ) -> Result<Var<'t>, TensorError> {
        let (out_shape, (outer, extent, inner)) = self.reduce_shape(op, axis)?;
        let x = self.value();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..extent {
                let base = (o * extent + a) * inner;
                for i in 0..inner {
                    data[o * inner + i] += x.data()[base + i];
                }
            }
        }
        for v in &mut data {
            *v *= factor;
        }
        let out = Tensor::with_data(&out_shape, data);
        let in_shape = x.shape().to_vec();
        Ok(self.tape().record(kind, out, &[self], move |g| {
            let mut d = vec![0.0; outer * extent * inner];
            for o in 0..outer {
                for a in 0..extent {
                    for i in 0..inner {
                        d[(o * extent + a) * inner + i] = g.data()[o * inner + i] * factor;
                    }
                }
            }
            vec![Some(Tensor::with_data(&in_shape, d))]
        }))
    }

    /// Sum of every element, as a `[1]` tensor.
    pub fn sum_all(self) -> Result<Var<'t>, TensorError> {
        let n = self.value().numel();
        self.reshape(&[n])?.reduce_sum(0)
    }

    /// Mean of every element, as a `[1]` tensor.
    pub fn mean_all(self) -> Result<Var<'t>, TensorError> {
        let n = self.value().numel();
        self.reshape(&[n])?.reduce_mean(0)
    }

    /// Batch normalization of a `(rows, channels)` matrix over the row axis,
    /// followed by the per-channel affine map `gamma·x̂ + beta`.
    ///
    /// In training mode the observed batch statistics are returned so the
    /// caller can update running averages.
    pub fn batch_norm(
        self,
        gamma: Var<'t>,
        beta: Var<'t>,
        mode: BatchNormMode<'_>,
    ) -> Result<(Var<'t>, Option<BatchStats>), TensorError> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if shape.len() != 2 {
            return Err(mismatch("batch_norm", format!("expected 2-D input, got {shape:?}")));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.numel() != cols || bv.numel() != cols {
            return Err(mismatch(
                "batch_norm",
                format!("{cols} channels, gamma {:?}, beta {:?}", gv.shape(), bv.shape()),
            ));
        }
        let (mean, var, stats) = match mode {
            BatchNormMode::Train => {
                let mut mean = vec![0.0; cols];
                for row in x.data().chunks_exact(cols) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                let mut var = vec![0.0; cols];
                for row in x.data().chunks_exact(cols) {
                    for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= rows as f64);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                };
                (mean, var, Some(stats))
            }
            BatchNormMode::Eval { mean, var } => {
                if mean.len() != cols || var.len() != cols {
                    return Err(mismatch("batch_norm", "running statistics width"));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
        let mut xhat = x.data().to_vec();
        for row in xhat.chunks_exact_mut(cols) {
            for c in 0..cols {
                row[c] = (row[c] - mean[c]) * inv_std[c];
            }
        }
        let mut data = xhat.clone();
        for row in data.chunks_exact_mut(cols) {
            for c in 0..cols {
                row[c] = gv.data()[c] * row[c] + bv.data()[c];
            }
        }
        let out = Tensor::with_data(&shape, data);
        let train = stats.is_some();
        let (g_shape, b_shape) = (gv.shape().to_vec(), bv.shape().to_vec());
        let node = self.tape().record(OpKind::BatchNorm, out, &[self, gamma, beta], move |g| {
            let mut dgamma = vec![0.0; cols];
            let mut dbeta = vec![0.0; cols];
            for (grow, xrow) in g.data().chunks_exact(cols).zip(xhat.chunks_exact(cols)) {
                for c in 0..cols {
                    dgamma[c] += grow[c] * xrow[c];
                    dbeta[c] += grow[c];
                }
            }
            let mut dx = vec![0.0; rows * cols];
            let n = rows as f64;
            for ((drow, grow), xrow) in dx
                .chunks_exact_mut(cols)
                .zip(g.data().chunks_exact(cols))
                .zip(xhat.chunks_exact(cols))
            {
                for c in 0..cols {
                    let scale = gv.data()[c] * inv_std[c];
                    drow[c] = if train {
                        scale * (grow[c] - dbeta[c] / n - xrow[c] * dgamma[c] / n)
                    } else {
                        scale * grow[c]
                    };
                }
            }
            vec![
                Some(Tensor::with_data(&shape, dx)),
                Some(Tensor::with_data(&g_shape, dgamma)),
                Some(Tensor::with_data(&b_shape, dbeta)),
            ]
        });
        Ok((node, stats))
    }
}
