use super::{Tape, Tensor, TensorError, Var};

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences with step `h`, element by element.
///
/// `f` receives one leaf per tensor in `params` and must return a scalar.
/// The result is the largest elementwise relative error.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], h: f64) -> Result<f64, TensorError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, TensorError>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let leaves: Vec<Var<'_>> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
        let loss = f(&tape, &leaves)?;
        let grads = tape.backward(loss)?;
        leaves
            .iter()
            .zip(params)
            .map(|(l, p)| grads.get(*l).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect()
    };
    let eval = |values: &[Tensor]| -> Result<f64, TensorError> {
        let tape = Tape::new();
        let leaves: Vec<Var<'_>> = values.iter().map(|p| tape.constant(p.clone())).collect();
        Ok(f(&tape, &leaves)?.item())
    };
    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, grad) in analytic.iter().enumerate() {
        for i in 0..grad.numel() {
            let orig = work[pi].data()[i];
            work[pi].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[pi].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[pi].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(grad.data()[i], numeric));
        }
    }
    Ok(worst)
}
