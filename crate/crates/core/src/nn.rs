//! Parameterized layers shared by the networks.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{BatchNormMode, BatchStats, ParamId, ParamStore, Tape, Tensor, TensorError, Var};

/// Forward-pass context: the tape, a read-only parameter snapshot, and the
/// batch-norm mode. Training-mode batch norms report their statistics here.
pub struct Ctx<'t, 's> {
    pub tape: &'t Tape,
    pub store: &'s ParamStore,
    pub train: bool,
    bn_stats: RefCell<Vec<BnUpdate>>,
    bindings: HashMap<ParamId, Var<'t>>,
}

/// Statistics observed by one batch-norm layer during a training forward.
#[derive(Clone, Debug, PartialEq)]
pub struct BnUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub stats: BatchStats,
}

impl<'t, 's> Ctx<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore, train: bool) -> Self {
        Self {
            tape,
            store,
            train,
            bn_stats: RefCell::new(Vec::new()),
            bindings: HashMap::new(),
        }
    }

    /// A context in which parameter `ids[i]` reads from `vars[i]` instead of
    /// the store. Used to differentiate with respect to tape leaves.
    pub fn with_bindings(
        tape: &'t Tape,
        store: &'s ParamStore,
        train: bool,
        ids: &[ParamId],
        vars: &[Var<'t>],
    ) -> Self {
        let mut ctx = Self::new(tape, store, train);
        ctx.bindings = ids.iter().copied().zip(vars.iter().copied()).collect();
        ctx
    }

    pub fn param(&self, id: ParamId) -> Var<'t> {
        match self.bindings.get(&id) {
            Some(&v) => v,
            None => self.tape.param(self.store, id),
        }
    }

    pub fn take_bn_updates(&self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_stats.borrow_mut())
    }
}

/// Folds per-sample statistics into the running buffers:
/// `running = momentum·running + (1 − momentum)·mean_over_samples(stats)`.
///
/// Every entry of `per_sample` must come from the same network, so the
/// layers line up by position.
pub fn apply_bn_updates(store: &mut ParamStore, per_sample: &[Vec<BnUpdate>], momentum: f64) {
    let Some(first) = per_sample.first() else {
        return;
    };
    let n = per_sample.len() as f64;
    for (layer, u) in first.iter().enumerate() {
        let width = u.stats.mean.len();
        let mut mean = vec![0.0; width];
        let mut var = vec![0.0; width];
        for sample in per_sample {
            let s = &sample[layer].stats;
            for c in 0..width {
                mean[c] += s.mean[c] / n;
                var[c] += s.var[c] / n;
            }
        }
        for (id, batch) in [(u.running_mean, mean), (u.running_var, var)] {
            let buf = store.get_mut(id);
            for (r, b) in buf.data_mut().iter_mut().zip(batch) {
                *r = momentum * *r + (1.0 - momentum) * b;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    /// Weights uniform in `±sqrt(6 / inputs)` (He-uniform), zero bias.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = (6.0 / inputs as f64).sqrt();
        let w = (0..inputs * outputs).map(|_| rng.gen_range(-bound..bound)).collect();
        let weight = store.add(format!("{name}.weight"), Tensor::new(vec![inputs, outputs], w).unwrap());
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[outputs])));
        Self {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[inputs, outputs]));
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[outputs])));
        Self {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    /// `x·W + b` for `x` of shape `(rows, inputs)`.
    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>, TensorError> {
        let y = x.matmul(ctx.param(self.weight))?;
        match self.bias {
            Some(b) => y.add(ctx.param(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[width], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[width])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[width])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(&[width], 1.0)),
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>, TensorError> {
        let (gamma, beta) = (ctx.param(self.gamma), ctx.param(self.beta));
        if ctx.train {
            let (y, stats) = x.batch_norm(gamma, beta, BatchNormMode::Train)?;
            ctx.bn_stats.borrow_mut().push(BnUpdate {
                running_mean: self.running_mean,
                running_var: self.running_var,
                stats: stats.expect("training mode reports statistics"),
            });
            Ok(y)
        } else {
            let mean = ctx.store.get(self.running_mean).data();
            let var = ctx.store.get(self.running_var).data();
            Ok(x.batch_norm(gamma, beta, BatchNormMode::Eval { mean, var })?.0)
        }
    }
}

/// Global pooling over the point axis.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Max,
    Mean,
}

impl Pooling {
    /// Pools `(rows, width)` to `(1, width)`.
    pub fn apply<'t>(self, x: Var<'t>) -> Result<Var<'t>, TensorError> {
        match self {
            Pooling::Max => x.reduce_max(0),
            Pooling::Mean => x.reduce_mean(0),
        }
    }
}

/// Stack of linear layers with ReLU between them (none after the last).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, widths: &[usize], rng: &mut R) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true, rng))
            .collect();
        Self { layers }
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().unwrap().outputs
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, mut x: Var<'t>) -> Result<Var<'t>, TensorError> {
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(ctx, x)?;
            if i + 1 < self.layers.len() {
                x = x.relu();
            }
        }
        Ok(x)
    }
}

/// Repeats a `(1, width)` row `rows` times.
pub fn broadcast_rows<'t>(row: Var<'t>, rows: usize) -> Result<Var<'t>, TensorError> {
    row.gather(&vec![0; rows])
}
