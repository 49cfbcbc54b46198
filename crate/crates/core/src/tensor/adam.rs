use serde::{Deserialize, Serialize};

use super::{mismatch, ParamGrads, ParamStore, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are shaped like the
/// parameters of the store they were created for.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step_count: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        Self {
            config,
            step_count: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Restores a state saved with [`Adam::moments`].
    pub fn from_parts(
        config: AdamConfig,
        step_count: u64,
        m: Vec<Tensor>,
        v: Vec<Tensor>,
    ) -> Result<Self, TensorError> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.shape() != b.shape()) {
            return Err(mismatch("adam", "first and second moment buffers differ"));
        }
        Ok(Self {
            config,
            step_count,
            m,
            v,
        })
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// One update. Parameters without a gradient (frozen or unused) keep
    /// their value and moments; the step counter advances once per call.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) -> Result<(), TensorError> {
        if store.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(mismatch(
                "adam",
                format!(
                    "{} parameters, {} gradients, {} moment buffers",
                    store.len(),
                    grads.len(),
                    self.m.len()
                ),
            ));
        }
        for (id, g) in grads.iter() {
            let p = store.get(id);
            if p.shape() != g.shape() || self.m[id.0].shape() != p.shape() {
                return Err(mismatch(
                    "adam",
                    format!(
                        "{}: param {:?}, grad {:?}, moments {:?}",
                        store.name(id),
                        p.shape(),
                        g.shape(),
                        self.m[id.0].shape()
                    ),
                ));
            }
        }
        self.step_count += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (id, g) in grads.iter() {
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
