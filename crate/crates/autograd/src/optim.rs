use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn betas(mut self, beta1: f64, beta2: f64) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self
    }

    pub fn eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }
}

/// Adam with per-parameter step counts, so parameters that miss a gradient on
/// some steps keep an exact bias correction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    steps: Vec<u64>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        Self {
            config,
            m: store.values().iter().map(|t| Tensor::zeros(t.shape())).collect(),
            v: store.values().iter().map(|t| Tensor::zeros(t.shape())).collect(),
            steps: vec![0; store.len()],
        }
    }

    /// Apply one update with the configured learning rate.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<&Tensor>]) {
        let lr = self.config.lr;
        self.step_with_lr(store, grads, lr);
    }

    /// Apply one update. Parameters whose gradient is `None` are left untouched.
    pub fn step_with_lr(&mut self, store: &mut ParamStore, grads: &[Option<&Tensor>], lr: f64) {
        assert_eq!(grads.len(), store.len(), "gradient count does not match store");
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);
            let p = store.values_mut()[i].data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Global L2 norm of a gradient set.
pub fn grad_norm(grads: &[Option<&Tensor>]) -> f64 {
    grads.iter().flatten().map(|g| g.sq_norm()).sum::<f64>().sqrt()
}

/// Rescale gradients in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}
