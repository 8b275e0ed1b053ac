use serde::{Deserialize, Serialize};

use super::params::{GradMap, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam hyperparameters. Defaults follow the flow training recipe:
/// `lr = 2e-4`, `beta1 = 0.5`, `beta2 = 0.999`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// L2 penalty coefficient added to the gradient. Zero disables it.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step_count: u64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            step_count: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    /// Applies one update to every trainable parameter of `store`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradMap) -> Result<()> {
        if store.len() != self.first_moment.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} parameters but store has {}",
                self.first_moment.len(),
                store.len()
            )));
        }
        if grads.len() < store.len() {
            return Err(Error::InvalidArgument(format!(
                "missing gradient entry for parameter {} ({})",
                grads.len(),
                store.name(crate::autodiff::ParamId(grads.len()))
            )));
        }
        for id in store.ids() {
            let g = &grads.0[id.0];
            if g.shape() != store.get(id).shape() {
                return Err(Error::shape("adam_step", store.get(id).shape(), g.shape()));
            }
        }

        self.step_count += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
            weight_decay: wd,
        } = self.config;
        let t = self.step_count as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);

        for id in store.ids() {
            if !store.is_trainable(id) {
                continue;
            }
            let g = grads.0[id.0].data();
            let m = self.first_moment[id.0].data_mut();
            let v = self.second_moment[id.0].data_mut();
            let p = store.get_mut(id).data_mut();
            for k in 0..p.len() {
                let gk = g[k] + wd * p[k];
                m[k] = b1 * m[k] + (1.0 - b1) * gk;
                v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so their global L2 norm does not exceed `max_norm`.
pub fn clip_gradients(grads: &GradMap, max_norm: f64) -> Result<GradMap> {
    if !(max_norm > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "max_norm must be positive, got {max_norm}"
        )));
    }
    let mut out = grads.clone();
    let norm = grads.global_norm();
    if norm > max_norm {
        out.scale(max_norm / norm);
    }
    Ok(out)
}
