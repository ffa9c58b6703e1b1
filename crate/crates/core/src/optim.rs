//! Adam with decoupled weight decay and a warmup/linear-decay schedule.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Gradients;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to matrices only (not biases or norms).
    pub weight_decay: f64,
    pub warmup_steps: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay: 0.01,
            warmup_steps: 16,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Linear warmup to `max_lr` over `warmup` steps, then linear decay to zero
/// at `total`. `step` counts completed steps.
pub fn learning_rate(max_lr: f64, step: u64, warmup: u64, total: u64) -> f64 {
    if step >= total {
        return 0.0;
    }
    if step < warmup {
        return max_lr * (step + 1) as f64 / warmup as f64;
    }
    if total <= warmup {
        return max_lr;
    }
    max_lr * (total - step) as f64 / (total - warmup) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Number of updates applied to each parameter (bias correction).
    pub t: Vec<u64>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        Self {
            config,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: alloc::vec![0; params.len()],
        }
    }

    /// One update at learning rate `lr`. Parameters flagged in `frozen`
    /// are left untouched, moments included.
    pub fn step(&mut self, params: &mut [Tensor], grads: &Gradients, lr: f64, frozen: &[bool]) -> Result<()> {
        if params.len() != self.m.len() || frozen.len() != params.len() {
            return Err(Error::Config("optimizer state does not match parameters".into()));
        }
        let c = &self.config;
        for (i, p) in params.iter_mut().enumerate() {
            if frozen[i] {
                continue;
            }
            let Some(g) = grads.get(i) else { continue };
            if g.shape() != p.shape() {
                return Err(Error::dim("adam", format!("grad {:?} vs param {:?}", g.shape(), p.shape())));
            }
            self.t[i] += 1;
            let t = self.t[i] as f64;
            let bc1 = 1.0 - libm::pow(c.beta1, t);
            let bc2 = 1.0 - libm::pow(c.beta2, t);
            let decay = if p.rank() == 2 { c.weight_decay } else { 0.0 };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * (mhat / (libm::sqrt(vhat) + c.eps) + decay * *w);
            }
        }
        Ok(())
    }
}
