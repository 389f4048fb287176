//! AdamW with global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm limit; 0 disables clipping.
    pub clip_norm: f64,
    /// Linear warmup length in optimizer steps.
    pub warmup_steps: usize,
    /// Cosine decay of the learning rate to `final_lr_fraction · lr` over
    /// the run.
    pub cosine_decay: bool,
    pub final_lr_fraction: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-4,
            batch_size: 8,
            epochs: 30,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            warmup_steps: 0,
            cosine_decay: false,
            final_lr_fraction: 0.1,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.clip_norm >= 0.0 && self.eps > 0.0) {
            return bad("weight_decay and clip_norm must be non-negative, eps positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("betas must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return bad("final_lr_fraction must lie in [0, 1]");
        }
        Ok(())
    }

    /// Learning rate at optimizer step `step` (0-based) of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let mut lr = self.learning_rate;
        if step < self.warmup_steps {
            lr *= (step + 1) as f64 / self.warmup_steps as f64;
        }
        if self.cosine_decay && total > 1 {
            let p = (step as f64 / (total - 1) as f64).min(1.0);
            let f = self.final_lr_fraction;
            lr *= f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos());
        }
        lr
    }
}

pub struct AdamW {
    config: OptimizerConfig,
    m: Vec<Mat>,
    v: Vec<Mat>,
    step: u64,
}

/// Skips decay on biases, norm parameters and embeddings.
fn decays(name: &str) -> bool {
    name.ends_with(".w") && !name.contains("embed")
}

impl AdamW {
    pub fn new(config: OptimizerConfig, params: &ParamStore) -> Self {
        let zeros = || {
            params
                .ids()
                .map(|id| {
                    let p = params.get(id);
                    Mat::zeros(p.rows, p.cols)
                })
                .collect::<Vec<_>>()
        };
        AdamW {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    /// Scales `grads` in place so their global norm is at most `clip_norm`.
    /// Returns the norm before clipping.
    pub fn clip(&self, grads: &mut [Mat]) -> f64 {
        let norm = grads
            .iter()
            .flat_map(|g| g.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        let c = self.config.clip_norm;
        if c > 0.0 && norm > c {
            let s = c / norm;
            for v in grads.iter_mut().flat_map(|g| g.data.iter_mut()) {
                *v *= s;
            }
        }
        norm
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Mat], lr: f64) {
        let c = &self.config;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let ids: Vec<ParamId> = params.ids().collect();
        for id in ids {
            let decay = if decays(params.name(id)) { c.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = params.get_mut(id);
            for (i, &g) in grads[id.0].data.iter().enumerate() {
                m.data[i] = c.beta1 * m.data[i] + (1.0 - c.beta1) * g;
                v.data[i] = c.beta2 * v.data[i] + (1.0 - c.beta2) * g * g;
                let mh = m.data[i] / bc1;
                let vh = v.data[i] / bc2;
                p.data[i] -= lr * (mh / (vh.sqrt() + c.eps) + decay * p.data[i]);
            }
        }
    }
}
