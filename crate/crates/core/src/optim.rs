//! AdamW with per-group freezing.

use serde::{Deserialize, Serialize};

use crate::model::{Model, ParamGroup};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Decoupled weight decay applies to matrices only; vectors and scalars
/// (biases, the mask token, the fusion logit) are not decayed.
#[derive(Debug, Clone)]
pub struct AdamW {
    config: AdamWConfig,
    first: Model,
    second: Model,
    step: u64,
    trainable: Vec<ParamGroup>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, model: &Model, trainable: &[ParamGroup]) -> Self {
        Self {
            config,
            first: model.zeros_like(),
            second: model.zeros_like(),
            step: 0,
            trainable: trainable.to_vec(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn trainable(&self) -> &[ParamGroup] {
        &self.trainable
    }

    /// One update of every trainable parameter. Frozen groups are untouched.
    pub fn step(&mut self, model: &mut Model, grads: &Model) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let grads = grads.params();
        let firsts = self.first.params_mut();
        let seconds = self.second.params_mut();
        for (((p, g), m), v) in model.params_mut().into_iter().zip(grads).zip(firsts).zip(seconds) {
            if !self.trainable.contains(&p.group) {
                continue;
            }
            let decay = if p.shape.len() >= 2 { c.weight_decay } else { 0.0 };
            for (((x, &gx), mx), vx) in p.data.iter_mut().zip(g.data).zip(m.data).zip(v.data) {
                *mx = c.beta1 * *mx + (1.0 - c.beta1) * gx;
                *vx = c.beta2 * *vx + (1.0 - c.beta2) * gx * gx;
                let mhat = *mx / bias1;
                let vhat = *vx / bias2;
                *x -= c.learning_rate * (mhat / (vhat.sqrt() + c.eps) + decay * *x);
            }
        }
    }
}
