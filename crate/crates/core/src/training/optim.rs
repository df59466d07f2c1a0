//! AdamW with global gradient-norm clipping.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tensor};
use crate::codec::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Gradients with a larger global norm are rescaled to this norm.
    pub grad_clip: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.8,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 1e-4,
            grad_clip: 1.0,
        }
    }
}

/// First and second moments per parameter, allocated on first use.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Option<Tensor>>,
    second: Vec<Option<Tensor>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            ..Self::default()
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Moment tensors of a parameter, if it has been updated.
    pub fn moments(&self, index: usize) -> Option<(&Tensor, &Tensor)> {
        match (self.first.get(index), self.second.get(index)) {
            (Some(Some(m)), Some(Some(v))) => Some((m, v)),
            _ => None,
        }
    }

    /// Applies one update to every parameter present in `grads`; returns the
    /// pre-clipping gradient norm. Parameters without a gradient are untouched.
    pub fn step(&mut self, params: &mut ParamStore, mut grads: Gradients) -> f64 {
        let norm = grads.global_norm();
        if grads.is_empty() {
            return norm;
        }
        if self.config.grad_clip > 0.0 && norm > self.config.grad_clip {
            grads.scale(self.config.grad_clip / norm);
        }
        self.step += 1;
        let t = self.step as i32;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        if self.first.len() < params.len() {
            self.first.resize(params.len(), None);
            self.second.resize(params.len(), None);
        }
        for (id, g) in grads.iter() {
            let p = params.get_mut(id);
            let m = self.first[id.0].get_or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self.second[id.0].get_or_insert_with(|| Tensor::zeros(p.shape()));
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
                *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
                let update = (*mv / bias1) / ((*vv / bias2).sqrt() + c.eps);
                *pv -= c.lr * (update + c.weight_decay * *pv);
            }
        }
        norm
    }
}
