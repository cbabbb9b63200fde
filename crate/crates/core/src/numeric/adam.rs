use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }
}

/// Adam with bias correction. Moment buffers are indexed like the store's
/// parameters and allocated on the first step.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients stored in `params`, then zeroes
    /// them. Parameters without a gradient slot are left untouched.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::validation(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                params.len()
            )));
        }
        for id in params.ids() {
            let t = params.get(id);
            if self.m[id.index()].len() != t.len() {
                return Err(Error::Shape {
                    op: "adam_step",
                    left: vec![self.m[id.index()].len()],
                    right: t.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for id in params.ids() {
            let t = params.get_mut(id);
            let Some(grad) = t.grad.take() else { continue };
            let m = &mut self.m[id.index()];
            let v = &mut self.v[id.index()];
            for (((p, &g), m), v) in t.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g as f64;
                let mn = beta1 * *m as f64 + (1.0 - beta1) * g;
                let vn = beta2 * *v as f64 + (1.0 - beta2) * g * g;
                *m = mn as f32;
                *v = vn as f32;
                let update = lr * (mn / bc1) / ((vn / bc2).sqrt() + eps);
                if update != 0.0 {
                    *p = (*p as f64 - update) as f32;
                }
            }
            let mut grad = grad;
            grad.iter_mut().for_each(|g| *g = 0.0);
            t.grad = Some(grad);
        }
        Ok(())
    }
}
