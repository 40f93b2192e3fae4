//! Adam with bias correction and a linear-warmup learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Vec<f32>>,
    pub second_moment: Vec<Vec<f32>>,
}

impl OptimizerState {
    pub fn new(params: &ParamStore<f32>, config: AdamConfig) -> Self {
        let zeros = || params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            config,
            step: 0,
            first_moment: zeros(),
            second_moment: zeros(),
        }
    }

    /// One Adam update at learning rate `lr`; clears gradients afterwards.
    pub fn step(&mut self, params: &mut ParamStore<f32>, lr: f64) -> Result<()> {
        if params.len() != self.first_moment.len() {
            return Err(Error::Usage(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first_moment.len(),
                params.len()
            )));
        }
        if let Some(i) = params.tensors().iter().position(|t| t.grad().is_none()) {
            return Err(Error::Usage(format!(
                "parameter {} has no gradient",
                params.names()[i]
            )));
        }
        self.step += 1;
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
            ..
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (k, t) in params.tensors_mut().iter_mut().enumerate() {
            let grad = t.take_grad().expect("checked above");
            let m = &mut self.first_moment[k];
            let v = &mut self.second_moment[k];
            for (j, p) in t.data_mut().iter_mut().enumerate() {
                let g = grad[j] as f64;
                let mj = beta1 * m[j] as f64 + (1.0 - beta1) * g;
                let vj = beta2 * v[j] as f64 + (1.0 - beta2) * g * g;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let update = lr * (mj / bc1) / ((vj / bc2).sqrt() + epsilon);
                *p = (*p as f64 - update) as f32;
            }
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `base` over `warmup` steps, constant afterwards.
pub fn warmup_lr(base: f64, step: u64, warmup: u64) -> f64 {
    if warmup == 0 {
        base
    } else {
        base * ((step + 1) as f64 / warmup as f64).min(1.0)
    }
}
