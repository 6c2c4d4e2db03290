//! Adam and the warmup + cosine learning-rate schedule.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, UpqError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with per-name moment buffers.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    t: i32,
    moments: HashMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            t: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Advances the bias-correction clock; call once before each round of updates.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &Tensor, lr: f32) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(UpqError::contract(format!(
                "gradient for {name} has shape {:?}, parameter {:?}",
                grad.shape(),
                param.shape()
            )));
        }
        if self.t == 0 {
            return Err(UpqError::contract("Adam::update before begin_step"));
        }
        let n = param.numel();
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        let AdamConfig { beta1, beta2, eps, weight_decay } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t);
        let bc2 = 1.0 - beta2.powi(self.t);
        for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let step = (*m / bc1) / ((*v / bc2).sqrt() + eps);
            *p -= lr * (step + weight_decay * *p);
        }
        Ok(())
    }
}

/// Linear warmup to `peak`, then cosine decay to `floor_frac · peak` at `total`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub peak: f32,
    pub warmup: usize,
    pub total: usize,
    pub floor_frac: f32,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f32 {
        if step < self.warmup {
            return self.peak * (step + 1) as f32 / self.warmup as f32;
        }
        let span = self.total.saturating_sub(self.warmup).max(1);
        let p = ((step - self.warmup) as f32 / span as f32).min(1.0);
        let floor = self.peak * self.floor_frac;
        floor + (self.peak - floor) * 0.5 * (1.0 + (std::f32::consts::PI * p).cos())
    }
}
