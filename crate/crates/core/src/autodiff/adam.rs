use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::nn::Module;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    /// Linear warmup length in steps; 0 disables warmup.
    pub warmup_steps: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            betas: (0.9, 0.95),
            eps: 1e-8,
            warmup_steps: 100,
        }
    }
}

impl AdamConfig {
    /// Learning rate for the 1-based step `t` after warmup scaling.
    pub fn lr_at(&self, t: u64) -> f64 {
        if self.warmup_steps == 0 || t >= self.warmup_steps {
            self.lr
        } else {
            self.lr * t as f64 / self.warmup_steps as f64
        }
    }
}

/// First and second moment estimates for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One bias-corrected Adam update of `param` in place. `t` is the 1-based
/// step count used for bias correction.
pub fn adam_step(
    param: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    t: u64,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) {
    let (b1, b2) = betas;
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        param[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
}

/// Adam over the named parameters of a [`Module`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    state: HashMap<String, AdamState>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            state: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update using the gradients stored on the module's
    /// trainable tensors. A non-finite gradient anywhere aborts the whole
    /// step before any parameter changes.
    pub fn step(&mut self, module: &mut dyn Module) -> Result<()> {
        let mut bad = None;
        module.visit_params("", &mut |name, t| {
            if bad.is_none() {
                if let Some(g) = t.grad() {
                    if g.iter().any(|v| !v.is_finite()) {
                        bad = Some(name);
                    }
                }
            }
        });
        if let Some(param) = bad {
            return Err(Error::NonFiniteGradient { param });
        }
        self.step += 1;
        let t = self.step;
        let lr = self.config.lr_at(t);
        let AdamConfig { betas, eps, .. } = self.config;
        let state = &mut self.state;
        module.visit_params_mut("", &mut |name, p: &mut Tensor| {
            if !p.requires_grad() {
                return;
            }
            let grad = p.grad().expect("trainable").to_vec();
            let st = state
                .entry(name)
                .or_insert_with(|| AdamState::new(grad.len()));
            adam_step(p.data_mut(), &grad, st, t, lr, betas, eps);
        });
        Ok(())
    }
}
