//! AdamW with decoupled weight decay and the warmup/step-decay schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First and second moment estimates, one pair per parameter.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.len()]).collect::<Vec<_>>();
        OptimizerState {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }
}

/// One AdamW update over every trainable parameter. Weight decay is applied
/// to the parameter directly (`p -= lr * wd * p`) before the bias-corrected
/// adaptive step.
pub fn adamw_step(params: &mut ParamStore, state: &mut OptimizerState, cfg: &AdamWConfig, lr: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate {lr} must be > 0")));
    }
    if state.m.len() != params.len() {
        return Err(Error::InvalidArgument(
            "optimizer state does not match the parameter set".into(),
        ));
    }
    for id in params.ids() {
        let t = params.get(id);
        if t.requires_grad && t.grad.is_none() {
            return Err(Error::MissingGradient(params.name(id).to_string()));
        }
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for ((p, m), v) in params.tensors_mut().zip(&mut state.m).zip(&mut state.v) {
        if !p.requires_grad {
            continue;
        }
        let g = p.grad.take().expect("checked above");
        let data = p.data_mut();
        for i in 0..data.len() {
            data[i] -= lr * cfg.weight_decay * data[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        p.grad = Some(g);
    }
    Ok(())
}

/// Linear warmup followed by step decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_start_lr: f64,
    pub warmup_epochs: u32,
    pub decay_factor: f64,
    pub decay_every_epochs: u32,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            base_lr: 1.0e-5,
            warmup_start_lr: 2.0e-6,
            warmup_epochs: 3,
            decay_factor: 0.1,
            decay_every_epochs: 3,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = self.base_lr > 0.0
            && self.warmup_start_lr > 0.0
            && self.warmup_start_lr <= self.base_lr
            && self.decay_factor > 0.0
            && self.decay_factor < 1.0
            && self.decay_every_epochs > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid learning-rate schedule {self:?}")))
        }
    }

    /// Learning rate for a 0-based epoch. Warmup is constant within an epoch.
    pub fn lr_at(&self, epoch: u32) -> f64 {
        if epoch < self.warmup_epochs {
            let frac = epoch as f64 / self.warmup_epochs as f64;
            return self.warmup_start_lr + (self.base_lr - self.warmup_start_lr) * frac;
        }
        let steps = (epoch - self.warmup_epochs) / self.decay_every_epochs;
        snap_decimal(self.base_lr * self.decay_factor.powi(steps as i32))
    }
}

/// Rounds to 15 significant decimal digits so that decimal hyperparameters
/// such as `1e-5 * 0.1` land on the double nearest `1e-6`.
fn snap_decimal(x: f64) -> f64 {
    format!("{x:.14e}").parse().unwrap_or(x)
}
