//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-4,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape().to_vec())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One AdamW update using the gradients accumulated in `store`.
///
/// Non-finite gradients abort the step before anything is modified.
pub fn adamw_step(store: &mut ParamStore, state: &mut OptimizerState, lr: f64) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::contract(format!(
            "optimizer tracks {} parameters, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    for (_, p) in store.iter() {
        if let Some(i) = p.grad.data().iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of {} at flat index {i} is {}; step {} aborted",
                p.name,
                p.grad.data()[i],
                state.step + 1
            )));
        }
    }
    let AdamWConfig {
        beta1,
        beta2,
        weight_decay,
        eps,
    } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let decay = 1.0 - lr * weight_decay;
    for ((p, m), v) in store.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let grad = p.grad.data();
        for (((theta, g), mi), vi) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(grad)
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = beta1 * *mi + (1.0 - beta1) * g;
            *vi = beta2 * *vi + (1.0 - beta2) * g * g;
            *theta *= decay;
            *theta -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub lr0: f64,
    pub lr_min: f64,
    pub total_steps: u64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            lr0: 3e-4,
            lr_min: 1e-6,
            total_steps: 2000,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 >= self.lr_min && self.lr_min >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::contract(format!(
                "schedule requires lr0 >= lr_min >= 0, got lr0={} lr_min={}",
                self.lr0, self.lr_min
            )));
        }
        Ok(())
    }
}

/// Cosine decay from `lr0` at step 0 to `lr_min` at `total_steps`; later
/// steps stay at `lr_min`.
pub fn cosine_lr(step: u64, schedule: &LrSchedule) -> f64 {
    if schedule.total_steps == 0 || step >= schedule.total_steps {
        return schedule.lr_min;
    }
    let phase = std::f64::consts::PI * step as f64 / schedule.total_steps as f64;
    let w = 0.5 * (1.0 + phase.cos());
    schedule.lr0 * w + schedule.lr_min * (1.0 - w)
}
