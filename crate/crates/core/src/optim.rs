//! SGD with momentum and coupled weight decay; cosine annealing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be a finite value >= 0, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Momentum buffers, one per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState<T: Scalar = f32> {
    pub velocity: Vec<Vec<T>>,
}

impl<T: Scalar> SgdState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        Self {
            velocity: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
        }
    }
}

/// `v = momentum * v + g + wd * w; w -= lr * v` for every parameter, using
/// the gradient stored on each tensor.
pub fn sgd_step<T: Scalar>(params: &mut [Tensor<T>], state: &mut SgdState<T>, config: &SgdConfig) -> Result<()> {
    if state.velocity.len() != params.len() {
        return Err(Error::Usage(format!(
            "optimizer state has {} buffers for {} parameters",
            state.velocity.len(),
            params.len()
        )));
    }
    if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
        return Err(Error::Usage(format!("parameter {i} has no gradient")));
    }
    let lr = T::of_f64(config.lr);
    let momentum = T::of_f64(config.momentum);
    let wd = T::of_f64(config.weight_decay);
    for (p, v) in params.iter_mut().zip(&mut state.velocity) {
        let g = p.grad().expect("checked above").to_vec();
        for ((w, v), g) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
            *v = momentum * *v + g + wd * *w;
            *w -= lr * *v;
        }
    }
    Ok(())
}

/// Half-cosine decay from `eta_max` at `t = 0` to `eta_min` at `t = t_max`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub eta_max: f64,
    pub eta_min: f64,
    pub t_max: usize,
}

impl CosineSchedule {
    pub fn new(eta_max: f64, eta_min: f64, t_max: usize) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::Config("t_max must be at least 1".into()));
        }
        if !(eta_min >= 0.0 && eta_max >= eta_min) {
            return Err(Error::Config(format!(
                "need 0 <= eta_min <= eta_max, got {eta_min} and {eta_max}"
            )));
        }
        Ok(Self {
            eta_max,
            eta_min,
            t_max,
        })
    }

    pub fn lr(&self, t: usize) -> Result<f64> {
        cosine_lr(self, t)
    }
}

pub fn cosine_lr(schedule: &CosineSchedule, t: usize) -> Result<f64> {
    if t > schedule.t_max {
        return Err(Error::Usage(format!(
            "epoch {t} is past the schedule end {}",
            schedule.t_max
        )));
    }
    let phase = std::f64::consts::PI * t as f64 / schedule.t_max as f64;
    Ok(schedule.eta_min + 0.5 * (schedule.eta_max - schedule.eta_min) * (1.0 + phase.cos()))
}
