//! Adam and the learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Param;
use crate::numerics::{Matrix, Real};

/// Minimum validation-score gain that counts as an improvement.
pub const IMPROVEMENT_THRESHOLD: f64 = 1e-5;

pub const DEFAULT_GRAD_CLIP: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: None,
        }
    }
}

/// Bias-corrected Adam. Moments are created on the first step and are tied
/// to the order of the parameter list passed to [`AdamState::step`].
#[derive(Clone, Debug)]
pub struct AdamState<T = f32> {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update with learning rate `lr`. A non-finite gradient
    /// aborts before any parameter changes.
    pub fn step(&mut self, params: &mut [(String, &mut Param<T>)], lr: f64) -> Result<()> {
        for (name, p) in params.iter() {
            if !p.grad.is_finite() {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, p)| Matrix::zeros(p.value.rows(), p.value.cols())).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} tensors, got {}",
                self.m.len(),
                params.len()
            )));
        }
        for ((name, p), m) in params.iter().zip(&self.m) {
            if p.value.shape() != m.shape() {
                return Err(Error::InvalidArgument(format!(
                    "tensor `{name}` is {:?}, optimizer state is {:?}",
                    p.value.shape(),
                    m.shape()
                )));
            }
        }

        let mut grad_scale = 1.0;
        if let Some(clip) = self.config.clip {
            let norm = params.iter().map(|(_, p)| p.grad.sum_sq().as_f64()).sum::<f64>().sqrt();
            if norm > clip {
                grad_scale = clip / norm;
            }
        }

        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let step_size = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(c.eps);
        let gs = T::of(grad_scale);
        for (((_, p), m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for (i, (w, &g)) in value.iter_mut().zip(grad).enumerate() {
                let g = g * gs;
                let mi = &mut m.data_mut()[i];
                *mi = b1 * *mi + one_b1 * g;
                let mi = *mi;
                let vi = &mut v.data_mut()[i];
                *vi = b2 * *vi + one_b2 * g * g;
                let vi = *vi;
                *w = *w - step_size * mi / ((vi * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    /// Linear warmup from 0 to `peak_lr`, then `peak_lr * sqrt(warmup / step)`.
    WarmupPeak { peak_lr: f64, warmup_steps: u64 },
    /// `initial_lr * decay_factor^k` where `k` counts epochs whose validation
    /// score failed to beat the best so far by more than `threshold`.
    PlateauDecay {
        initial_lr: f64,
        decay_factor: f64,
        threshold: f64,
    },
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::plateau(1e-3)
    }
}

impl LrSchedule {
    pub fn plateau(initial_lr: f64) -> Self {
        LrSchedule::PlateauDecay {
            initial_lr,
            decay_factor: 0.85,
            threshold: IMPROVEMENT_THRESHOLD,
        }
    }

    pub fn warmup(peak_lr: f64, warmup_steps: u64) -> Self {
        LrSchedule::WarmupPeak { peak_lr, warmup_steps }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            LrSchedule::WarmupPeak { peak_lr, warmup_steps } => peak_lr > 0.0 && peak_lr.is_finite() && warmup_steps >= 1,
            LrSchedule::PlateauDecay {
                initial_lr,
                decay_factor,
                threshold,
            } => initial_lr > 0.0 && initial_lr.is_finite() && decay_factor > 0.0 && decay_factor < 1.0 && threshold >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid learning-rate schedule {self:?}")))
        }
    }
}

/// Number of epochs in `history` that did not improve on the running best by
/// more than `threshold`. The first epoch always counts as an improvement.
pub fn non_improving_epochs(history: &[f64], threshold: f64) -> usize {
    let mut best = f64::NEG_INFINITY;
    let mut count = 0;
    for &s in history {
        if s > best + threshold {
            best = s;
        } else {
            count += 1;
        }
    }
    count
}

/// Learning rate for optimizer step `step` (1-based; step 0 yields 0 under
/// warmup) given the per-epoch validation scores so far.
pub fn lr_at(schedule: &LrSchedule, step: u64, history: &[f64]) -> f64 {
    match *schedule {
        LrSchedule::WarmupPeak { peak_lr, warmup_steps } => {
            let w = warmup_steps.max(1) as f64;
            let s = step as f64;
            if s <= w {
                peak_lr * s / w
            } else {
                peak_lr * (w / s).sqrt()
            }
        }
        LrSchedule::PlateauDecay {
            initial_lr,
            decay_factor,
            threshold,
        } => initial_lr * decay_factor.powi(non_improving_epochs(history, threshold) as i32),
    }
}
