use serde::{Deserialize, Serialize};

use crate::error::{DogeError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    #[serde(rename = "adamw")]
    AdamW {
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "adam_eps")]
        eps: f64,
        #[serde(default = "weight_decay")]
        weight_decay: f64,
    },
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn adam_eps() -> f64 {
    1e-8
}
fn weight_decay() -> f64 {
    0.01
}

impl Optimizer {
    pub fn adamw() -> Self {
        Optimizer::AdamW {
            beta1: beta1(),
            beta2: beta2(),
            eps: adam_eps(),
            weight_decay: weight_decay(),
        }
    }
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Sgd
    }
}

/// Optimizer choice plus global-norm clipping threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateRule {
    #[serde(default)]
    pub optimizer: Optimizer,
    #[serde(default = "default_clip")]
    pub clip_norm: Option<f64>,
}

fn default_clip() -> Option<f64> {
    Some(1.0)
}

impl Default for UpdateRule {
    fn default() -> Self {
        UpdateRule {
            optimizer: Optimizer::Sgd,
            clip_norm: default_clip(),
        }
    }
}

impl UpdateRule {
    pub fn sgd() -> Self {
        UpdateRule::default()
    }

    pub fn adamw() -> Self {
        UpdateRule {
            optimizer: Optimizer::adamw(),
            clip_norm: default_clip(),
        }
    }

    pub fn unclipped(mut self) -> Self {
        self.clip_norm = None;
        self
    }
}

/// Adam moments, one buffer per parameter group.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

/// Scale factor that brings `norm` down to `max_norm` (1.0 when already
/// within). A non-positive threshold disables clipping.
pub fn clip_factor(norm: f64, max_norm: Option<f64>) -> f64 {
    match max_norm {
        Some(c) if c > 0.0 && norm > c => c / norm,
        _ => 1.0,
    }
}

/// Linear warmup followed by cosine decay from `max` to `min`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    #[serde(default = "lr_max")]
    pub max: f64,
    #[serde(default = "lr_min")]
    pub min: f64,
    #[serde(default = "warmup_frac")]
    pub warmup_frac: f64,
}

fn lr_max() -> f64 {
    5e-4
}
fn lr_min() -> f64 {
    1e-4
}
fn warmup_frac() -> f64 {
    0.05
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            max: lr_max(),
            min: lr_min(),
            warmup_frac: warmup_frac(),
        }
    }
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            max: lr,
            min: lr,
            warmup_frac: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.max > 0.0 && self.min > 0.0 && self.min <= self.max) {
            return Err(DogeError::config(format!(
                "learning rates need 0 < min <= max (got min {} max {})",
                self.min, self.max
            )));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(DogeError::config("warmup_frac must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn warmup_steps(&self, total: usize) -> usize {
        (self.warmup_frac * total as f64).ceil() as usize
    }

    /// Step size for 0-based step `step` of `total`.
    pub fn at(&self, step: usize, total: usize) -> f64 {
        let warm = self.warmup_steps(total);
        if step < warm {
            return self.max * (step + 1) as f64 / warm as f64;
        }
        let span = total.saturating_sub(warm + 1);
        if span == 0 {
            return self.max;
        }
        let progress = ((step - warm) as f64 / span as f64).min(1.0);
        self.min + 0.5 * (self.max - self.min) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
