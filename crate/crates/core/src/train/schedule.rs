//! Linear warmup followed by cosine decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { lr_max: 0.01, lr_min: 1e-4, warmup_epochs: 2, total_epochs: 30 }
    }
}

impl ScheduleConfig {
    /// A zero-epoch schedule is allowed and only produces the initial state.
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min > 0.0 && self.lr_max >= self.lr_min && self.lr_max.is_finite()) {
            return Err(Error::Config(format!("schedule needs lr_max >= lr_min > 0, got {} / {}", self.lr_max, self.lr_min)));
        }
        if self.total_epochs > 0 && self.warmup_epochs >= self.total_epochs {
            return Err(Error::Config(format!(
                "schedule needs warmup_epochs < total_epochs, got {} / {}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        Ok(())
    }
}

/// Learning rate at a (fractional) epoch, clamped to `[0, total_epochs]`.
pub fn lr_at(epoch: f64, cfg: &ScheduleConfig) -> f64 {
    let total = cfg.total_epochs as f64;
    let warmup = cfg.warmup_epochs as f64;
    let e = epoch.clamp(0.0, total);
    if e < warmup {
        return cfg.lr_max * e / warmup;
    }
    let span = total - warmup;
    if span <= 0.0 {
        return cfg.lr_min;
    }
    let t = (e - warmup) / span;
    cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}
