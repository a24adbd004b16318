//! Warmup-Stable-Decay learning-rate schedule.
//!
//! Positions (`warmup_steps`, `stable_end`, `total` and the progress
//! argument) share one unit; the trainer drives it with optimizer steps.
//! The decay segment is `peak · (A/√t + C)` with `A` and `C` pinned so the
//! rate equals the peak at `stable_end` and `floor_fraction · peak` at
//! `total`.

use serde::{Deserialize, Serialize};

use super::OptimizerConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WsdSchedule {
    pub warmup_steps: u64,
    pub stable_end: u64,
    pub total: u64,
    #[serde(default = "default_floor")]
    pub floor_fraction: f64,
}

fn default_floor() -> f64 {
    0.25
}

impl WsdSchedule {
    pub fn new(warmup_steps: u64, stable_end: u64, total: u64) -> Self {
        WsdSchedule {
            warmup_steps,
            stable_end,
            total,
            floor_fraction: default_floor(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_steps < self.stable_end && self.stable_end < self.total) {
            return Err(Error::config("wsd", "requires warmup_steps < stable_end < total"));
        }
        if !(self.floor_fraction > 0.0 && self.floor_fraction <= 1.0) {
            return Err(Error::config("wsd.floor_fraction", "must lie in (0, 1]"));
        }
        Ok(())
    }

    /// `(A, C)` of the decay segment in units of the peak rate.
    pub fn decay_coefficients(&self) -> (f64, f64) {
        let rs = 1.0 / (self.stable_end as f64).sqrt();
        let rt = 1.0 / (self.total as f64).sqrt();
        let a = (1.0 - self.floor_fraction) / (rs - rt);
        (a, 1.0 - a * rs)
    }
}

pub fn wsd_lr(progress: f64, sched: &WsdSchedule, opt: &OptimizerConfig) -> Result<f64> {
    sched.validate()?;
    if !(progress >= 0.0 && progress <= sched.total as f64) {
        return Err(Error::Domain(format!(
            "schedule progress {progress} outside [0, {}]",
            sched.total
        )));
    }
    let peak = opt.peak_lr;
    let (w, s) = (sched.warmup_steps as f64, sched.stable_end as f64);
    if progress < w {
        return Ok(peak * progress / w);
    }
    if progress <= s {
        return Ok(peak);
    }
    let (a, _) = sched.decay_coefficients();
    // Written relative to stable_end so the boundary value is exactly peak.
    Ok(peak * (1.0 - a * (1.0 / s.sqrt() - 1.0 / progress.sqrt())))
}
