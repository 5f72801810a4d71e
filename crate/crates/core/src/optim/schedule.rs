use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Warmup-stable-decay schedule: linear warmup from 0, a constant plateau,
/// then a half-cosine down to `end_lr` at `total_steps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub warmup_steps: u64,
    pub stable_lr: f64,
    pub decay_start_step: u64,
    pub end_lr: f64,
    pub total_steps: u64,
}

impl LrSchedule {
    /// 500 warmup steps, 2e-4 plateau, cosine down to 2e-5.
    pub fn reference_recipe(decay_start_step: u64, total_steps: u64) -> Self {
        Self {
            warmup_steps: 500,
            stable_lr: 2e-4,
            decay_start_step,
            end_lr: 2e-5,
            total_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_steps <= self.decay_start_step && self.decay_start_step <= self.total_steps) {
            return Err(Error::Config(format!(
                "schedule needs warmup_steps <= decay_start_step <= total_steps, got {} / {} / {}",
                self.warmup_steps, self.decay_start_step, self.total_steps
            )));
        }
        if !(self.end_lr > 0.0 && self.stable_lr >= self.end_lr) {
            return Err(Error::Config(format!(
                "schedule needs stable_lr >= end_lr > 0, got {} / {}",
                self.stable_lr, self.end_lr
            )));
        }
        Ok(())
    }

    /// Largest step-to-step change the schedule can make.
    pub fn continuity_bound(&self) -> f64 {
        let warm = if self.warmup_steps == 0 {
            0.0
        } else {
            1.0 / self.warmup_steps as f64
        };
        let span = self.total_steps - self.decay_start_step;
        let decay = if span == 0 { 0.0 } else { PI / span as f64 };
        self.stable_lr * (warm + decay)
    }
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self::reference_recipe(1000, 1500)
    }
}

pub fn wsd_lr(step: u64, sched: &LrSchedule) -> Result<f64> {
    if step > sched.total_steps {
        return Err(Error::Contract(format!(
            "step {step} is past the end of a {}-step schedule",
            sched.total_steps
        )));
    }
    if step < sched.warmup_steps {
        return Ok(sched.stable_lr * (step as f64 / sched.warmup_steps as f64));
    }
    if step <= sched.decay_start_step {
        return Ok(sched.stable_lr);
    }
    let progress = (step - sched.decay_start_step) as f64
        / (sched.total_steps - sched.decay_start_step) as f64;
    Ok(sched.end_lr + (sched.stable_lr - sched.end_lr) * 0.5 * (1.0 + (PI * progress).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recipe_boundaries() {
        let s = LrSchedule::reference_recipe(8000, 10_000);
        assert_eq!(wsd_lr(500, &s).unwrap(), 2e-4);
        assert_eq!(wsd_lr(250, &s).unwrap(), 1e-4);
        assert_eq!(wsd_lr(0, &s).unwrap(), 0.0);
        assert_eq!(wsd_lr(8000, &s).unwrap(), 2e-4);
        assert_eq!(wsd_lr(10_000, &s).unwrap(), 2e-5);
        assert!(wsd_lr(10_001, &s).is_err());
    }

    #[test]
    fn cosine_midpoint() {
        let s = LrSchedule::reference_recipe(1000, 2000);
        let mid = wsd_lr(1500, &s).unwrap();
        assert!((mid - (2e-5 + 0.5 * 1.8e-4)).abs() < 1e-18);
    }

    #[test]
    fn validation() {
        let mut s = LrSchedule::reference_recipe(100, 200);
        assert!(s.validate().is_err());
        s.warmup_steps = 50;
        assert!(s.validate().is_ok());
        s.end_lr = 1.0;
        assert!(s.validate().is_err());
    }
}
