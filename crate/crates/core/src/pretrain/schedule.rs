use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Teacher momentum at step `k` of `total`, rising from `tau0` to 1 along a
/// half cosine.
pub fn tau_schedule(step: usize, total_steps: usize, tau0: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return 1.0;
    }
    let c = (PI * step as f64 / total_steps as f64).cos();
    1.0 - (1.0 - tau0) * (c + 1.0) / 2.0
}

/// Linear warm-up to `peak`, then cosine decay to zero at `total_epochs`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_epochs: f64,
    pub total_epochs: f64,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak >= 0.0 && self.warmup_epochs >= 0.0 && self.total_epochs > 0.0) {
            return Err(Error::Config("schedule needs peak >= 0, warmup >= 0, total > 0".into()));
        }
        if self.warmup_epochs >= self.total_epochs {
            return Err(Error::Config("warm-up must end before the last epoch".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch_fraction: f64) -> f64 {
        let e = epoch_fraction.clamp(0.0, self.total_epochs);
        if e < self.warmup_epochs {
            return self.peak * e / self.warmup_epochs;
        }
        let span = self.total_epochs - self.warmup_epochs;
        let progress = if span > 0.0 { (e - self.warmup_epochs) / span } else { 1.0 };
        (self.peak * 0.5 * (1.0 + (PI * progress).cos())).max(0.0)
    }

    /// Rate for optimizer step `step` when one epoch takes `steps_per_epoch`.
    pub fn lr_at_step(&self, step: usize, steps_per_epoch: usize) -> f64 {
        self.lr_at(step as f64 / steps_per_epoch.max(1) as f64)
    }
}

pub fn lr_at(schedule: &LrSchedule, epoch_fraction: f64) -> f64 {
    schedule.lr_at(epoch_fraction)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tau_endpoints_and_midpoint() {
        assert_eq!(tau_schedule(0, 100, 0.999), 0.999);
        assert_eq!(tau_schedule(100, 100, 0.999), 1.0);
        assert!((tau_schedule(50, 100, 0.999) - 0.9995).abs() < 1e-12);
        let mut prev = 0.0;
        for k in 0..=100 {
            let t = tau_schedule(k, 100, 0.999);
            assert!(t >= prev && t > 0.0 && t <= 1.0);
            prev = t;
        }
    }

    #[test]
    fn lr_shape() {
        let s = LrSchedule { peak: 3e-3, warmup_epochs: 40.0, total_epochs: 150.0 };
        assert_eq!(s.lr_at(0.0), 0.0);
        assert!((s.lr_at(20.0) - 1.5e-3).abs() < 1e-15);
        assert!((s.lr_at(40.0) - 3e-3).abs() < 1e-15);
        assert!(s.lr_at(150.0).abs() < 1e-15);
        assert!(s.lr_at(100.0) < 3e-3 && s.lr_at(100.0) > 0.0);
    }
}
