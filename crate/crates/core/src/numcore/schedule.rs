use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear warm-up followed by cosine decay to `floor_lr`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub floor_lr: f64,
}

impl LrSchedule {
    pub fn new(base_lr: f64, warmup_steps: u64, total_steps: u64, floor_lr: f64) -> Result<Self> {
        if !(base_lr > 0.0) || floor_lr < 0.0 || total_steps <= warmup_steps {
            return Err(Error::input(format!(
                "invalid schedule: base_lr {base_lr}, floor {floor_lr}, warmup {warmup_steps}, total {total_steps}"
            )));
        }
        Ok(Self {
            base_lr,
            warmup_steps,
            total_steps,
            floor_lr,
        })
    }

    /// Learning rate at `step`; steps past `total_steps` clamp to `floor_lr`.
    ///
    /// The ramp is `base·max(step,1)/warmup`, so step 0 already trains at
    /// `base/warmup` and `step == warmup` lands exactly on `base`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step >= self.total_steps {
            return self.floor_lr;
        }
        if step < self.warmup_steps {
            return self.base_lr * step.max(1) as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        self.floor_lr
            + (self.base_lr - self.floor_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
