use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub warmup_steps: u64,
    pub warmup_start_lr: f64,
    pub max_lr: f64,
    /// Step at which the cosine decay reaches zero.
    pub cosine_cycle_length: u64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            warmup_steps: 20,
            warmup_start_lr: 1e-4,
            max_lr: 3e-3,
            cosine_cycle_length: 400,
        }
    }
}

impl ScheduleSpec {
    pub fn constant(lr: f64, steps: u64) -> Self {
        Self {
            warmup_steps: 0,
            warmup_start_lr: lr,
            max_lr: lr,
            cosine_cycle_length: steps,
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut bad = Vec::new();
        if self.warmup_steps > self.cosine_cycle_length {
            bad.push(format!(
                "train.schedule.warmup_steps: {} exceeds cosine_cycle_length {}",
                self.warmup_steps, self.cosine_cycle_length
            ));
        }
        if !(self.warmup_start_lr > 0.0 && self.warmup_start_lr.is_finite()) {
            bad.push(format!(
                "train.schedule.warmup_start_lr: must be positive, got {}",
                self.warmup_start_lr
            ));
        }
        if !(self.max_lr > 0.0 && self.max_lr.is_finite()) {
            bad.push(format!("train.schedule.max_lr: must be positive, got {}", self.max_lr));
        }
        bad
    }
}

/// Linear warmup from `warmup_start_lr` to `max_lr`, then a half cosine
/// from `max_lr` down to zero at `cosine_cycle_length`.
pub fn lr_schedule(step: u64, spec: &ScheduleSpec) -> f64 {
    if step < spec.warmup_steps {
        let t = step as f64 / spec.warmup_steps as f64;
        return spec.warmup_start_lr + t * (spec.max_lr - spec.warmup_start_lr);
    }
    let span = spec.cosine_cycle_length.saturating_sub(spec.warmup_steps);
    let t = if span == 0 {
        0.0
    } else {
        ((step - spec.warmup_steps) as f64 / span as f64).clamp(0.0, 1.0)
    };
    spec.max_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}
