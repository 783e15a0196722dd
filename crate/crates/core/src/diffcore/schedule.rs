use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Learning-rate schedules.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from the base rate at step 0 down to 0 at `total_steps`.
    Cosine { total_steps: u64 },
    /// Multiply by `coeff` after every `every` steps.
    StepDecay { every: u64, coeff: f64 },
}

impl LrSchedule {
    pub fn rate(&self, base_lr: f64, step: u64) -> Result<f64> {
        if !(base_lr > 0.0) || !base_lr.is_finite() {
            return Err(Error::config(format!("base learning rate must be positive, got {base_lr}")));
        }
        match *self {
            LrSchedule::Constant => Ok(base_lr),
            LrSchedule::Cosine { total_steps } => {
                if total_steps == 0 {
                    return Err(Error::config("cosine schedule needs total_steps > 0"));
                }
                if step > total_steps {
                    return Err(Error::config(format!(
                        "cosine schedule step {step} past total {total_steps}"
                    )));
                }
                let frac = step as f64 / total_steps as f64;
                Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
            }
            LrSchedule::StepDecay { every, coeff } => {
                if every == 0 || !(coeff > 0.0) {
                    return Err(Error::config("step decay needs every > 0 and coeff > 0"));
                }
                Ok(base_lr * coeff.powi((step / every) as i32))
            }
        }
    }
}
