use serde::{Deserialize, Serialize};

use crate::diffcore::{Algorithm, LrSchedule};
use crate::error::{Error, Result};
use crate::rfsgpn::{FreezeMode, TspnInput};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Phase1Schedule {
    /// Half-cosine over the whole run.
    Cosine,
    StepDecay { every: u64, coeff: f64 },
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Phase1Config {
    pub epochs: usize,
    pub iters_per_epoch: usize,
    pub batch: usize,
    pub lr: f64,
    pub schedule: Phase1Schedule,
    /// Transitions per training window.
    pub horizon: usize,
    pub eps0: f64,
    pub eps_final: f64,
    pub eps_decay_epochs: f64,
    pub clip: f64,
    pub algorithm: Algorithm,
    /// Adafactor update smoothing; 0 disables it.
    pub momentum: f64,
}

impl Default for Phase1Config {
    fn default() -> Self {
        Self::desk()
    }
}

impl Phase1Config {
    /// Workstation-sized default: 20 epochs of 1000 iterations over two-step windows.
    pub fn desk() -> Self {
        Phase1Config {
            epochs: 20,
            iters_per_epoch: 1000,
            batch: 64,
            lr: 1e-3,
            schedule: Phase1Schedule::Cosine,
            horizon: 2,
            eps0: 0.9,
            eps_final: 0.5,
            eps_decay_epochs: 2.0,
            clip: 1.0,
            algorithm: Algorithm::Adafactor,
            momentum: 0.9,
        }
    }

    /// Full-length profile: 100 epochs of 1000 iterations.
    pub fn paper() -> Self {
        Phase1Config {
            epochs: 100,
            iters_per_epoch: 1000,
            ..Self::desk()
        }
    }

    /// Image-track profile: 10 epochs, batch 16, halving the rate every 5000 steps.
    pub fn image() -> Self {
        Phase1Config {
            epochs: 10,
            iters_per_epoch: 1000,
            batch: 16,
            schedule: Phase1Schedule::StepDecay { every: 5000, coeff: 0.5 },
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            "image" => Ok(Self::image()),
            other => Err(Error::config(format!("unknown phase-1 preset `{other}`"))),
        }
    }

    pub fn lr_schedule(&self, total_steps: u64) -> LrSchedule {
        match self.schedule {
            Phase1Schedule::Cosine => LrSchedule::Cosine { total_steps },
            Phase1Schedule::StepDecay { every, coeff } => LrSchedule::StepDecay { every, coeff },
            Phase1Schedule::Constant => LrSchedule::Constant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = self.epochs > 0 && self.iters_per_epoch > 0 && self.batch > 0 && self.horizon > 0;
        if !pos {
            return Err(Error::config("phase-1 epochs, iterations, batch and horizon must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.clip > 0.0) {
            return Err(Error::config("phase-1 learning rate and clip must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("phase-1 momentum must lie in [0, 1)"));
        }
        let eps_ok = (0.0..=1.0).contains(&self.eps0) && (0.0..=1.0).contains(&self.eps_final);
        if !eps_ok || self.eps0 < self.eps_final || !(self.eps_decay_epochs >= 0.0) {
            return Err(Error::config(format!(
                "scheduled sampling needs 1 >= eps0 ({}) >= eps_final ({}) >= 0",
                self.eps0, self.eps_final
            )));
        }
        if let Phase1Schedule::StepDecay { every, coeff } = self.schedule {
            if every == 0 || !(coeff > 0.0) {
                return Err(Error::config("step decay needs every > 0 and coeff > 0"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Phase2Config {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub patience: usize,
    pub clip: f64,
    pub freeze_mode: FreezeMode,
    pub episodes_per_epoch: usize,
    pub validation_fraction: f64,
    pub tspn_input: TspnInput,
    pub tau_g: f64,
    /// Sampling temperature of the training rollouts. Below 1 the visited
    /// states stay closer to those of the greedy evaluation policy.
    pub rollout_temperature: f64,
    pub min_trajectory_len: usize,
    pub algorithm: Algorithm,
    /// Adafactor update smoothing; 0 disables it.
    pub momentum: f64,
}

impl Default for Phase2Config {
    fn default() -> Self {
        Phase2Config {
            epochs: 30,
            batch: 32,
            lr: 5e-4,
            patience: 5,
            clip: 1.0,
            freeze_mode: FreezeMode::Full,
            episodes_per_epoch: 8,
            validation_fraction: 0.1,
            tspn_input: TspnInput::RelaxedSample,
            tau_g: 1.0,
            rollout_temperature: 0.5,
            min_trajectory_len: 2,
            algorithm: Algorithm::Adafactor,
            momentum: 0.9,
        }
    }
}

impl Phase2Config {
    pub fn paper() -> Self {
        Phase2Config {
            epochs: 50,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = self.epochs > 0 && self.batch > 0 && self.patience > 0 && self.episodes_per_epoch > 0;
        if !pos {
            return Err(Error::config("phase-2 epochs, batch, patience and episodes must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.clip > 0.0) {
            return Err(Error::config("phase-2 learning rate and clip must be positive"));
        }
        if !(self.tau_g > 0.0) || !(self.rollout_temperature > 0.0) {
            return Err(Error::config("phase-2 temperatures must be positive"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::config("validation fraction must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("phase-2 momentum must lie in [0, 1)"));
        }
        if self.min_trajectory_len < 2 {
            return Err(Error::config("trajectories need at least two states"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollectionConfig {
    pub temperature: f64,
    pub n_steps: usize,
    /// Size of the separately collected held-out set used to report prediction error.
    pub heldout_steps: usize,
}

impl Default for CollectionConfig {
    fn default() -> Self {
        CollectionConfig {
            temperature: 1.0,
            n_steps: 50_000,
            heldout_steps: 5_000,
        }
    }
}

impl CollectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || self.n_steps == 0 {
            return Err(Error::config("collection needs a positive temperature and step count"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub phase1: Phase1Config,
    pub phase2: Phase2Config,
    pub collection: CollectionConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.phase1.validate()?;
        self.phase2.validate()?;
        self.collection.validate()
    }
}
