//! Desk-scale driving environments and their evaluation-only rewards.
//!
//! `LineTrack` is a kinematic vehicle following a reference path with an
//! 18-dimensional error/lookahead state. `PixelTrack` is a constant-speed agent
//! on a track band observed through a small rendered image.

mod action;
pub mod linetrack;
mod pixeltrack;
pub mod reward;
pub mod track;

use serde::{Deserialize, Serialize};

pub use action::{Action, ActionSpec, Factor};
pub use linetrack::{LineTrack, LineTrackConfig, STATE_DIM as LINE_STATE_DIM};
pub use pixeltrack::{PixelPoseInfo, PixelTrack, PixelTrackConfig};
pub use reward::{linetrack_eval_reward, pixeltrack_eval_reward, LineRewardConfig};
pub use track::Track;

use crate::diffcore::Array;
use crate::error::{Error, Result};

/// Vehicle pose plus the last applied controls.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
    pub steer: f64,
    pub throttle: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TurnKind {
    Forward,
    Turning,
    HalfCircle,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepInfo {
    pub speed: f64,
    pub e_y: f64,
    pub e_phi_deg: f64,
    /// Always zero: the kinematic model has no slip.
    pub e_beta_deg: f64,
    pub collision: bool,
    pub off_track: bool,
    pub truncated: bool,
    pub turn: Option<TurnKind>,
}

#[derive(Clone, Debug)]
pub struct StepResult {
    pub state: Array,
    pub done: bool,
    pub info: StepInfo,
}

pub trait Environment: Send + Sync {
    fn id(&self) -> &str;
    fn state_shape(&self) -> Vec<usize>;
    fn action_spec(&self) -> &ActionSpec;
    /// Place the agent at `start` (the reference origin when `None`) and return the first state.
    fn reset(&mut self, seed: u64, start: Option<Pose>) -> Result<Array>;
    fn step(&mut self, action: &Action) -> Result<StepResult>;
    fn pose(&self) -> Pose;
    fn state(&self) -> Array;
    fn info(&self) -> StepInfo;
    /// A start pose on the reference path at a seed-dependent arc length.
    fn sample_start(&self, seed: u64) -> Pose;
    fn eval_reward(&self, info: &StepInfo) -> f64;
    fn step_limit(&self) -> usize;
    fn dt(&self) -> f64;
    fn box_clone(&self) -> Box<dyn Environment>;
    fn as_any(&self) -> &dyn std::any::Any;
}

impl Clone for Box<dyn Environment> {
    fn clone(&self) -> Self {
        self.box_clone()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Linetrack,
    Pixeltrack,
}

/// Environment block of a run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub kind: EnvKind,
    pub track: String,
    pub dt: f64,
    pub step_limit: usize,
    pub steer_bins: usize,
    pub throttle_bins: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub reward: LineRewardConfig,
}

impl Default for EnvConfig {
    fn default() -> Self {
        let line = LineTrackConfig::default();
        EnvConfig {
            kind: EnvKind::Linetrack,
            track: line.track.clone(),
            dt: line.dt,
            step_limit: line.step_limit,
            steer_bins: line.steer_bins,
            throttle_bins: line.throttle_bins,
            image_height: 24,
            image_width: 32,
            reward: LineRewardConfig::default(),
        }
    }
}

impl EnvConfig {
    pub fn pixeltrack() -> Self {
        let p = PixelTrackConfig::default();
        EnvConfig {
            kind: EnvKind::Pixeltrack,
            track: p.track.clone(),
            dt: p.dt,
            step_limit: p.step_limit,
            image_height: p.height,
            image_width: p.width,
            ..EnvConfig::default()
        }
    }

    pub fn line_config(&self) -> LineTrackConfig {
        LineTrackConfig {
            track: self.track.clone(),
            dt: self.dt,
            step_limit: self.step_limit,
            steer_bins: self.steer_bins,
            throttle_bins: self.throttle_bins,
            reward: self.reward,
            ..LineTrackConfig::default()
        }
    }

    pub fn pixel_config(&self) -> PixelTrackConfig {
        PixelTrackConfig {
            track: self.track.clone(),
            dt: self.dt,
            step_limit: self.step_limit,
            height: self.image_height,
            width: self.image_width,
            ..PixelTrackConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || self.step_limit == 0 {
            return Err(Error::config("env: dt and step_limit must be positive"));
        }
        if self.steer_bins == 0 || self.throttle_bins == 0 {
            return Err(Error::config("env: bin counts must be positive"));
        }
        if self.image_height < 4 || self.image_width < 4 {
            return Err(Error::config("env: image must be at least 4x4"));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Box<dyn Environment>> {
        self.validate()?;
        Ok(match self.kind {
            EnvKind::Linetrack => Box::new(LineTrack::new(self.line_config())?),
            EnvKind::Pixeltrack => Box::new(PixelTrack::new(self.pixel_config())?),
        })
    }
}
