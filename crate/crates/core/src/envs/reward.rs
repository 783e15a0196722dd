//! Evaluation-only reward functions. Nothing on a training path calls these.

use serde::{Deserialize, Serialize};

use super::{StepInfo, TurnKind};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LineRewardConfig {
    pub k1: f64,
    pub k2: f64,
    pub w_ey: f64,
    pub w_ephi: f64,
    pub w_ebeta: f64,
}

impl Default for LineRewardConfig {
    fn default() -> Self {
        LineRewardConfig {
            k1: 0.5,
            k2: 0.1,
            w_ey: 40.0,
            w_ephi: 40.0,
            w_ebeta: 20.0,
        }
    }
}

/// Piecewise angle term; `deg` in degrees.
pub fn angle_term(deg: f64, k1: f64, k2: f64) -> f64 {
    if deg.abs() < 90.0 {
        (-k1 * deg.abs()).exp()
    } else if deg >= 90.0 {
        -(-k2 * (180.0 - deg)).exp()
    } else {
        -(-k2 * (180.0 + deg)).exp()
    }
}

/// Cross-track term; the error enters as a distance.
pub fn lateral_term(e_y: f64, k1: f64) -> f64 {
    (-k1 * e_y.abs()).exp()
}

/// Speed times the weighted sum of the lateral, heading and slip terms.
pub fn linetrack_eval_reward(info: &StepInfo, cfg: &LineRewardConfig) -> f64 {
    let r_ey = lateral_term(info.e_y, cfg.k1);
    let r_ephi = angle_term(info.e_phi_deg, cfg.k1, cfg.k2);
    let r_ebeta = angle_term(info.e_beta_deg, cfg.k1, cfg.k2);
    info.speed * (cfg.w_ey * r_ey + cfg.w_ephi * r_ephi + cfg.w_ebeta * r_ebeta)
}

pub const PIXEL_HALF_CIRCLE_PENALTY: f64 = -45.0;
pub const PIXEL_CRASH_PENALTY: f64 = -150.0;

pub fn pixeltrack_eval_reward(info: &StepInfo) -> f64 {
    if info.collision || info.off_track {
        return PIXEL_CRASH_PENALTY;
    }
    match info.turn {
        Some(TurnKind::HalfCircle) => PIXEL_HALF_CIRCLE_PENALTY,
        Some(TurnKind::Turning) => info.speed / 2.0,
        Some(TurnKind::Forward) | None => info.speed,
    }
}
