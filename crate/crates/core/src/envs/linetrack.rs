use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::action::{Action, ActionSpec};
use super::reward::{linetrack_eval_reward, LineRewardConfig};
use super::track::{wrap_angle, Track};
use super::{Environment, Pose, StepInfo, StepResult};
use crate::diffcore::Array;
use crate::error::{Error, Result};

pub const STATE_DIM: usize = 18;
pub const LOOKAHEAD_POINTS: usize = 5;
pub const LOOKAHEAD_SPACING: f64 = 0.3;

#[derive(Clone, Debug, PartialEq)]
pub struct LineTrackConfig {
    pub track: String,
    pub dt: f64,
    pub step_limit: usize,
    pub steer_bins: usize,
    pub throttle_bins: usize,
    pub wheelbase: f64,
    pub a_max: f64,
    pub drag: f64,
    pub v_ref: f64,
    pub off_track: f64,
    pub reward: LineRewardConfig,
}

impl Default for LineTrackConfig {
    fn default() -> Self {
        LineTrackConfig {
            track: "loop60".into(),
            dt: 0.05,
            step_limit: 1000,
            steer_bins: 7,
            throttle_bins: 3,
            wheelbase: 0.26,
            a_max: 0.2,
            drag: 0.5,
            v_ref: 0.32,
            off_track: 1.5,
            reward: LineRewardConfig::default(),
        }
    }
}

/// Kinematic bicycle following a fixed reference path.
#[derive(Clone, Debug)]
pub struct LineTrack {
    cfg: LineTrackConfig,
    track: Track,
    spec: ActionSpec,
    pose: Pose,
    steps: usize,
    done: bool,
    info: StepInfo,
}

/// One explicit Euler step of the bicycle ODE, with `steer` and `throttle` held.
pub fn bicycle_euler(p: &Pose, steer: f64, throttle: f64, cfg: &LineTrackConfig) -> Pose {
    let dt = cfg.dt;
    Pose {
        x: p.x + p.speed * p.heading.cos() * dt,
        y: p.y + p.speed * p.heading.sin() * dt,
        heading: p.heading + p.speed / cfg.wheelbase * steer.tan() * dt,
        speed: p.speed + (cfg.a_max * throttle - cfg.drag * p.speed) * dt,
        steer,
        throttle,
    }
}

impl LineTrack {
    pub fn new(cfg: LineTrackConfig) -> Result<Self> {
        if !(cfg.dt > 0.0 && cfg.wheelbase > 0.0 && cfg.a_max > 0.0 && cfg.drag > 0.0) {
            return Err(Error::config("linetrack: physical constants must be positive"));
        }
        if cfg.step_limit == 0 {
            return Err(Error::config("linetrack: step_limit must be positive"));
        }
        let track = Track::by_id(&cfg.track)?;
        let spec = ActionSpec::steer_throttle(cfg.steer_bins, cfg.throttle_bins)?;
        let mut env = LineTrack {
            cfg,
            track,
            spec,
            pose: Pose::default(),
            steps: 0,
            done: false,
            info: StepInfo::default(),
        };
        env.pose = env.origin_pose(0.0);
        env.info = env.measure(false);
        Ok(env)
    }

    pub fn config(&self) -> &LineTrackConfig {
        &self.cfg
    }

    pub fn track(&self) -> &Track {
        &self.track
    }

    /// Throttle that holds `v_ref` at steady state.
    pub fn cruise_throttle(&self) -> f64 {
        (self.cfg.drag * self.cfg.v_ref / self.cfg.a_max).clamp(0.6, 1.0)
    }

    fn origin_pose(&self, s: f64) -> Pose {
        let p = self.track.point_at(s);
        Pose {
            x: p.x,
            y: p.y,
            heading: p.heading,
            speed: self.cfg.v_ref,
            steer: 0.0,
            throttle: self.cruise_throttle(),
        }
    }

    fn measure(&self, truncated: bool) -> StepInfo {
        let pr = self.track.project(self.pose.x, self.pose.y);
        let e_phi = wrap_angle(self.pose.heading - pr.point.heading);
        let off = pr.lateral.abs() > self.cfg.off_track;
        StepInfo {
            speed: self.pose.speed,
            e_y: pr.lateral,
            e_phi_deg: e_phi.to_degrees(),
            e_beta_deg: 0.0,
            collision: false,
            off_track: off,
            truncated,
            turn: None,
        }
    }

    /// State vector for the current pose; see `STATE_DIM` for the layout.
    pub fn observe(&self) -> Array {
        let p = &self.pose;
        let cfg = &self.cfg;
        let pr = self.track.project(p.x, p.y);
        let e_phi = wrap_angle(p.heading - pr.point.heading);
        let kappa = pr.point.curvature;
        let v = p.speed;
        let e_y = pr.lateral;
        let e_y_dot = v * e_phi.sin();
        let path_rate = kappa * v * e_phi.cos() / (1.0 - kappa * e_y);
        let e_phi_dot = v / cfg.wheelbase * p.steer.tan() - path_rate;
        let mut s = Vec::with_capacity(STATE_DIM);
        s.extend_from_slice(&[
            p.steer,
            p.throttle,
            e_y,
            e_y_dot,
            e_phi.to_degrees(),
            e_phi_dot.to_degrees(),
            v - cfg.v_ref,
            cfg.a_max * p.throttle - cfg.drag * v,
        ]);
        let (sin_h, cos_h) = p.heading.sin_cos();
        for k in 1..=LOOKAHEAD_POINTS {
            let q = self.track.point_at(pr.s + k as f64 * LOOKAHEAD_SPACING);
            let (dx, dy) = (q.x - p.x, q.y - p.y);
            s.push(cos_h * dx + sin_h * dy);
            s.push(-sin_h * dx + cos_h * dy);
        }
        Array::from_vec(s)
    }
}

impl Environment for LineTrack {
    fn id(&self) -> &str {
        "linetrack"
    }

    fn state_shape(&self) -> Vec<usize> {
        vec![STATE_DIM]
    }

    fn action_spec(&self) -> &ActionSpec {
        &self.spec
    }

    fn reset(&mut self, _seed: u64, start: Option<Pose>) -> Result<Array> {
        let pose = match start {
            None => self.origin_pose(0.0),
            Some(p) => {
                let finite = [p.x, p.y, p.heading, p.speed, p.steer, p.throttle]
                    .iter()
                    .all(|v| v.is_finite());
                if !finite {
                    return Err(Error::config("start pose is not finite"));
                }
                let pr = self.track.project(p.x, p.y);
                if pr.lateral.abs() > self.cfg.off_track {
                    return Err(Error::config(format!(
                        "start pose is {:.3} m from the reference path (limit {})",
                        pr.lateral.abs(),
                        self.cfg.off_track
                    )));
                }
                p
            }
        };
        self.pose = pose;
        self.steps = 0;
        self.done = false;
        self.info = self.measure(false);
        Ok(self.observe())
    }

    fn step(&mut self, action: &Action) -> Result<StepResult> {
        if self.done {
            return Err(Error::Usage("step called after the episode ended".into()));
        }
        let u = self.spec.controls(action)?;
        self.pose = bicycle_euler(&self.pose, u[0], u[1], &self.cfg);
        self.steps += 1;
        let truncated = self.steps >= self.cfg.step_limit;
        let mut info = self.measure(truncated);
        if !self.pose.x.is_finite() || !self.pose.y.is_finite() {
            info.off_track = true;
        }
        self.done = info.off_track || info.collision || truncated;
        self.info = info;
        Ok(StepResult {
            state: self.observe(),
            done: self.done,
            info,
        })
    }

    fn pose(&self) -> Pose {
        self.pose
    }

    fn state(&self) -> Array {
        self.observe()
    }

    fn info(&self) -> StepInfo {
        self.info
    }

    fn sample_start(&self, seed: u64) -> Pose {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = rng.gen_range(0.0..self.track.length());
        self.origin_pose(s)
    }

    fn eval_reward(&self, info: &StepInfo) -> f64 {
        linetrack_eval_reward(info, &self.cfg.reward)
    }

    fn step_limit(&self) -> usize {
        self.cfg.step_limit
    }

    fn dt(&self) -> f64 {
        self.cfg.dt
    }

    fn box_clone(&self) -> Box<dyn Environment> {
        Box::new(self.clone())
    }

    fn as_any(&self) -> &dyn std::any::Any {
        self
    }
}
