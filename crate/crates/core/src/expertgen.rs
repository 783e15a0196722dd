//! Classical expert controllers and state-only demonstration recording.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::diffcore::Array;
use crate::envs::linetrack::{LOOKAHEAD_POINTS, LOOKAHEAD_SPACING};
use crate::envs::{
    Action, ActionSpec, Environment, LineTrack, LineTrackConfig, PixelTrack, Pose,
    LINE_STATE_DIM,
};
use crate::error::{Error, Result};

/// A recorded demonstration. It holds states only; the actions that produced
/// them are never stored.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertTrajectory {
    pub episode: usize,
    pub env_id: String,
    pub dt: f64,
    /// Pose that reproduces `states[0]` when passed to `Environment::reset`.
    pub start: Pose,
    pub states: Vec<Array>,
}

impl ExpertTrajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state_shape(&self) -> &[usize] {
        self.states.first().map(|s| s.shape()).unwrap_or(&[])
    }
}

/// Pure-pursuit steering with proportional speed control, driven from a LineTrack state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PurePursuit {
    pub lookahead: f64,
    pub speed_target: f64,
    pub speed_gain: f64,
    pub wheelbase: f64,
    pub v_ref: f64,
    pub a_max: f64,
    pub drag: f64,
}

impl Default for PurePursuit {
    fn default() -> Self {
        PurePursuit::for_env(&LineTrackConfig::default())
    }
}

impl PurePursuit {
    pub fn for_env(cfg: &LineTrackConfig) -> Self {
        PurePursuit {
            lookahead: 0.6,
            speed_target: cfg.v_ref,
            speed_gain: 2.0,
            wheelbase: cfg.wheelbase,
            v_ref: cfg.v_ref,
            a_max: cfg.a_max,
            drag: cfg.drag,
        }
    }

    /// Steering and throttle for a LineTrack state.
    pub fn control(&self, state: &[f64]) -> (f64, f64) {
        pure_pursuit_control(state, self.lookahead, self.speed_target, self)
    }
}

/// Target point at arc distance `lookahead` along the state's lookahead polyline
/// (vehicle frame), interpolated between the sampled points. The distance is
/// clamped to the sampled range.
pub fn lookahead_point(state: &[f64], lookahead: f64) -> (f64, f64) {
    let n = LOOKAHEAD_POINTS;
    let pt = |k: usize| (state[8 + 2 * k], state[9 + 2 * k]);
    let u = (lookahead / LOOKAHEAD_SPACING).clamp(1.0, n as f64);
    let i = (u.floor() as usize).clamp(1, n - 1);
    let t = u - i as f64;
    let (a, b) = (pt(i - 1), pt(i));
    (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1))
}

/// `delta = atan(2 L sin(alpha) / d)` toward the lookahead point; throttle holds
/// the target speed with a proportional correction around the cruise value.
pub fn pure_pursuit_control(
    state: &[f64],
    lookahead: f64,
    speed_target: f64,
    p: &PurePursuit,
) -> (f64, f64) {
    let (px, py) = lookahead_point(state, lookahead);
    let d = (px * px + py * py).sqrt();
    let steer = if d < 1e-9 {
        0.0
    } else {
        let alpha = py.atan2(px);
        (2.0 * p.wheelbase * alpha.sin() / d).atan()
    };
    let v = state[6] + p.v_ref;
    let cruise = p.drag * speed_target / p.a_max;
    let throttle = cruise + p.speed_gain * (speed_target - v);
    (steer.clamp(-0.8, 0.8), throttle.clamp(0.6, 1.0))
}

/// Discrete steering toward the PixelTrack centerline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Centerline {
    pub ahead: f64,
    pub deadband: f64,
}

impl Default for Centerline {
    fn default() -> Self {
        Centerline {
            ahead: 3.0,
            deadband: 0.05,
        }
    }
}

impl Centerline {
    /// Bearing (radians, positive left) to the centerline point ahead -> left / straight / right.
    pub fn decide(&self, bearing: f64) -> usize {
        if bearing > self.deadband {
            0
        } else if bearing < -self.deadband {
            2
        } else {
            1
        }
    }
}

pub fn centerline_control(env: &PixelTrack, c: &Centerline) -> Action {
    Action::Discrete(vec![c.decide(env.bearing_ahead(c.ahead))])
}

#[derive(Clone, Debug, PartialEq)]
pub enum Expert {
    PurePursuit(PurePursuit),
    Centerline(Centerline),
}

impl Expert {
    /// Default expert for an environment id.
    pub fn for_env(env: &dyn Environment) -> Self {
        match env.id() {
            "pixeltrack" => Expert::Centerline(Centerline::default()),
            _ => {
                let cfg = env
                    .as_any()
                    .downcast_ref::<LineTrack>()
                    .map(|e| e.config().clone())
                    .unwrap_or_default();
                Expert::PurePursuit(PurePursuit::for_env(&cfg))
            }
        }
    }

    pub fn act(&self, env: &dyn Environment, state: &Array) -> Result<Action> {
        match self {
            Expert::PurePursuit(p) => {
                if state.len() != LINE_STATE_DIM {
                    return Err(Error::config("pure pursuit needs a linetrack state"));
                }
                let (d, t) = p.control(state.data());
                Ok(Action::Continuous(vec![d, t]))
            }
            Expert::Centerline(c) => {
                let px = env
                    .as_any()
                    .downcast_ref::<PixelTrack>()
                    .ok_or_else(|| Error::config("centerline control needs pixeltrack"))?;
                Ok(centerline_control(px, c))
            }
        }
    }
}

/// Outcome of one controller episode.
#[derive(Clone, Debug)]
pub struct ExpertEpisode {
    pub trajectory: ExpertTrajectory,
    pub rewards: Vec<f64>,
    pub abs_e_y: Vec<f64>,
    pub crashed: bool,
}

/// Drive one episode with `expert` from `start`, for at most `max_steps` steps.
pub fn run_expert_episode(
    env: &mut dyn Environment,
    expert: &Expert,
    start: Pose,
    seed: u64,
    max_steps: usize,
    episode: usize,
) -> Result<ExpertEpisode> {
    let mut state = env.reset(seed, Some(start))?;
    let start = env.pose();
    let mut states = vec![state.clone()];
    let mut rewards = Vec::new();
    let mut abs_e_y = Vec::new();
    let mut crashed = false;
    for _ in 0..max_steps {
        let action = expert.act(&*env, &state)?;
        let r = env.step(&action)?;
        rewards.push(env.eval_reward(&r.info));
        abs_e_y.push(r.info.e_y.abs());
        state = r.state;
        states.push(state.clone());
        if r.info.collision || r.info.off_track {
            crashed = true;
            break;
        }
        if r.done {
            break;
        }
    }
    Ok(ExpertEpisode {
        trajectory: ExpertTrajectory {
            episode,
            env_id: env.id().to_string(),
            dt: env.dt(),
            start,
            states,
        },
        rewards,
        abs_e_y,
        crashed,
    })
}

/// Per-episode seed derived from a master seed.
pub fn episode_seed(seed: u64, episode: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(episode.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        ^ 0x94D0_49BB_1331_11EB
}

/// Record `n_episodes` state-only demonstrations. Episodes ending in a crash are
/// discarded with a warning and replaced, up to `4 * n_episodes` extra attempts.
pub fn record_expert(
    env: &mut dyn Environment,
    expert: &Expert,
    n_episodes: usize,
    seed: u64,
    max_steps: usize,
) -> Result<Vec<ExpertTrajectory>> {
    if n_episodes == 0 || max_steps == 0 {
        return Err(Error::config("record_expert needs positive episode count and length"));
    }
    let mut out = Vec::with_capacity(n_episodes);
    let mut attempt = 0u64;
    let budget = 5 * n_episodes as u64;
    while out.len() < n_episodes {
        if attempt >= budget {
            return Err(Error::Data(format!(
                "expert crashed too often: {} of {attempt} episodes kept",
                out.len()
            )));
        }
        let s = episode_seed(seed, attempt);
        let start = env.sample_start(s);
        let ep = run_expert_episode(env, expert, start, s, max_steps, out.len())?;
        attempt += 1;
        if ep.crashed {
            warn!("expert episode with seed {s} crashed; discarded");
            continue;
        }
        out.push(ep.trajectory);
    }
    Ok(out)
}

/// Largest one-step replay error over a trajectory. Each transition is replayed
/// from the recorded start pose with the action recovered by search over the
/// action space: for factored specs the applied controls are read from the
/// leading entries of the next state and checked; for plain discrete specs every
/// action is tried and the best match kept.
pub fn feasibility_error(template: &dyn Environment, traj: &ExpertTrajectory) -> Result<f64> {
    let mut env = template.box_clone();
    let first = env.reset(0, Some(traj.start))?;
    let mut worst = first.max_abs_diff(&traj.states[0]);
    for next in &traj.states[1..] {
        let candidates: Vec<Action> = match env.action_spec() {
            ActionSpec::Factored { factors } => {
                vec![Action::Continuous(next.data()[..factors.len()].to_vec())]
            }
            ActionSpec::Discrete { labels } => {
                (0..labels.len()).map(|i| Action::Discrete(vec![i])).collect()
            }
        };
        let mut best: Option<(f64, Box<dyn Environment>)> = None;
        for a in candidates {
            let mut trial = env.box_clone();
            let r = trial.step(&a)?;
            let err = r.state.max_abs_diff(next);
            if best.as_ref().map_or(true, |(e, _)| err < *e) {
                best = Some((err, trial));
            }
        }
        let (err, trial) = best.expect("action space is non-empty");
        worst = worst.max(err);
        env = trial;
    }
    Ok(worst)
}
