use std::collections::VecDeque;
use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::action::{Action, ActionSpec};
use super::reward::pixeltrack_eval_reward;
use super::track::{wrap_angle, Segment, Track};
use super::{Environment, Pose, StepInfo, StepResult, TurnKind};
use crate::diffcore::Array;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PixelTrackConfig {
    pub track: String,
    pub dt: f64,
    pub step_limit: usize,
    pub height: usize,
    pub width: usize,
    pub speed: f64,
    /// Heading change per step for `left` / `right`, in radians.
    pub turn_per_step: f64,
    pub half_width: f64,
    /// World extent covered by the image width.
    pub view_width: f64,
    pub half_circle_window: usize,
}

impl Default for PixelTrackConfig {
    fn default() -> Self {
        PixelTrackConfig {
            track: "oval".into(),
            dt: 0.1,
            step_limit: 2000,
            height: 24,
            width: 32,
            speed: 3.0,
            turn_per_step: 0.1,
            half_width: 1.5,
            view_width: 12.0,
            half_circle_window: 50,
        }
    }
}

/// Geometry of the agent relative to the centerline, for classical controllers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelPoseInfo {
    /// Signed offset from the centerline, positive to the left.
    pub lateral: f64,
    /// Heading minus centerline heading, radians in (-pi, pi].
    pub heading_error: f64,
    pub half_width: f64,
}

/// Constant-speed agent on a track band, observed as a small agent-centric image.
#[derive(Clone, Debug)]
pub struct PixelTrack {
    cfg: PixelTrackConfig,
    track: Track,
    spec: ActionSpec,
    pose: Pose,
    steps: usize,
    done: bool,
    info: StepInfo,
    heading_deltas: VecDeque<f64>,
}

fn pixel_track(id: &str) -> Result<Track> {
    match id {
        "oval" => {
            let q = PI / 2.0;
            let r = 8.0;
            Track::new(
                "oval",
                &[
                    Segment::Straight { length: 20.0 },
                    Segment::Arc { radius: r, angle: q },
                    Segment::Straight { length: 12.0 },
                    Segment::Arc { radius: r, angle: q },
                    Segment::Straight { length: 20.0 },
                    Segment::Arc { radius: r, angle: q },
                    Segment::Straight { length: 12.0 },
                    Segment::Arc { radius: r, angle: q },
                ],
                true,
            )
        }
        other => Track::by_id(other),
    }
}

impl PixelTrack {
    pub fn new(cfg: PixelTrackConfig) -> Result<Self> {
        if !(cfg.dt > 0.0 && cfg.speed > 0.0 && cfg.half_width > 0.0 && cfg.view_width > 0.0) {
            return Err(Error::config("pixeltrack: geometry constants must be positive"));
        }
        if cfg.height < 4 || cfg.width < 4 || cfg.step_limit == 0 || cfg.half_circle_window == 0 {
            return Err(Error::config("pixeltrack: invalid image size or limits"));
        }
        let track = pixel_track(&cfg.track)?;
        let mut env = PixelTrack {
            cfg,
            track,
            spec: ActionSpec::left_straight_right(),
            pose: Pose::default(),
            steps: 0,
            done: false,
            info: StepInfo::default(),
            heading_deltas: VecDeque::new(),
        };
        env.pose = env.origin_pose(0.0);
        env.info = env.measure(None, false);
        Ok(env)
    }

    pub fn config(&self) -> &PixelTrackConfig {
        &self.cfg
    }

    pub fn track(&self) -> &Track {
        &self.track
    }

    fn origin_pose(&self, s: f64) -> Pose {
        let p = self.track.point_at(s);
        Pose {
            x: p.x,
            y: p.y,
            heading: p.heading,
            speed: self.cfg.speed,
            steer: 0.0,
            throttle: 0.0,
        }
    }

    pub fn pose_info(&self) -> PixelPoseInfo {
        let pr = self.track.project(self.pose.x, self.pose.y);
        PixelPoseInfo {
            lateral: pr.lateral,
            heading_error: wrap_angle(self.pose.heading - pr.point.heading),
            half_width: self.cfg.half_width,
        }
    }

    /// Bearing (radians, positive left) from the agent to the centerline point
    /// `ahead` units further along the track.
    pub fn bearing_ahead(&self, ahead: f64) -> f64 {
        let pr = self.track.project(self.pose.x, self.pose.y);
        let q = self.track.point_at(pr.s + ahead);
        wrap_angle((q.y - self.pose.y).atan2(q.x - self.pose.x) - self.pose.heading)
    }

    fn measure(&self, turn: Option<TurnKind>, truncated: bool) -> StepInfo {
        let pr = self.track.project(self.pose.x, self.pose.y);
        let hw = self.cfg.half_width;
        // The loop runs counter-clockwise, so the outer wall is on the right.
        StepInfo {
            speed: self.cfg.speed,
            e_y: pr.lateral,
            e_phi_deg: wrap_angle(self.pose.heading - pr.point.heading).to_degrees(),
            e_beta_deg: 0.0,
            collision: pr.lateral < -hw,
            off_track: pr.lateral > hw,
            truncated,
            turn,
        }
    }

    /// Render `pose` into a `[3, H, W]` image: road mask, centerline stripe,
    /// and progress stripes that reveal the direction of travel.
    pub fn render(&self, pose: &Pose) -> Array {
        let (h, w) = (self.cfg.height, self.cfg.width);
        let cell = self.cfg.view_width / w as f64;
        let hw = self.cfg.half_width;
        let (sin_h, cos_h) = pose.heading.sin_cos();
        let mut data = vec![0.0; 3 * h * w];
        for r in 0..h {
            let fwd = (h - r) as f64 * cell - 0.5 * cell;
            for c in 0..w {
                let left = ((w as f64) / 2.0 - c as f64 - 0.5) * cell;
                let x = pose.x + fwd * cos_h - left * sin_h;
                let y = pose.y + fwd * sin_h + left * cos_h;
                let pr = self.track.project(x, y);
                let d = pr.lateral.abs();
                if d <= hw {
                    data[r * w + c] = 1.0;
                    data[2 * h * w + r * w + c] = 0.5 + 0.5 * (TAU * pr.s / 4.0).cos();
                }
                data[h * w + r * w + c] = (-(d / 0.4).powi(2)).exp();
            }
        }
        Array::new(vec![3, h, w], data).expect("render shape")
    }

    fn classify_turn(&mut self, delta: f64) -> TurnKind {
        self.heading_deltas.push_back(delta);
        if self.heading_deltas.len() > self.cfg.half_circle_window {
            self.heading_deltas.pop_front();
        }
        let net: f64 = self.heading_deltas.iter().sum();
        if net.abs() >= PI - 1e-9 {
            self.heading_deltas.clear();
            TurnKind::HalfCircle
        } else if delta != 0.0 {
            TurnKind::Turning
        } else {
            TurnKind::Forward
        }
    }
}

impl Environment for PixelTrack {
    fn id(&self) -> &str {
        "pixeltrack"
    }

    fn state_shape(&self) -> Vec<usize> {
        vec![3, self.cfg.height, self.cfg.width]
    }

    fn action_spec(&self) -> &ActionSpec {
        &self.spec
    }

    fn reset(&mut self, _seed: u64, start: Option<Pose>) -> Result<Array> {
        let pose = match start {
            None => self.origin_pose(0.0),
            Some(p) => {
                if !(p.x.is_finite() && p.y.is_finite() && p.heading.is_finite()) {
                    return Err(Error::config("start pose is not finite"));
                }
                if self.track.project(p.x, p.y).lateral.abs() > self.cfg.half_width {
                    return Err(Error::config("start pose is off the track"));
                }
                Pose {
                    speed: self.cfg.speed,
                    ..p
                }
            }
        };
        self.pose = pose;
        self.steps = 0;
        self.done = false;
        self.heading_deltas.clear();
        self.info = self.measure(None, false);
        Ok(self.render(&self.pose))
    }

    fn step(&mut self, action: &Action) -> Result<StepResult> {
        if self.done {
            return Err(Error::Usage("step called after the episode ended".into()));
        }
        self.spec.validate(action)?;
        let Action::Discrete(idx) = action else {
            return Err(Error::Usage("pixeltrack takes discrete actions".into()));
        };
        let delta = match idx[0] {
            0 => self.cfg.turn_per_step,
            1 => 0.0,
            _ => -self.cfg.turn_per_step,
        };
        let heading = self.pose.heading + delta;
        let ds = self.cfg.speed * self.cfg.dt;
        self.pose = Pose {
            x: self.pose.x + ds * heading.cos(),
            y: self.pose.y + ds * heading.sin(),
            heading,
            steer: delta,
            ..self.pose
        };
        self.steps += 1;
        let turn = self.classify_turn(delta);
        let truncated = self.steps >= self.cfg.step_limit;
        let info = self.measure(Some(turn), truncated);
        self.done = info.collision || info.off_track || truncated;
        self.info = info;
        Ok(StepResult {
            state: self.render(&self.pose),
            done: self.done,
            info,
        })
    }

    fn pose(&self) -> Pose {
        self.pose
    }

    fn state(&self) -> Array {
        self.render(&self.pose)
    }

    fn info(&self) -> StepInfo {
        self.info
    }

    fn sample_start(&self, seed: u64) -> Pose {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.origin_pose(rng.gen_range(0.0..self.track.length()))
    }

    fn eval_reward(&self, info: &StepInfo) -> f64 {
        pixeltrack_eval_reward(info)
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_is_bounded_and_repeatable() {
        let env = PixelTrack::new(PixelTrackConfig::default()).unwrap();
        let a = env.render(&env.pose());
        let b = env.render(&env.pose());
        assert_eq!(a.shape(), &[3, 24, 32]);
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        // road directly ahead of a centered agent
        assert_eq!(a.data()[23 * 32 + 16], 1.0);
    }

    #[test]
    fn spinning_in_place_is_a_half_circle() {
        let cfg = PixelTrackConfig {
            half_width: 100.0,
            ..PixelTrackConfig::default()
        };
        let mut env = PixelTrack::new(cfg).unwrap();
        env.reset(0, None).unwrap();
        let mut kinds = vec![];
        for _ in 0..40 {
            kinds.push(env.step(&Action::Discrete(vec![0])).unwrap().info.turn.unwrap());
        }
        // 0.1 rad per step reaches pi on step 32
        assert_eq!(kinds[31], TurnKind::HalfCircle);
        assert!(kinds[..31].iter().all(|k| *k == TurnKind::Turning));
    }

    #[test]
    fn outer_side_is_collision() {
        let mut env = PixelTrack::new(PixelTrackConfig::default()).unwrap();
        env.reset(0, None).unwrap();
        let mut last = None;
        for _ in 0..200 {
            let r = env.step(&Action::Discrete(vec![2])).unwrap();
            if r.done {
                last = Some(r.info);
                break;
            }
        }
        let info = last.expect("episode ends");
        assert!(info.collision);
        assert_eq!(pixeltrack_eval_reward(&info), -150.0);
    }
}
