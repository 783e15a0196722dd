//! Random-interaction data collection, the transition buffer, and the window
//! sampler that never crosses a terminal flag.

mod dataset;

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::Array;
use crate::envs::{Action, Environment};
use crate::error::{Error, Result};
use crate::expertgen::episode_seed;
use crate::nn::Standardizer;
use crate::rfsgpn::{sample_action, Policy};

pub use dataset::{load_dataset, save_dataset, Dataset, DATASET_MAGIC, DATASET_VERSION};

pub const DEFAULT_CAPACITY: usize = 200_000;

/// `(state, action, next_state, done)`; the action is its concatenated one-hot encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Array,
    pub action: Array,
    pub next_state: Array,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    env_id: String,
    state_shape: Vec<usize>,
    action_dim: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(env_id: &str, state_shape: &[usize], action_dim: usize, capacity: usize) -> Result<Self> {
        if capacity == 0 || action_dim == 0 || state_shape.is_empty() {
            return Err(Error::config("buffer needs positive capacity, action and state sizes"));
        }
        Ok(ReplayBuffer {
            capacity,
            env_id: env_id.to_string(),
            state_shape: state_shape.to_vec(),
            action_dim,
            items: VecDeque::new(),
        })
    }

    /// Append one transition; the oldest is dropped once capacity is reached.
    /// Values are rounded to 32 bits so the buffer equals its saved form.
    pub fn push(&mut self, mut t: Transition) -> Result<()> {
        if t.state.shape() != self.state_shape.as_slice()
            || t.next_state.shape() != self.state_shape.as_slice()
        {
            return Err(Error::shape(format!(
                "transition state {:?} does not match buffer {:?}",
                t.state.shape(),
                self.state_shape
            )));
        }
        if t.action.shape() != [self.action_dim] {
            return Err(Error::shape(format!(
                "action encoding {:?} does not match dimension {}",
                t.action.shape(),
                self.action_dim
            )));
        }
        t.state.quantize_f32();
        t.action.quantize_f32();
        t.next_state.quantize_f32();
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn env_id(&self) -> &str {
        &self.env_id
    }

    pub fn state_shape(&self) -> &[usize] {
        &self.state_shape
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Mark the newest transition terminal, closing the open episode.
    pub fn close_episode(&mut self) {
        if let Some(t) = self.items.back_mut() {
            t.done = true;
        }
    }

    /// Split off the last `fraction` of whole episodes, for held-out evaluation.
    pub fn split_tail(&self, fraction: f64) -> (ReplayBuffer, ReplayBuffer) {
        let target = ((self.len() as f64) * (1.0 - fraction)).round() as usize;
        let mut cut = target.min(self.len());
        while cut > 0 && cut < self.len() && !self.items[cut - 1].done {
            cut += 1;
        }
        let mut head = self.clone();
        let mut tail = self.clone();
        head.items = self.items.iter().take(cut).cloned().collect();
        tail.items = self.items.iter().skip(cut).cloned().collect();
        (head, tail)
    }

    /// Length of the longest run of consecutive non-terminal transitions.
    pub fn longest_segment(&self) -> usize {
        let (mut best, mut run) = (0, 0);
        for t in &self.items {
            if t.done {
                run = 0;
            } else {
                run += 1;
                best = best.max(run);
            }
        }
        best
    }

    /// Start indices of every window of `horizon` transitions without a terminal flag.
    pub fn valid_starts(&self, horizon: usize) -> Vec<usize> {
        let mut out = Vec::new();
        if horizon == 0 {
            return out;
        }
        let mut run = 0;
        for (i, t) in self.items.iter().enumerate() {
            if t.done {
                run = 0;
                continue;
            }
            run += 1;
            if run >= horizon {
                out.push(i + 1 - horizon);
            }
        }
        out
    }
}

/// Draw `batch` window start indices uniformly over the valid starts.
pub fn sample_windows(buffer: &ReplayBuffer, batch: usize, horizon: usize, seed: u64) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_windows_with(buffer, batch, horizon, &mut rng)
}

pub fn sample_windows_with<R: Rng>(
    buffer: &ReplayBuffer,
    batch: usize,
    horizon: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let starts = buffer.valid_starts(horizon);
    if horizon == 0 || starts.is_empty() {
        return Err(Error::InsufficientData {
            msg: format!("no window of {horizon} transitions without a terminal flag"),
            longest_segment: buffer.longest_segment(),
        });
    }
    Ok((0..batch).map(|_| starts[rng.gen_range(0..starts.len())]).collect())
}

/// Interact with `env` using `policy` at the given temperature for `n_steps`
/// steps, resetting at sampled track positions whenever an episode ends.
/// States are standardized with `stats` before they reach the policy.
pub fn collect(
    env: &mut dyn Environment,
    policy: &Policy,
    stats: &Standardizer,
    temperature: f64,
    n_steps: usize,
    seed: u64,
) -> Result<ReplayBuffer> {
    collect_into(env, policy, stats, temperature, n_steps, seed, DEFAULT_CAPACITY.max(n_steps))
}

pub fn collect_into(
    env: &mut dyn Environment,
    policy: &Policy,
    stats: &Standardizer,
    temperature: f64,
    n_steps: usize,
    seed: u64,
    capacity: usize,
) -> Result<ReplayBuffer> {
    if n_steps == 0 {
        return Err(Error::config("n_steps must be positive"));
    }
    if !(temperature > 0.0) {
        return Err(Error::config("temperature must be positive"));
    }
    let spec = env.action_spec().clone();
    let blocks = spec.blocks();
    let mut buf = ReplayBuffer::new(env.id(), &env.state_shape(), spec.encoding_dim(), capacity)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut episode = 0u64;
    let start = env.sample_start(episode_seed(seed, episode));
    let mut state = env.reset(episode_seed(seed, episode), Some(start))?;
    for _ in 0..n_steps {
        let logits = policy.logits(&stats.apply(&state))?;
        let idx = sample_action(logits.data(), &blocks, temperature, &mut rng);
        let action = Array::from_vec(spec.encode(&idx)?);
        let r = env.step(&Action::Discrete(idx))?;
        buf.push(Transition {
            state,
            action,
            next_state: r.state.clone(),
            done: r.done,
        })?;
        state = if r.done {
            episode += 1;
            let s = episode_seed(seed, episode);
            let start = env.sample_start(s);
            env.reset(s, Some(start))?
        } else {
            r.state
        };
    }
    buf.close_episode();
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(done_at: &[usize], n: usize) -> ReplayBuffer {
        let mut b = ReplayBuffer::new("toy", &[1], 2, 100).unwrap();
        for i in 0..n {
            b.push(Transition {
                state: Array::from_vec(vec![i as f64]),
                action: Array::from_vec(vec![1.0, 0.0]),
                next_state: Array::from_vec(vec![i as f64 + 1.0]),
                done: done_at.contains(&i),
            })
            .unwrap();
        }
        b
    }

    #[test]
    fn valid_starts_example() {
        let b = toy(&[5], 10);
        assert_eq!(b.valid_starts(3), vec![0, 1, 2, 6, 7]);
    }

    #[test]
    fn horizon_too_long_names_longest_segment() {
        let b = toy(&[5], 10);
        match sample_windows(&b, 4, 6, 0) {
            Err(Error::InsufficientData { longest_segment, .. }) => assert_eq!(longest_segment, 5),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn capacity_drops_oldest() {
        let mut b = ReplayBuffer::new("toy", &[1], 2, 3).unwrap();
        for i in 0..5 {
            b.push(Transition {
                state: Array::from_vec(vec![i as f64]),
                action: Array::from_vec(vec![0.0, 1.0]),
                next_state: Array::from_vec(vec![0.0]),
                done: false,
            })
            .unwrap();
        }
        let firsts: Vec<f64> = b.iter().map(|t| t.state.data()[0]).collect();
        assert_eq!(firsts, vec![2.0, 3.0, 4.0]);
    }
}
