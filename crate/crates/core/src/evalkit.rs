//! Evaluation episodes and summary metrics. This is the only place where
//! environment rewards are accumulated.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envs::{Action, Environment};
use crate::error::{Error, Result};
use crate::expertgen::{episode_seed, run_expert_episode, Expert};
use crate::rfsgpn::Policy;

pub const DEFAULT_EPISODES: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    #[serde(rename = "return")]
    pub ret: f64,
    pub steps: usize,
    pub mean_abs_ey: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n_episodes: usize,
    pub returns: Vec<f64>,
    pub max: f64,
    pub mean: f64,
    pub iqm: f64,
    pub normalized_iqm: f64,
    pub reference_return: f64,
}

/// Inter-quartile mean: the mean of the middle half of the sorted values. When
/// the quartile boundaries fall inside an element, that element enters with
/// the fractional weight of its overlap.
pub fn iqm(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Usage("iqm of an empty list".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let (lo, hi) = (n / 4.0, 3.0 * n / 4.0);
    let mut acc = 0.0;
    for (i, x) in v.iter().enumerate() {
        let w = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
        if w > 0.0 {
            acc += w * x;
        }
    }
    Ok(acc / (hi - lo))
}

pub fn normalized_iqm(values: &[f64], reference_return: f64) -> Result<f64> {
    if !(reference_return > 0.0 && reference_return.is_finite()) {
        return Err(Error::config(format!(
            "reference return must be positive, got {reference_return}"
        )));
    }
    Ok(iqm(values)? / reference_return)
}

pub fn summarize(returns: &[f64], reference_return: f64) -> Result<EvalSummary> {
    let norm = normalized_iqm(returns, reference_return)?;
    Ok(EvalSummary {
        n_episodes: returns.len(),
        returns: returns.to_vec(),
        max: returns.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean: returns.iter().sum::<f64>() / returns.len() as f64,
        iqm: iqm(returns)?,
        normalized_iqm: norm,
        reference_return,
    })
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Per-episode CSV with columns `episode,return,steps,mean_abs_ey`.
pub fn write_episode_csv(path: &Path, records: &[EpisodeRecord]) -> Result<()> {
    write_csv(path, records)
}

pub fn read_episode_csv(path: &Path) -> Result<Vec<EpisodeRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Format(e.to_string())))
        .collect()
}

#[derive(Serialize)]
struct SummaryRow {
    n_episodes: usize,
    max: f64,
    mean: f64,
    iqm: f64,
    normalized_iqm: f64,
    reference_return: f64,
}

/// One-row summary CSV.
pub fn write_summary_csv(path: &Path, s: &EvalSummary) -> Result<()> {
    write_csv(
        path,
        &[SummaryRow {
            n_episodes: s.n_episodes,
            max: s.max,
            mean: s.mean,
            iqm: s.iqm,
            normalized_iqm: s.normalized_iqm,
            reference_return: s.reference_return,
        }],
    )
}

fn episode_start(env: &dyn Environment, seed: u64, i: usize) -> (u64, crate::envs::Pose) {
    let s = episode_seed(seed, i as u64);
    (s, env.sample_start(s))
}

/// Run `n` greedy episodes with `policy`, in parallel, one seed per episode.
pub fn run_episodes(env: &dyn Environment, policy: &Policy, n: usize, seed: u64) -> Result<Vec<EpisodeRecord>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut e = env.box_clone();
            let (s, start) = episode_start(&*e, seed, i);
            let mut state = e.reset(s, Some(start))?;
            let mut rec = EpisodeRecord {
                episode: i,
                ret: 0.0,
                steps: 0,
                mean_abs_ey: 0.0,
            };
            loop {
                let r = e.step(&Action::Discrete(policy.act_greedy(&state)?))?;
                rec.ret += e.eval_reward(&r.info);
                rec.mean_abs_ey += r.info.e_y.abs();
                rec.steps += 1;
                if r.done {
                    break;
                }
                state = r.state;
            }
            rec.mean_abs_ey /= rec.steps as f64;
            Ok(rec)
        })
        .collect()
}

/// The expert controller on the same starts as [`run_episodes`].
pub fn run_expert_episodes(env: &dyn Environment, expert: &Expert, n: usize, seed: u64) -> Result<Vec<EpisodeRecord>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut e = env.box_clone();
            let (s, start) = episode_start(&*e, seed, i);
            let limit = e.step_limit();
            let ep = run_expert_episode(&mut *e, expert, start, s, limit, i)?;
            let steps = ep.rewards.len();
            Ok(EpisodeRecord {
                episode: i,
                ret: ep.rewards.iter().sum(),
                steps,
                mean_abs_ey: ep.abs_e_y.iter().sum::<f64>() / steps.max(1) as f64,
            })
        })
        .collect()
}

pub fn returns_of(records: &[EpisodeRecord]) -> Vec<f64> {
    records.iter().map(|r| r.ret).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iqm_examples() {
        assert_eq!(iqm(&[1.0, 2.0, 3.0, 4.0]).unwrap(), 2.5);
        assert_eq!(iqm(&[3.0; 7]).unwrap(), 3.0);
        assert!(matches!(iqm(&[]), Err(Error::Usage(_))));
    }

    #[test]
    fn normalized_examples() {
        let v = [1.0, 5.0, 2.0, 8.0, 3.0];
        let r = iqm(&v).unwrap();
        assert!((normalized_iqm(&v, r).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(normalized_iqm(&[0.0; 4], 3.0).unwrap(), 0.0);
        assert!(matches!(normalized_iqm(&v, 0.0), Err(Error::Config(_))));
    }
}
