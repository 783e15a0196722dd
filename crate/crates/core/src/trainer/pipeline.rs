//! The full pipeline (collect, record, phase 1, phase 2, evaluate) and the
//! one-factor-at-a-time sensitivity grid built on it.

use std::collections::BTreeMap;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::{train_policy, train_tspn, Phase1Report, Phase2Report, TrainConfig};
use crate::collection::{collect, ReplayBuffer};
use crate::envs::{EnvConfig, Environment};
use crate::error::{Error, Result};
use crate::evalkit::{iqm, returns_of, run_episodes, run_expert_episodes, summarize, EpisodeRecord, EvalSummary};
use crate::expertgen::{record_expert, Expert, ExpertTrajectory};
use crate::nn::Standardizer;
use crate::rfsgpn::{FreezeMode, Policy, PolicyArch};
use crate::tspn::Tspn;

/// Seed offsets of the pipeline stages, so each stage draws from its own stream.
pub mod stage {
    pub const COLLECT: u64 = 0;
    pub const HELDOUT: u64 = 1;
    pub const EXPERT: u64 = 2;
    pub const TSPN: u64 = 3;
    pub const POLICY: u64 = 4;
    pub const EVAL: u64 = 5;
}

pub fn stage_seed(seed: u64, stage: u64) -> u64 {
    seed.wrapping_add(stage)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpertConfig {
    pub episodes: usize,
    /// Steps per demonstration; the environment's step limit when absent.
    pub max_steps: Option<usize>,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        ExpertConfig {
            episodes: 10,
            max_steps: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { episodes: 200 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub env: EnvConfig,
    pub train: TrainConfig,
    pub expert: ExpertConfig,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.train.validate()?;
        if self.expert.episodes == 0 || self.eval.episodes == 0 || self.expert.max_steps == Some(0) {
            return Err(Error::config("expert and evaluation episode counts must be positive"));
        }
        Ok(())
    }
}

pub struct PipelineOutput {
    pub tspn: Tspn,
    pub phase1: Phase1Report,
    pub policy: Policy,
    pub phase2: Phase2Report,
    pub tspn_after: Tspn,
    pub policy_eval: Vec<EpisodeRecord>,
    pub expert_eval: Vec<EpisodeRecord>,
    pub summary: EvalSummary,
}

/// Random-policy data: an untrained, near-uniform policy sampled at `temperature`.
pub fn random_transitions(env: &mut dyn Environment, temperature: f64, n: usize, seed: u64) -> Result<ReplayBuffer> {
    let shape = env.state_shape();
    let blocks = env.action_spec().blocks();
    let policy = Policy::init(PolicyArch::new(&shape, &blocks), seed)?;
    let stats = Standardizer::identity(shape.iter().product());
    collect(env, &policy, &stats, temperature, n, seed)
}

pub fn record_demonstrations(env: &mut dyn Environment, cfg: &ExpertConfig, seed: u64) -> Result<Vec<ExpertTrajectory>> {
    let expert = Expert::for_env(&*env);
    let steps = cfg.max_steps.unwrap_or(env.step_limit());
    record_expert(env, &expert, cfg.episodes, stage_seed(seed, stage::EXPERT), steps)
}

/// Collect the training and held-out sets and run phase 1.
pub fn phase1(env: &mut dyn Environment, cfg: &TrainConfig, seed: u64) -> Result<(Tspn, Phase1Report)> {
    let c = &cfg.collection;
    let train = random_transitions(env, c.temperature, c.n_steps, stage_seed(seed, stage::COLLECT))?;
    let held = if c.heldout_steps > 0 {
        Some(random_transitions(env, c.temperature, c.heldout_steps, stage_seed(seed, stage::HELDOUT))?)
    } else {
        None
    };
    train_tspn(&train, held.as_ref(), &cfg.phase1, stage_seed(seed, stage::TSPN))
}

pub fn expert_reference(env: &dyn Environment, n: usize, seed: u64) -> Result<Vec<EpisodeRecord>> {
    let expert = Expert::for_env(env);
    run_expert_episodes(env, &expert, n, stage_seed(seed, stage::EVAL))
}

pub fn run_pipeline(cfg: &PipelineConfig, seed: u64) -> Result<PipelineOutput> {
    cfg.validate()?;
    let mut env = cfg.env.build()?;
    let demos = record_demonstrations(&mut *env, &cfg.expert, seed)?;
    let (tspn, p1) = phase1(&mut *env, &cfg.train, seed)?;
    let expert_eval = expert_reference(&*env, cfg.eval.episodes, seed)?;
    finish(&*env, cfg, &demos, tspn, p1, expert_eval, seed)
}

fn finish(
    env: &dyn Environment,
    cfg: &PipelineConfig,
    demos: &[ExpertTrajectory],
    tspn: Tspn,
    p1: Phase1Report,
    expert_eval: Vec<EpisodeRecord>,
    seed: u64,
) -> Result<PipelineOutput> {
    let (policy, tspn_after, p2) = train_policy(env, demos, &tspn, &cfg.train.phase2, stage_seed(seed, stage::POLICY))?;
    let policy_eval = run_episodes(env, &policy, cfg.eval.episodes, stage_seed(seed, stage::EVAL))?;
    let reference = iqm(&returns_of(&expert_eval))?;
    let summary = summarize(&returns_of(&policy_eval), reference)?;
    Ok(PipelineOutput {
        tspn,
        phase1: p1,
        policy,
        phase2: p2,
        tspn_after,
        policy_eval,
        expert_eval,
        summary,
    })
}

/// One cell of the sensitivity grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SensitivityCell {
    pub label: String,
    pub summary: Option<EvalSummary>,
    pub error: Option<String>,
}

/// The default configuration plus one variation per factor.
pub fn sensitivity_cells(base: &PipelineConfig) -> Vec<(String, PipelineConfig)> {
    let mut cells = vec![("default".to_string(), base.clone())];
    for t in [0.5, 2.0] {
        let mut c = base.clone();
        c.train.collection.temperature = t;
        cells.push((format!("T={t:.1}"), c));
    }
    for e in [0.3, 0.7] {
        let mut c = base.clone();
        c.train.phase1.eps_final = e;
        cells.push((format!("eps={e:.1}"), c));
    }
    let mut c = base.clone();
    c.train.phase2.freeze_mode = FreezeMode::Partial;
    cells.push(("PF".to_string(), c));
    cells
}

/// Run every cell. Demonstrations and the expert reference are shared, and a
/// phase-1 result is reused by cells whose collection and phase-1 settings agree.
/// A failing cell is recorded and the suite moves on.
pub fn sensitivity_suite(base: &PipelineConfig, seed: u64) -> Result<Vec<SensitivityCell>> {
    base.validate()?;
    let mut env = base.env.build()?;
    let demos = record_demonstrations(&mut *env, &base.expert, seed)?;
    let expert_eval = expert_reference(&*env, base.eval.episodes, seed)?;
    let mut cache: BTreeMap<String, (Tspn, Phase1Report)> = BTreeMap::new();
    let mut out = Vec::new();
    for (label, cfg) in sensitivity_cells(base) {
        info!("sensitivity cell {label}");
        let key = serde_json::to_string(&(&cfg.train.collection, &cfg.train.phase1))
            .map_err(|e| Error::Format(e.to_string()))?;
        let res = (|| -> Result<EvalSummary> {
            cfg.validate()?;
            if !cache.contains_key(&key) {
                let p1 = phase1(&mut *env, &cfg.train, seed)?;
                cache.insert(key.clone(), p1);
            }
            let (tspn, p1) = cache[&key].clone();
            Ok(finish(&*env, &cfg, &demos, tspn, p1, expert_eval.clone(), seed)?.summary)
        })();
        out.push(match res {
            Ok(s) => SensitivityCell {
                label,
                summary: Some(s),
                error: None,
            },
            Err(e) => {
                warn!("sensitivity cell {label} failed: {e}");
                SensitivityCell {
                    label,
                    summary: None,
                    error: Some(e.to_string()),
                }
            }
        });
    }
    Ok(out)
}
