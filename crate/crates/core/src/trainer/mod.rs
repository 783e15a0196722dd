//! Two-phase training. Phase 1 fits the next-state predictor on random
//! transitions with scheduled sampling; phase 2 freezes it and fits the policy
//! so that predicted next states follow the expert's.

mod config;
mod pipeline;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::collection::{sample_windows_with, ReplayBuffer};
use crate::diffcore::{clip_global_norm, optimizer_step, value_and_grad, Array, Bound, OptimState, Tape, Var};
use crate::envs::{Action, Environment};
use crate::error::{Error, Result};
use crate::expertgen::{episode_seed, ExpertTrajectory};
use crate::nn::{stack, Standardizer};
use crate::rfsgpn::{
    check_freeze, greedy_action, gumbel_noise, policy_loss, joint_params, policy_loss_and_grad, sample_action, FreezeMode, Policy,
    PolicyArch, PolicyBatch, TspnInput, POLICY_SCOPE, TSPN_SCOPE,
};
use crate::tspn::{Tspn, TspnArch, Variant};

pub use config::{CollectionConfig, Phase1Config, Phase1Schedule, Phase2Config, TrainConfig};
pub use pipeline::{
    expert_reference, phase1, random_transitions, record_demonstrations, run_pipeline, sensitivity_cells,
    sensitivity_suite, stage, stage_seed, EvalConfig, ExpertConfig, PipelineConfig, PipelineOutput, SensitivityCell,
};

/// Losses above this abort training.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Linear decay from `eps0` at epoch 0 to `eps_final` at `decay_epochs`, flat afterwards.
pub fn epsilon_schedule(epoch: f64, eps0: f64, eps_final: f64, decay_epochs: f64) -> f64 {
    if decay_epochs <= 0.0 || epoch >= decay_epochs {
        return eps_final;
    }
    let frac = epoch.max(0.0) / decay_epochs;
    eps0 * (1.0 - frac) + eps_final * frac
}

/// True once the best loss has gone `patience` evaluations without a strict improvement.
pub fn early_stop(history: &[f64], patience: usize) -> bool {
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for &v in history {
        if v < best {
            best = v;
            stale = 0;
        } else {
            stale += 1;
        }
    }
    stale >= patience.max(1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase1Epoch {
    pub epoch: usize,
    pub epsilon: f64,
    pub lr: f64,
    pub train_loss: f64,
    pub heldout_mse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase1Report {
    pub initial_heldout_mse: Option<f64>,
    pub epochs: Vec<Phase1Epoch>,
}

impl Phase1Report {
    pub fn final_heldout_mse(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.heldout_mse)
    }
}

fn divergence(what: &str, epoch: usize, step: usize, loss: f64, lr: f64) -> Error {
    Error::Divergence(format!(
        "{what} loss {loss:e} at epoch {epoch}, step {step} (lr {lr:e}, limit {DIVERGENCE_LIMIT:e})"
    ))
}

/// Standardization for a buffer: fitted on the MLP variant's states, identity for images.
pub fn fit_stats(buffer: &ReplayBuffer, variant: Variant) -> Result<Standardizer> {
    match variant {
        Variant::Mlp => Standardizer::fit(buffer.iter().map(|t| t.state.data())),
        Variant::Conv => Ok(Standardizer::identity(buffer.state_shape().iter().product())),
    }
}

/// One-step mean squared error on standardized states over the whole buffer.
pub fn heldout_mse(tspn: &Tspn, buffer: &ReplayBuffer) -> Result<f64> {
    if buffer.is_empty() {
        return Err(Error::Data("held-out buffer is empty".into()));
    }
    let idx: Vec<usize> = (0..buffer.len()).collect();
    let mut sum = 0.0;
    let mut count = 0usize;
    for chunk in idx.chunks(512) {
        let s: Vec<&Array> = chunk.iter().map(|&i| &buffer.get(i).state).collect();
        let a: Vec<&Array> = chunk.iter().map(|&i| &buffer.get(i).action).collect();
        let n: Vec<&Array> = chunk.iter().map(|&i| &buffer.get(i).next_state).collect();
        let s = tspn.stats.apply(&stack(&s)?);
        let n = tspn.stats.apply(&stack(&n)?);
        let pred = tspn.predict_std(&s, &stack(&a)?)?;
        sum += pred.data().iter().zip(n.data()).map(|(p, y)| (p - y) * (p - y)).sum::<f64>();
        count += pred.len();
    }
    Ok(sum / count as f64)
}

/// Train a fresh predictor on `buffer`. Statistics are fitted on the buffer,
/// parameters are rounded to 32 bits after every step, and the result is
/// finalized (fully frozen, training marker set).
pub fn train_tspn(
    buffer: &ReplayBuffer,
    heldout: Option<&ReplayBuffer>,
    cfg: &Phase1Config,
    seed: u64,
) -> Result<(Tspn, Phase1Report)> {
    cfg.validate()?;
    let arch = TspnArch::for_state(buffer.state_shape(), buffer.action_dim())?;
    let mut tspn = Tspn::init(arch, seed)?;
    let mut stats = fit_stats(buffer, tspn.arch.variant)?;
    stats.quantize_f32();
    tspn.stats = stats;
    tspn.params.quantize_f32();
    // fail early, before any work, if no window fits
    let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(seed, 1));
    sample_windows_with(buffer, 1, cfg.horizon, &mut rng.clone())?;

    let initial = heldout.map(|h| heldout_mse(&tspn, h)).transpose()?;
    if let Some(m) = initial {
        info!("phase 1: initial held-out mse {m:.6}");
    }
    let total = (cfg.epochs * cfg.iters_per_epoch) as u64;
    let schedule = cfg.lr_schedule(total);
    let mut opt = OptimState::new(cfg.algorithm, &tspn.params).with_momentum(cfg.momentum)?;
    let mut report = Phase1Report {
        initial_heldout_mse: initial,
        epochs: Vec::with_capacity(cfg.epochs),
    };
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let eps = epsilon_schedule(epoch as f64, cfg.eps0, cfg.eps_final, cfg.eps_decay_epochs);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for it in 0..cfg.iters_per_epoch {
            let starts = sample_windows_with(buffer, cfg.batch, cfg.horizon, &mut rng)?;
            let window = Window::gather(buffer, &tspn.stats, &starts, cfg.horizon, eps, &mut rng)?;
            let (loss, mut grads) = value_and_grad(&tspn.params, |t, b| window.loss(&tspn, t, b))?;
            if !(loss <= DIVERGENCE_LIMIT) {
                return Err(divergence("phase-1", epoch, it, loss, lr));
            }
            clip_global_norm(&mut grads, cfg.clip)?;
            lr = schedule.rate(cfg.lr, step)?;
            optimizer_step(&mut tspn.params, &grads, &mut opt, cfg.algorithm, lr)?;
            tspn.params.quantize_f32();
            step += 1;
            loss_sum += loss;
        }
        let train_loss = loss_sum / cfg.iters_per_epoch as f64;
        let held = heldout.map(|h| heldout_mse(&tspn, h)).transpose()?;
        info!(
            "phase 1 epoch {epoch}: eps {eps:.3} lr {lr:.2e} train {train_loss:.6} held-out {}",
            held.map_or("-".to_string(), |m| format!("{m:.6}"))
        );
        report.epochs.push(Phase1Epoch {
            epoch,
            epsilon: eps,
            lr,
            train_loss,
            heldout_mse: held,
        });
    }
    tspn.finalize();
    Ok((tspn, report))
}

/// Standardized multi-step batch with the scheduled-sampling masks drawn up front.
struct Window {
    states: Vec<Array>,
    actions: Vec<Array>,
    targets: Vec<Array>,
    /// Per step `j > 0`: 1 where the true state is fed, 0 where the previous prediction is.
    masks: Vec<Vec<bool>>,
}

impl Window {
    fn gather<R: Rng>(
        buffer: &ReplayBuffer,
        stats: &Standardizer,
        starts: &[usize],
        horizon: usize,
        eps: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut w = Window {
            states: Vec::with_capacity(horizon),
            actions: Vec::with_capacity(horizon),
            targets: Vec::with_capacity(horizon),
            masks: Vec::with_capacity(horizon),
        };
        for j in 0..horizon {
            let tr: Vec<_> = starts.iter().map(|&s| buffer.get(s + j)).collect();
            let s: Vec<&Array> = tr.iter().map(|t| &t.state).collect();
            let a: Vec<&Array> = tr.iter().map(|t| &t.action).collect();
            let n: Vec<&Array> = tr.iter().map(|t| &t.next_state).collect();
            w.states.push(stats.apply(&stack(&s)?));
            w.actions.push(stack(&a)?);
            w.targets.push(stats.apply(&stack(&n)?));
            w.masks.push(starts.iter().map(|_| j == 0 || rng.gen::<f64>() < eps).collect());
        }
        Ok(w)
    }

    fn loss(&self, tspn: &Tspn, t: &mut Tape, b: &Bound) -> Result<Var> {
        let h = self.states.len();
        let mut prev = None;
        let mut total = None;
        for j in 0..h {
            let input = match prev {
                None => t.constant(self.states[j].clone()),
                Some(p) => self.blend(t, p, j)?,
            };
            let a = t.constant(self.actions[j].clone());
            let pred = tspn.forward(t, b, input, a)?;
            let y = t.constant(self.targets[j].clone());
            let l = t.mse(pred, y)?;
            total = Some(match total {
                None => l,
                Some(acc) => t.add(acc, l)?,
            });
            prev = Some(pred);
        }
        let total = total.ok_or_else(|| Error::config("horizon must be positive"))?;
        Ok(t.scale(total, 1.0 / h as f64))
    }

    /// `mask * truth + (1 - mask) * prediction`, row by row.
    fn blend(&self, t: &mut Tape, pred: Var, j: usize) -> Result<Var> {
        let truth = &self.states[j];
        let mask = &self.masks[j];
        if mask.iter().all(|&m| m) {
            return Ok(t.constant(truth.clone()));
        }
        let row = truth.len() / mask.len();
        let keep: Vec<f64> = (0..truth.len()).map(|i| if mask[i / row] { 0.0 } else { 1.0 }).collect();
        let fed: Vec<f64> = truth
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| if mask[i / row] { *v } else { 0.0 })
            .collect();
        let keep = t.constant(Array::new(truth.shape().to_vec(), keep)?);
        let fed = t.constant(Array::new(truth.shape().to_vec(), fed)?);
        let kept = t.mul(pred, keep)?;
        t.add(kept, fed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase2Epoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub pairs: usize,
    pub mean_episode_len: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase2Report {
    pub epochs: Vec<Phase2Epoch>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub train_trajectories: usize,
    pub validation_trajectories: usize,
}

/// `(state, expert next state)` pairs gathered from one rollout, standardized.
struct Pairs {
    states: Vec<Array>,
    targets: Vec<Array>,
}

/// Follow `policy` from the trajectory's start pose, pairing each visited state
/// with the expert state one step later at the same index. Stops at the end of
/// the trajectory or when the episode ends. `temperature: None` acts greedily.
fn rollout_pairs(
    env: &mut dyn Environment,
    policy: &Policy,
    traj: &ExpertTrajectory,
    temperature: Option<f64>,
    seed: u64,
) -> Result<Pairs> {
    let blocks = &policy.arch.blocks;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = env.reset(seed, Some(traj.start))?;
    let mut out = Pairs {
        states: Vec::with_capacity(traj.len()),
        targets: Vec::with_capacity(traj.len()),
    };
    for target in &traj.states[1..] {
        let logits = policy.logits_raw(&state)?;
        let idx = match temperature {
            Some(tmp) => sample_action(logits.data(), blocks, tmp, &mut rng),
            None => greedy_action(logits.data(), blocks),
        };
        out.states.push(policy.stats.apply(&state));
        out.targets.push(policy.stats.apply(target));
        let r = env.step(&Action::Discrete(idx))?;
        if r.done {
            break;
        }
        state = r.state;
    }
    Ok(out)
}

fn gather_pairs(
    env: &dyn Environment,
    policy: &Policy,
    trajs: &[&ExpertTrajectory],
    temperature: Option<f64>,
    seeds: &[u64],
) -> Result<Vec<Pairs>> {
    trajs
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(traj, &s)| {
            let mut e = env.box_clone();
            rollout_pairs(&mut *e, policy, traj, temperature, s)
        })
        .collect()
}

fn noise_array<R: Rng>(rng: &mut R, rows: usize, dim: usize) -> Result<Array> {
    Array::new(vec![rows, dim], gumbel_noise(rng, rows * dim))
}

/// Mean policy loss over all pairs in fixed chunks, with noise from `seed`.
fn pairs_loss(policy: &Policy, tspn: &Tspn, mode: FreezeMode, input: TspnInput, pairs: &[Pairs], seed: u64) -> Result<f64> {
    let states: Vec<&Array> = pairs.iter().flat_map(|p| p.states.iter()).collect();
    let targets: Vec<&Array> = pairs.iter().flat_map(|p| p.targets.iter()).collect();
    if states.is_empty() {
        return Err(Error::Data("validation rollouts produced no pairs".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = policy.arch.action_dim();
    let (mut sum, mut n) = (0.0, 0usize);
    for (s, y) in states.chunks(256).zip(targets.chunks(256)) {
        let s = stack(s)?;
        let y = stack(y)?;
        let noise = noise_array(&mut rng, s.shape()[0], dim)?;
        let batch = PolicyBatch {
            states: &s,
            expert_next: &y,
            noise: &noise,
        };
        let l = policy_loss(policy, tspn, mode, &batch, input)?;
        sum += l * s.shape()[0] as f64;
        n += s.shape()[0];
    }
    Ok(sum / n as f64)
}

/// Fit a policy against expert state trajectories through the finalized
/// predictor. Returns the best policy by validation loss, the predictor as
/// trained in this phase (unchanged in full-freeze mode), and the loss curve.
pub fn train_policy(
    env: &dyn Environment,
    expert: &[ExpertTrajectory],
    tspn: &Tspn,
    cfg: &Phase2Config,
    seed: u64,
) -> Result<(Policy, Tspn, Phase2Report)> {
    cfg.validate()?;
    if !tspn.finalized {
        return Err(Error::config("predictor has not completed phase-1 training"));
    }
    if expert.is_empty() {
        return Err(Error::Data("no expert trajectories".into()));
    }
    if let Some(t) = expert.iter().find(|t| t.len() < cfg.min_trajectory_len) {
        return Err(Error::Data(format!(
            "expert trajectory {} has {} states, minimum is {}",
            t.episode,
            t.len(),
            cfg.min_trajectory_len
        )));
    }
    if expert[0].state_shape() != tspn.arch.state_shape.as_slice() {
        return Err(Error::shape("expert states do not match the predictor"));
    }
    let blocks = env.action_spec().blocks();
    let mut tspn = tspn.clone();
    tspn.freeze(cfg.freeze_mode == FreezeMode::Partial);
    check_freeze(&tspn, cfg.freeze_mode)?;

    let n_val = if expert.len() >= 2 {
        ((expert.len() as f64 * cfg.validation_fraction).round() as usize).clamp(1, expert.len() - 1)
    } else {
        0
    };
    let (train_set, val_set) = expert.split_at(expert.len() - n_val);
    // with a single trajectory the validation rollouts reuse it
    let val_set = if val_set.is_empty() { train_set } else { val_set };

    let mut policy = Policy::init(PolicyArch::new(&tspn.arch.state_shape, &blocks), seed)?;
    policy.tau_g = cfg.tau_g;
    policy.stats = tspn.stats.clone();
    policy.params.quantize_f32();

    let mut joint = joint_params(&policy, &tspn)?;
    let mut opt = OptimState::new(cfg.algorithm, &joint).with_momentum(cfg.momentum)?;
    let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(seed, 2));
    let val_seeds: Vec<u64> = (0..val_set.len() as u64).map(|i| episode_seed(seed ^ 0x5A5A, i)).collect();
    let val_refs: Vec<&ExpertTrajectory> = val_set.iter().collect();

    let mut history = Vec::new();
    let mut best = (f64::INFINITY, policy.clone(), tspn.clone(), 0usize);
    let mut report = Phase2Report {
        epochs: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
        train_trajectories: train_set.len(),
        validation_trajectories: n_val,
    };
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let picks: Vec<&ExpertTrajectory> = (0..cfg.episodes_per_epoch)
            .map(|_| &train_set[rng.gen_range(0..train_set.len())])
            .collect();
        let seeds: Vec<u64> = (0..picks.len() as u64)
            .map(|k| episode_seed(seed, (epoch as u64) << 16 | k))
            .collect();
        let rollouts = gather_pairs(env, &policy, &picks, Some(cfg.rollout_temperature), &seeds)?;
        let mean_len = rollouts.iter().map(|p| p.states.len()).sum::<usize>() as f64 / rollouts.len() as f64;
        let mut pairs: Vec<(&Array, &Array)> = rollouts
            .iter()
            .flat_map(|p| p.states.iter().zip(p.targets.iter()))
            .collect();
        pairs.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in pairs.chunks(cfg.batch) {
            let s: Vec<&Array> = chunk.iter().map(|p| p.0).collect();
            let y: Vec<&Array> = chunk.iter().map(|p| p.1).collect();
            let s = stack(&s)?;
            let y = stack(&y)?;
            let noise = noise_array(&mut rng, chunk.len(), policy.arch.action_dim())?;
            let batch = PolicyBatch {
                states: &s,
                expert_next: &y,
                noise: &noise,
            };
            let (loss, mut grads) = policy_loss_and_grad(&policy, &tspn, cfg.freeze_mode, &batch, cfg.tspn_input)?;
            if !(loss <= DIVERGENCE_LIMIT) {
                return Err(divergence("phase-2", epoch, step, loss, cfg.lr));
            }
            clip_global_norm(&mut grads, cfg.clip)?;
            optimizer_step(&mut joint, &grads, &mut opt, cfg.algorithm, cfg.lr)?;
            joint.quantize_f32();
            policy.params = joint.extract(POLICY_SCOPE);
            tspn.params = joint.extract(TSPN_SCOPE);
            loss_sum += loss;
            batches += 1;
            step += 1;
        }
        let train_loss = loss_sum / batches.max(1) as f64;
        let val = gather_pairs(env, &policy, &val_refs, None, &val_seeds)?;
        let val_loss = pairs_loss(&policy, &tspn, cfg.freeze_mode, cfg.tspn_input, &val, seed ^ 0xA5A5)?;
        info!("phase 2 epoch {epoch}: pairs {} len {mean_len:.1} train {train_loss:.5} val {val_loss:.5}", pairs.len());
        report.epochs.push(Phase2Epoch {
            epoch,
            train_loss,
            val_loss,
            pairs: pairs.len(),
            mean_episode_len: mean_len,
        });
        history.push(val_loss);
        if val_loss < best.0 {
            best = (val_loss, policy.clone(), tspn.clone(), epoch);
        }
        if early_stop(&history, cfg.patience) {
            debug!("phase 2: early stop after epoch {epoch}");
            report.stopped_early = true;
            break;
        }
    }
    let (_, mut policy, mut tspn, best_epoch) = best;
    report.best_epoch = best_epoch;
    policy.finalized = true;
    // hand the predictor back as a finalized, fully frozen artifact
    tspn.finalize();
    Ok((policy, tspn, report))
}
