//! Subcommands. Each one resolves its configuration and seed, runs one pipeline
//! stage, writes its outputs under the output directory and records a manifest.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use rfrlf_core::collection::{load_dataset, save_dataset, Dataset, ReplayBuffer};
use rfrlf_core::envs::{Action, Environment};
use rfrlf_core::evalkit::{
    iqm, returns_of, run_episodes, summarize, write_episode_csv, write_summary_csv, EvalSummary,
};
use rfrlf_core::expertgen::{episode_seed, ExpertTrajectory};
use rfrlf_core::rfsgpn::Policy;
use rfrlf_core::trainer::{
    expert_reference, phase1, random_transitions, record_demonstrations, sensitivity_suite, stage, stage_seed,
    train_policy, train_tspn,
};
use rfrlf_core::{Error, Result};

use crate::checkpoint::{self, Network};
use crate::config::{resolve_seed, RunConfig, SEED_ENV};
use crate::manifest::RunManifest;

pub const TRANSITIONS_FILE: &str = "transitions.rfds";
pub const HELDOUT_FILE: &str = "heldout.rfds";
pub const EXPERT_FILE: &str = "expert.rfds";
pub const TSPN_FILE: &str = "tspn.ck";
pub const TSPN_AFTER_FILE: &str = "tspn_after.ck";
pub const POLICY_FILE: &str = "policy.ck";

#[derive(Debug, Parser)]
#[command(name = "rfrlf", version, about = "Reward-free imitation from state trajectories")]
pub struct Cli {
    /// Log verbosity; repeat for more.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides RFRLF_SEED and the file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; overrides `paths.out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Collect random-policy transitions (training and held-out sets).
    Collect(Common),
    /// Record state-only expert demonstrations.
    RecordExpert(Common),
    /// Phase 1: train the state predictor.
    TrainTspn {
        #[command(flatten)]
        common: Common,
        /// Training transitions; collected in-process when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        heldout: Option<PathBuf>,
    },
    /// Phase 2: train the policy through the frozen predictor.
    TrainPolicy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        tspn: PathBuf,
        /// Expert demonstrations; recorded in-process when omitted.
        #[arg(long)]
        expert: Option<PathBuf>,
    },
    /// Evaluate a policy checkpoint against the expert controller.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Drive one greedy episode and log every step.
    Rollout {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        episode: u64,
    },
    /// Run the one-factor-at-a-time sensitivity grid.
    Sensitivity(Common),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Collect(_) => "collect",
            Command::RecordExpert(_) => "record-expert",
            Command::TrainTspn { .. } => "train-tspn",
            Command::TrainPolicy { .. } => "train-policy",
            Command::Eval { .. } => "eval",
            Command::Rollout { .. } => "rollout",
            Command::Sensitivity(_) => "sensitivity",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Collect(c) | Command::RecordExpert(c) | Command::Sensitivity(c) => c,
            Command::TrainTspn { common, .. }
            | Command::TrainPolicy { common, .. }
            | Command::Eval { common, .. }
            | Command::Rollout { common, .. } => common,
        }
    }
}

/// Everything a command needs once flags, file and environment are merged.
pub struct Context {
    pub cfg: RunConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub manifest: RunManifest,
}

impl Context {
    fn resolve(cmd: &Command) -> Result<Self> {
        let common = cmd.common();
        let mut cfg = match &common.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Command::Eval {
            episodes: Some(n), ..
        } = cmd
        {
            cfg.eval.episodes = *n;
        }
        if let Some(out) = &common.out {
            cfg.paths.out_dir = out.clone();
        }
        cfg.validate()?;
        let env_seed = std::env::var(SEED_ENV).ok();
        let seed = resolve_seed(common.seed, env_seed.as_deref(), cfg.seed)?;
        cfg.seed = seed;
        let out_dir = cfg.paths.out_dir.clone();
        fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
        let manifest = RunManifest::new(cmd.name(), seed, &cfg)?;
        Ok(Context {
            cfg,
            seed,
            out_dir,
            manifest,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn finish(self) -> Result<()> {
        let path = self.path(&format!("{}.manifest.toml", self.manifest.command));
        self.manifest.write(&path)
    }
}

pub fn execute(cmd: &Command) -> Result<()> {
    let mut ctx = Context::resolve(cmd)?;
    let mut env = ctx.cfg.env.build()?;
    info!("{} seed={} config={}", cmd.name(), ctx.seed, ctx.manifest.config_hash);
    match cmd {
        Command::Collect(_) => collect(&mut ctx, &mut *env)?,
        Command::RecordExpert(_) => record(&mut ctx, &mut *env)?,
        Command::TrainTspn { data, heldout, .. } => {
            train_tspn_cmd(&mut ctx, &mut *env, data.as_deref(), heldout.as_deref())?
        }
        Command::TrainPolicy { tspn, expert, .. } => train_policy_cmd(&mut ctx, &mut *env, tspn, expert.as_deref())?,
        Command::Eval { checkpoint, .. } => eval(&mut ctx, &*env, checkpoint)?,
        Command::Rollout {
            checkpoint, episode, ..
        } => rollout(&mut ctx, &*env, checkpoint, *episode)?,
        Command::Sensitivity(_) => sensitivity(&mut ctx)?,
    }
    ctx.finish()
}

fn collect(ctx: &mut Context, env: &mut dyn Environment) -> Result<()> {
    let c = ctx.cfg.collection.clone();
    let train = random_transitions(env, c.temperature, c.n_steps, stage_seed(ctx.seed, stage::COLLECT))?;
    let path = ctx.path(TRANSITIONS_FILE);
    save_dataset(&Dataset::Transitions(train), &path)?;
    ctx.manifest.output(&path)?;
    if c.heldout_steps > 0 {
        let held = random_transitions(env, c.temperature, c.heldout_steps, stage_seed(ctx.seed, stage::HELDOUT))?;
        let path = ctx.path(HELDOUT_FILE);
        save_dataset(&Dataset::Transitions(held), &path)?;
        ctx.manifest.output(&path)?;
    }
    Ok(())
}

fn record(ctx: &mut Context, env: &mut dyn Environment) -> Result<()> {
    let demos = record_demonstrations(env, &ctx.cfg.expert, ctx.seed)?;
    let path = ctx.path(EXPERT_FILE);
    save_dataset(&Dataset::Trajectories(demos), &path)?;
    ctx.manifest.output(&path)
}

fn load_transitions(ctx: &mut Context, path: &Path) -> Result<ReplayBuffer> {
    ctx.manifest.input(path)?;
    match load_dataset(path)? {
        Dataset::Transitions(b) => Ok(b),
        Dataset::Trajectories(_) => Err(Error::Format(format!(
            "{} holds expert trajectories, not transitions",
            path.display()
        ))),
    }
}

fn load_trajectories(ctx: &mut Context, path: &Path) -> Result<Vec<ExpertTrajectory>> {
    ctx.manifest.input(path)?;
    match load_dataset(path)? {
        Dataset::Trajectories(t) => Ok(t),
        Dataset::Transitions(_) => Err(Error::Format(format!(
            "{} holds transitions, not expert trajectories",
            path.display()
        ))),
    }
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn save_net(ctx: &mut Context, net: &Network, name: &str) -> Result<()> {
    let path = ctx.path(name);
    checkpoint::save(net, &ctx.manifest.config_hash, &path)?;
    ctx.manifest.output(&path)
}

fn train_tspn_cmd(
    ctx: &mut Context,
    env: &mut dyn Environment,
    data: Option<&Path>,
    heldout: Option<&Path>,
) -> Result<()> {
    let (tspn, report) = match data {
        None => phase1(env, &ctx.cfg.train(), ctx.seed)?,
        Some(p) => {
            let train = load_transitions(ctx, p)?;
            let held = heldout.map(|h| load_transitions(ctx, h)).transpose()?;
            train_tspn(&train, held.as_ref(), &ctx.cfg.phase1, stage_seed(ctx.seed, stage::TSPN))?
        }
    };
    if let Some(m) = report.final_heldout_mse() {
        info!("phase 1 held-out mse {m:.3e}");
    }
    save_net(ctx, &Network::Tspn(tspn), TSPN_FILE)?;
    let log = ctx.path("phase1.csv");
    write_rows(&log, &report.epochs)?;
    ctx.manifest.output(&log)
}

fn train_policy_cmd(ctx: &mut Context, env: &mut dyn Environment, tspn_path: &Path, expert: Option<&Path>) -> Result<()> {
    ctx.manifest.input(tspn_path)?;
    let tspn = checkpoint::load_tspn(tspn_path)?;
    if !tspn.finalized {
        return Err(Error::config(format!(
            "{} is not a finalized phase-1 checkpoint",
            tspn_path.display()
        )));
    }
    let demos = match expert {
        Some(p) => load_trajectories(ctx, p)?,
        None => record_demonstrations(env, &ctx.cfg.expert, ctx.seed)?,
    };
    let (policy, after, report) = train_policy(env, &demos, &tspn, &ctx.cfg.phase2, stage_seed(ctx.seed, stage::POLICY))?;
    info!("phase 2 best epoch {}", report.best_epoch);
    save_net(ctx, &Network::Policy(policy), POLICY_FILE)?;
    save_net(ctx, &Network::Tspn(after), TSPN_AFTER_FILE)?;
    let log = ctx.path("phase2.csv");
    write_rows(&log, &report.epochs)?;
    ctx.manifest.output(&log)
}

fn load_eval_policy(ctx: &mut Context, env: &dyn Environment, path: &Path) -> Result<Policy> {
    ctx.manifest.input(path)?;
    let policy = checkpoint::load_policy(path)?;
    if !policy.finalized {
        return Err(Error::config(format!("{} is not a finalized policy", path.display())));
    }
    if policy.arch.state_shape != env.state_shape() || policy.arch.blocks != env.action_spec().blocks() {
        return Err(Error::config(format!(
            "{} was trained for a different environment",
            path.display()
        )));
    }
    Ok(policy)
}

/// Evaluate `policy` and the expert on the same starts; returns the summary.
pub fn evaluate(env: &dyn Environment, policy: &Policy, episodes: usize, seed: u64, out: &Path) -> Result<EvalSummary> {
    let records = run_episodes(env, policy, episodes, stage_seed(seed, stage::EVAL))?;
    let expert = expert_reference(env, episodes, seed)?;
    let summary = summarize(&returns_of(&records), iqm(&returns_of(&expert))?)?;
    write_episode_csv(&out.join("episodes.csv"), &records)?;
    write_episode_csv(&out.join("expert_episodes.csv"), &expert)?;
    write_summary_csv(&out.join("summary.csv"), &summary)?;
    Ok(summary)
}

fn eval(ctx: &mut Context, env: &dyn Environment, path: &Path) -> Result<()> {
    let policy = load_eval_policy(ctx, env, path)?;
    let summary = evaluate(env, &policy, ctx.cfg.eval.episodes, ctx.seed, &ctx.out_dir)?;
    for f in ["episodes.csv", "expert_episodes.csv", "summary.csv"] {
        ctx.manifest.output(&ctx.path(f))?;
    }
    let json = serde_json::to_string(&summary).map_err(|e| Error::Format(e.to_string()))?;
    println!("{json}");
    Ok(())
}

#[derive(Serialize)]
struct RolloutRow {
    step: usize,
    x: f64,
    y: f64,
    heading: f64,
    speed: f64,
    e_y: f64,
    e_phi_deg: f64,
    action: String,
    reward: f64,
}

fn rollout(ctx: &mut Context, env: &dyn Environment, path: &Path, episode: u64) -> Result<()> {
    let policy = load_eval_policy(ctx, env, path)?;
    let mut e = env.box_clone();
    let s = episode_seed(stage_seed(ctx.seed, stage::EVAL), episode);
    let start = e.sample_start(s);
    let mut state = e.reset(s, Some(start))?;
    let mut rows = Vec::new();
    loop {
        let a = policy.act_greedy(&state)?;
        let r = e.step(&Action::Discrete(a.clone()))?;
        let p = e.pose();
        rows.push(RolloutRow {
            step: rows.len(),
            x: p.x,
            y: p.y,
            heading: p.heading,
            speed: r.info.speed,
            e_y: r.info.e_y,
            e_phi_deg: r.info.e_phi_deg,
            action: a.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("-"),
            reward: e.eval_reward(&r.info),
        });
        if r.done {
            break;
        }
        state = r.state;
    }
    let out = ctx.path("rollout.csv");
    write_rows(&out, &rows)?;
    ctx.manifest.output(&out)
}

#[derive(Serialize)]
struct SensitivityRow {
    label: String,
    n_episodes: Option<usize>,
    max: Option<f64>,
    mean: Option<f64>,
    iqm: Option<f64>,
    normalized_iqm: Option<f64>,
    error: Option<String>,
}

fn sensitivity(ctx: &mut Context) -> Result<()> {
    let cells = sensitivity_suite(&ctx.cfg.pipeline(), ctx.seed)?;
    let rows: Vec<SensitivityRow> = cells
        .into_iter()
        .map(|c| SensitivityRow {
            label: c.label,
            n_episodes: c.summary.as_ref().map(|s| s.n_episodes),
            max: c.summary.as_ref().map(|s| s.max),
            mean: c.summary.as_ref().map(|s| s.mean),
            iqm: c.summary.as_ref().map(|s| s.iqm),
            normalized_iqm: c.summary.as_ref().map(|s| s.normalized_iqm),
            error: c.error,
        })
        .collect();
    let out = ctx.path("sensitivity.csv");
    write_rows(&out, &rows)?;
    ctx.manifest.output(&out)
}
