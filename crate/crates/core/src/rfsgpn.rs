//! Reward-free state-guided policy network. A feature stack Q(s) produces one
//! block of logits per action factor; a Gumbel-Softmax sample of those logits
//! is fed through the frozen TSPN, and the prediction is regressed onto the
//! expert's next state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{value_and_grad, Array, Bound, NormKind, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Standardizer, glorot, insert_dense, insert_norm, stride2_kernel, stride2_out};
use crate::tspn::{Tspn, PARTIAL_FREEZE_PREFIXES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FreezeMode {
    Full,
    Partial,
}

/// What the TSPN receives in the policy loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TspnInput {
    RelaxedSample,
    SoftmaxProbs,
    /// One-hot of the perturbed argmax forward, relaxed-sample gradient backward.
    StraightThrough,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyArch {
    pub state_shape: Vec<usize>,
    pub blocks: Vec<usize>,
    pub hidden: usize,
    pub conv_channels: [usize; 2],
}

impl PolicyArch {
    pub fn new(state_shape: &[usize], blocks: &[usize]) -> Self {
        PolicyArch {
            state_shape: state_shape.to_vec(),
            blocks: blocks.to_vec(),
            hidden: 128,
            conv_channels: [16, 32],
        }
    }

    pub fn action_dim(&self) -> usize {
        self.blocks.iter().sum()
    }

    fn is_image(&self) -> bool {
        self.state_shape.len() == 3
    }

    fn validate(&self) -> Result<()> {
        let rank_ok = matches!(self.state_shape.len(), 1 | 3);
        if !rank_ok || self.blocks.is_empty() || self.blocks.contains(&0) || self.hidden == 0 {
            return Err(Error::config(format!("invalid policy architecture {self:?}")));
        }
        Ok(())
    }

    fn flat_features(&self) -> usize {
        let (h, w) = (self.state_shape[1], self.state_shape[2]);
        self.conv_channels[1] * stride2_out(stride2_out(h)) * stride2_out(stride2_out(w))
    }
}

pub const HEAD_INIT_SCALE: f64 = 0.01;

#[derive(Clone, Debug)]
pub struct Policy {
    pub arch: PolicyArch,
    pub params: ParamSet,
    /// Gumbel-Softmax temperature used in the training loss.
    pub tau_g: f64,
    /// Standardization applied to raw environment states before the network.
    pub stats: Standardizer,
    /// Set once policy training completes.
    pub finalized: bool,
}

impl Policy {
    pub fn init(arch: PolicyArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let hdim = arch.hidden;
        if arch.is_image() {
            let c = arch.state_shape[0];
            let [k1, k2] = arch.conv_channels;
            let (h, w) = (arch.state_shape[1], arch.state_shape[2]);
            let (kh1, kw1) = (stride2_kernel(h), stride2_kernel(w));
            let (kh2, kw2) = (stride2_kernel(stride2_out(h)), stride2_kernel(stride2_out(w)));
            p.insert("q1.w", glorot(&mut rng, &[k1, c, kh1, kw1], c * kh1 * kw1, k1 * kh1 * kw1))?;
            p.insert("q1.b", Array::zeros(&[k1]))?;
            insert_norm(&mut p, "q1", k1)?;
            p.insert("q2.w", glorot(&mut rng, &[k2, k1, kh2, kw2], k1 * kh2 * kw2, k2 * kh2 * kw2))?;
            p.insert("q2.b", Array::zeros(&[k2]))?;
            insert_norm(&mut p, "q2", k2)?;
            insert_dense(&mut p, &mut rng, "q3", hdim, arch.flat_features(), true)?;
            insert_norm(&mut p, "q3", hdim)?;
        } else {
            let s = arch.state_shape[0];
            insert_dense(&mut p, &mut rng, "q1", hdim, s, true)?;
            insert_norm(&mut p, "q1", hdim)?;
            insert_dense(&mut p, &mut rng, "q2", hdim, hdim, true)?;
            insert_norm(&mut p, "q2", hdim)?;
        }
        insert_dense(&mut p, &mut rng, "head", arch.action_dim(), hdim, true)?;
        // a small head keeps the untrained action distribution close to uniform
        let head = p.get_mut("head.w")?;
        *head = head.map(|v| v * HEAD_INIT_SCALE);
        let stats = Standardizer::identity(stats_dim(&arch.state_shape));
        Ok(Policy {
            arch,
            params: p,
            tau_g: 1.0,
            stats,
            finalized: false,
        })
    }

    /// Logits `[B, A]` (or `[A]`) for standardized states.
    pub fn forward(&self, t: &mut Tape, b: &Bound, state: Var) -> Result<Var> {
        policy_forward(&self.arch, t, b, state)
    }

    /// Logits for one raw environment state.
    pub fn logits_raw(&self, state: &Array) -> Result<Array> {
        self.logits(&self.stats.apply(state))
    }

    /// Deterministic action for a raw environment state.
    pub fn act_greedy(&self, state: &Array) -> Result<Vec<usize>> {
        Ok(greedy_action(self.logits_raw(state)?.data(), &self.arch.blocks))
    }

    /// Logits for one standardized state, outside of any training tape.
    pub fn logits(&self, state: &Array) -> Result<Array> {
        let mut t = Tape::new();
        let mut frozen = self.params.clone();
        frozen.freeze_all();
        let b = t.bind(&frozen);
        let s = t.constant(state.clone());
        let y = self.forward(&mut t, &b, s)?;
        Ok(t.value(y).clone())
    }
}

fn stats_dim(shape: &[usize]) -> usize {
    if shape.len() == 1 {
        shape[0]
    } else {
        shape.iter().product()
    }
}

pub fn policy_forward(arch: &PolicyArch, t: &mut Tape, b: &Bound, state: Var) -> Result<Var> {
    let ss = t.value(state).shape().to_vec();
    let batched = ss.len() == arch.state_shape.len() + 1;
    let core = if batched { &ss[1..] } else { &ss[..] };
    if core != arch.state_shape.as_slice() {
        return Err(Error::shape(format!(
            "policy expects state {:?}, got {ss:?}",
            arch.state_shape
        )));
    }
    let block = |t: &mut Tape, x: Var, name: &str| -> Result<Var> {
        let y = nn::dense(t, b, x, name)?;
        let y = nn::norm(t, b, y, name, NormKind::Layer)?;
        Ok(t.relu(y))
    };
    let feat = if arch.is_image() {
        let down = |t: &mut Tape, x: Var, name: &str| -> Result<Var> {
            let y = t.conv2d(x, b.get(&format!("{name}.w"))?, b.get(&format!("{name}.b"))?, nn::DOWN)?;
            let y = nn::norm(t, b, y, name, NormKind::Layer)?;
            Ok(t.relu(y))
        };
        let h = down(t, state, "q1")?;
        let h = down(t, h, "q2")?;
        let flat = if batched {
            vec![ss[0], arch.flat_features()]
        } else {
            vec![arch.flat_features()]
        };
        let h = t.reshape(h, &flat)?;
        block(t, h, "q3")?
    } else {
        let h = block(t, state, "q1")?;
        block(t, h, "q2")?
    };
    nn::dense(t, b, feat, "head")
}

/// Standard Gumbel draws, one per logit.
pub fn gumbel_noise<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            -(-u.ln()).ln()
        })
        .collect()
}

/// `softmax((logits + g) / tau_g)` per block; with `hard`, the forward value is
/// the one-hot of each block's argmax and the gradient flows through the soft
/// vector. `noise` is `[.., A]` like `logits` (pass zeros to suppress it).
pub fn gumbel_softmax(
    t: &mut Tape,
    logits: Var,
    noise: &Array,
    tau_g: f64,
    blocks: &[usize],
    hard: bool,
) -> Result<Var> {
    if !(tau_g > 0.0) {
        return Err(Error::config("Gumbel-Softmax temperature must be positive"));
    }
    let g = t.constant(noise.clone());
    let z = t.add(logits, g)?;
    let z = t.scale(z, 1.0 / tau_g);
    let soft = t.block_softmax(z, blocks)?;
    if !hard {
        return Ok(soft);
    }
    let sv = t.value(soft).clone();
    let hard_v = one_hot_argmax(&sv, blocks);
    t.straight_through(soft, hard_v)
}

fn one_hot_argmax(x: &Array, blocks: &[usize]) -> Array {
    let width: usize = blocks.iter().sum();
    let mut out = vec![0.0; x.len()];
    for (r, row) in x.data().chunks(width).enumerate() {
        let mut off = 0;
        for &n in blocks {
            let k = argmax(&row[off..off + n]);
            out[r * width + off + k] = 1.0;
            off += n;
        }
    }
    Array::new(x.shape().to_vec(), out).expect("shape")
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

/// Plain-array Gumbel-Softmax for one logit row.
pub fn gumbel_softmax_values(logits: &[f64], noise: &[f64], tau_g: f64, blocks: &[usize]) -> Vec<f64> {
    let mut z: Vec<f64> = logits.iter().zip(noise).map(|(l, g)| (l + g) / tau_g).collect();
    let mut off = 0;
    for &n in blocks {
        softmax(&mut z[off..off + n]);
        off += n;
    }
    z
}

pub fn softmax(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in xs.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in xs.iter_mut() {
        *v /= total;
    }
}

/// One categorical draw per block from `softmax(logits / temperature)`. Used only
/// to step environments; it never enters a gradient computation.
pub fn sample_action<R: Rng>(logits: &[f64], blocks: &[usize], temperature: f64, rng: &mut R) -> Vec<usize> {
    let mut out = Vec::with_capacity(blocks.len());
    let mut off = 0;
    for &n in blocks {
        let mut p: Vec<f64> = logits[off..off + n].iter().map(|l| l / temperature).collect();
        softmax(&mut p);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut pick = n - 1;
        for (i, q) in p.iter().enumerate() {
            acc += q;
            if u < acc {
                pick = i;
                break;
            }
        }
        out.push(pick);
        off += n;
    }
    out
}

/// Deterministic per-block argmax action.
pub fn greedy_action(logits: &[f64], blocks: &[usize]) -> Vec<usize> {
    let mut off = 0;
    blocks
        .iter()
        .map(|&n| {
            let k = argmax(&logits[off..off + n]);
            off += n;
            k
        })
        .collect()
}

pub(crate) const POLICY_SCOPE: &str = "pi/";
pub(crate) const TSPN_SCOPE: &str = "tspn/";

/// Check that `tspn`'s freeze mask matches `mode`.
pub fn check_freeze(tspn: &Tspn, mode: FreezeMode) -> Result<()> {
    for (name, p) in tspn.params.iter() {
        let want = match mode {
            FreezeMode::Full => true,
            FreezeMode::Partial => PARTIAL_FREEZE_PREFIXES.iter().any(|pre| name.starts_with(pre)),
        };
        if p.frozen != want {
            return Err(Error::config(format!(
                "tspn entry `{name}` frozen={} does not match {mode:?} freeze mode",
                p.frozen
            )));
        }
    }
    Ok(())
}

/// Record `s_pre = TSPN(s, relaxed(policy(s)))` on a tape whose bound names are
/// scoped with `pi/` and `tspn/`.
pub fn predict_via_frozen_on_tape(
    policy: &Policy,
    tspn: &Tspn,
    t: &mut Tape,
    b: &Bound,
    states: Var,
    noise: &Array,
    input: TspnInput,
) -> Result<Var> {
    let pb = b.scoped(POLICY_SCOPE);
    let tb = b.scoped(TSPN_SCOPE);
    let logits = policy.forward(t, &pb, states)?;
    let blocks = &policy.arch.blocks;
    let relaxed = match input {
        TspnInput::RelaxedSample => gumbel_softmax(t, logits, noise, policy.tau_g, blocks, false)?,
        TspnInput::SoftmaxProbs => t.block_softmax(logits, blocks)?,
        TspnInput::StraightThrough => gumbel_softmax(t, logits, noise, policy.tau_g, blocks, true)?,
    };
    tspn.forward(t, &tb, states, relaxed)
}

/// Joint parameter view used for the policy loss.
pub fn joint_params(policy: &Policy, tspn: &Tspn) -> Result<ParamSet> {
    ParamSet::merged(&[(POLICY_SCOPE, &policy.params), (TSPN_SCOPE, &tspn.params)])
}

/// `s_pre` for standardized `states`, with fixed Gumbel `noise`.
pub fn predict_via_frozen(
    policy: &Policy,
    tspn: &Tspn,
    mode: FreezeMode,
    states: &Array,
    noise: &Array,
    input: TspnInput,
) -> Result<Array> {
    check_freeze(tspn, mode)?;
    let joint = joint_params(policy, tspn)?;
    let mut t = Tape::new();
    let b = t.bind(&joint);
    let s = t.constant(states.clone());
    let y = predict_via_frozen_on_tape(policy, tspn, &mut t, &b, s, noise, input)?;
    Ok(t.value(y).clone())
}

/// Batch of policy-loss inputs: environment states and index-aligned expert
/// next states (both standardized), plus the Gumbel noise for each row.
pub struct PolicyBatch<'a> {
    pub states: &'a Array,
    pub expert_next: &'a Array,
    pub noise: &'a Array,
}

/// Mean squared gap between `s_pre` and the expert next states, with gradients
/// for the policy entries (`pi/...`) and the trainable TSPN entries (`tspn/...`).
pub fn policy_loss_and_grad(
    policy: &Policy,
    tspn: &Tspn,
    mode: FreezeMode,
    batch: &PolicyBatch,
    input: TspnInput,
) -> Result<(f64, ParamSet)> {
    check_freeze(tspn, mode)?;
    if batch.states.shape() != batch.expert_next.shape() {
        return Err(Error::shape(format!(
            "states {:?} and expert targets {:?} are misaligned",
            batch.states.shape(),
            batch.expert_next.shape()
        )));
    }
    let joint = joint_params(policy, tspn)?;
    value_and_grad(&joint, |t, b| {
        let s = t.constant(batch.states.clone());
        let target = t.constant(batch.expert_next.clone());
        let pred = predict_via_frozen_on_tape(policy, tspn, t, b, s, batch.noise, input)?;
        t.mse(pred, target)
    })
}

/// Policy loss value only.
pub fn policy_loss(
    policy: &Policy,
    tspn: &Tspn,
    mode: FreezeMode,
    batch: &PolicyBatch,
    input: TspnInput,
) -> Result<f64> {
    let pred = predict_via_frozen(policy, tspn, mode, batch.states, batch.noise, input)?;
    if pred.shape() != batch.expert_next.shape() {
        return Err(Error::shape("expert targets misaligned with predictions"));
    }
    let n = pred.len() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(batch.expert_next.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}
