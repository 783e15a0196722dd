//! End-to-end acceptance gates. Runs as a plain binary so that every gate
//! prints one line in the normal test output:
//!
//!     cargo test --release -p rfrlf-cli --test acceptance            # all gates
//!     cargo test --release -p rfrlf-cli --test acceptance -- 3 5     # a subset

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rfrlf_cli::checkpoint::{encode, Network};
use rfrlf_cli::manifest::file_hash;
use rfrlf_core::collection::{sample_windows_with, ReplayBuffer, Transition};
use rfrlf_core::diffcore::{
    conv2d_forward, deconv2d_forward, dense_forward, finite_diff_check_with, normalize, Array, ConvGeom, LrSchedule,
    NormKind, FdMethod, FdOptions, Kinks, ParamSet, NORM_EPS,
};
use rfrlf_core::envs::Environment;
use rfrlf_core::evalkit::{iqm, returns_of, run_episodes};
use rfrlf_core::rfsgpn::{
    argmax, gumbel_noise, gumbel_softmax_values, joint_params, predict_via_frozen_on_tape, FreezeMode, Policy,
    PolicyArch, TspnInput,
};
use rfrlf_core::trainer::{
    epsilon_schedule, expert_reference, phase1, record_demonstrations, sensitivity_suite, stage, stage_seed,
    train_policy, PipelineConfig,
};
use rfrlf_core::tspn::{tspn_loss, Tspn, TspnArch, PARTIAL_FREEZE_PREFIXES};

const SEED: u64 = 7;

type Outcome = Result<String, String>;

fn gate(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err<E: std::fmt::Debug>(e: E) -> String {
    format!("{e:?}")
}

// ---------------------------------------------------------------- 1

fn jitter(p: &mut ParamSet, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, e) in p.iter_mut() {
        for v in e.value.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

fn one_hots(rows: usize, blocks: &[usize], rng: &mut ChaCha8Rng) -> Array {
    let width: usize = blocks.iter().sum();
    let mut v = vec![0.0; rows * width];
    for r in 0..rows {
        let mut off = 0;
        for &n in blocks {
            v[r * width + off + rng.gen_range(0..n)] = 1.0;
            off += n;
        }
    }
    Array::new(vec![rows, width], v).unwrap()
}

/// Small instance `i` of one variant: policy, predictor, state shape, blocks.
fn instance(conv: bool, i: u64) -> (Policy, Tspn, Vec<usize>, Vec<usize>) {
    let (shape, blocks) = if conv {
        (vec![2, 8, 8], vec![3])
    } else {
        (vec![4], vec![3, 2])
    };
    let a: usize = blocks.iter().sum();
    let arch = if conv {
        TspnArch {
            widths: [3, 4, 3],
            ..TspnArch::conv(&shape, a)
        }
    } else {
        TspnArch {
            widths: [6, 5, 4],
            ..TspnArch::mlp(4, a)
        }
    };
    let mut tspn = Tspn::init(arch, 1000 + i).unwrap();
    jitter(&mut tspn.params, 2000 + i);
    let parch = PolicyArch {
        hidden: if conv { 5 } else { 6 },
        conv_channels: [2, 3],
        ..PolicyArch::new(&shape, &blocks)
    };
    let mut policy = Policy::init(parch, 3000 + i).unwrap();
    jitter(&mut policy.params, 4000 + i);
    (policy, tspn, shape, blocks)
}

/// Extrapolated central differences from a 1e-3 step down to 1e-3 / 128,
/// probed only where no ReLU input changes sign across the stencil.
fn fd_options() -> FdOptions {
    FdOptions {
        method: FdMethod::Ridders { levels: 8 },
        kinks: Kinks::Skip,
        ..FdOptions::central(1e-3)
    }
}

fn gradient_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = [0.0f64; 4];
    let (mut coords, mut skipped) = (0, 0);
    for (v, conv) in [false, true].into_iter().enumerate() {
        for i in 0..20 {
            let (policy, mut tspn, shape, blocks) = instance(conv, i);
            let rows = 2;
            let mut bshape = vec![rows];
            bshape.extend(&shape);
            let s = uniform(&bshape, &mut rng);
            let target = uniform(&bshape, &mut rng);
            let acts = one_hots(rows, &blocks, &mut rng);

            let rep = finite_diff_check_with(
                |t, b| {
                    let sv = t.constant(s.clone());
                    let av = t.constant(acts.clone());
                    let y = tspn.forward(t, b, sv, av)?;
                    let z = t.constant(target.clone());
                    tspn_loss(t, y, z)
                },
                &tspn.params,
                &fd_options(),
            )
            .map_err(err)?;
            worst[v] = worst[v].max(rep.max_rel_error);
            coords += rep.coords;
            skipped += rep.skipped;

            // policy loss through the predictor, alternating full and partial freeze
            tspn.freeze(i % 2 == 1);
            let noise = Array::new(vec![rows, acts.shape()[1]], gumbel_noise(&mut rng, acts.len())).unwrap();
            let joint = joint_params(&policy, &tspn).map_err(err)?;
            let rep = finite_diff_check_with(
                |t, b| {
                    let sv = t.constant(s.clone());
                    let y = predict_via_frozen_on_tape(&policy, &tspn, t, b, sv, &noise, TspnInput::RelaxedSample)?;
                    let z = t.constant(target.clone());
                    t.mse(y, z)
                },
                &joint,
                &fd_options(),
            )
            .map_err(err)?;
            worst[2 + v] = worst[2 + v].max(rep.max_rel_error);
            coords += rep.coords;
            skipped += rep.skipped;
        }
    }
    let max = worst.iter().copied().fold(0.0, f64::max);
    gate(
        max < 1e-4,
        format!(
            "max rel err tspn mlp {:.1e} conv {:.1e}, policy mlp {:.1e} conv {:.1e} over {coords} coords, {skipped} at kinks (< 1e-4)",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

// ---------------------------------------------------------------- 2

/// k/64 with |k| <= 64: every product and short sum is exact in f64.
fn dyadic(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-64i32..=64) as f64 / 64.0).collect()
}

fn f32_vals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0f32..1.0) as f64).collect()
}

fn rel32(got: &[f64], want: &[f64]) -> f64 {
    got.iter()
        .zip(want)
        .map(|(a, b)| ((*a as f32 as f64) - b).abs() / b.abs().max(1.0))
        .fold(0.0, f64::max)
}

struct Geo {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    kh: usize,
    kw: usize,
    s: usize,
    p: usize,
}

fn geo(rng: &mut ChaCha8Rng) -> Geo {
    loop {
        let (s, p) = (rng.gen_range(1..=2), rng.gen_range(0..=1));
        let (kh, kw) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let (h, w) = (rng.gen_range(kh.max(2)..=8), rng.gen_range(kw.max(2)..=8));
        if (h + 2 * p - kh) % s == 0 && (w + 2 * p - kw) % s == 0 {
            return Geo {
                b: rng.gen_range(1..=2),
                c: rng.gen_range(1..=3),
                h,
                w,
                k: rng.gen_range(1..=3),
                kh,
                kw,
                s,
                p,
            };
        }
    }
}

/// Gather loop; `f32_math` accumulates in single precision.
fn conv_oracle(x: &[f64], k: &[f64], bias: &[f64], g: &Geo, f32_math: bool) -> Vec<f64> {
    let oh = (g.h + 2 * g.p - g.kh) / g.s + 1;
    let ow = (g.w + 2 * g.p - g.kw) / g.s + 1;
    let mut out = Vec::with_capacity(g.b * g.k * oh * ow);
    for b in 0..g.b {
        for o in 0..g.k {
            for y in 0..oh {
                for xx in 0..ow {
                    let (mut acc, mut acc32) = (0.0f64, 0.0f32);
                    for c in 0..g.c {
                        for i in 0..g.kh {
                            for j in 0..g.kw {
                                let iy = (y * g.s + i) as isize - g.p as isize;
                                let ix = (xx * g.s + j) as isize - g.p as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                let kv = k[((o * g.c + c) * g.kh + i) * g.kw + j];
                                let xv = x[((b * g.c + c) * g.h + iy as usize) * g.w + ix as usize];
                                acc += kv * xv;
                                acc32 += kv as f32 * xv as f32;
                            }
                        }
                    }
                    out.push(if f32_math {
                        (acc32 + bias[o] as f32) as f64
                    } else {
                        acc + bias[o]
                    });
                }
            }
        }
    }
    out
}

/// Scatter loop for the transposed convolution; kernels are `[in, out, kh, kw]`.
fn deconv_oracle(x: &[f64], k: &[f64], bias: &[f64], g: &Geo, oh: usize, ow: usize, f32_math: bool) -> Vec<f64> {
    let n = g.b * g.k * oh * ow;
    let (mut out, mut out32) = (vec![0.0f64; n], vec![0.0f32; n]);
    for b in 0..g.b {
        for c in 0..g.c {
            for y in 0..g.h {
                for xx in 0..g.w {
                    let xv = x[((b * g.c + c) * g.h + y) * g.w + xx];
                    for o in 0..g.k {
                        for i in 0..g.kh {
                            for j in 0..g.kw {
                                let ty = (y * g.s + i) as isize - g.p as isize;
                                let tx = (xx * g.s + j) as isize - g.p as isize;
                                if ty < 0 || tx < 0 || ty >= oh as isize || tx >= ow as isize {
                                    continue;
                                }
                                let kv = k[((c * g.k + o) * g.kh + i) * g.kw + j];
                                let idx = ((b * g.k + o) * oh + ty as usize) * ow + tx as usize;
                                out[idx] += kv * xv;
                                out32[idx] += kv as f32 * xv as f32;
                            }
                        }
                    }
                }
            }
        }
    }
    (0..n)
        .map(|idx| {
            let o = (idx / (oh * ow)) % g.k;
            if f32_math {
                (out32[idx] + bias[o] as f32) as f64
            } else {
                out[idx] + bias[o]
            }
        })
        .collect()
}

fn norm_oracle(x: &[f64], groups: usize, chan_of: impl Fn(usize) -> usize, gain: &[f64], shift: &[f64]) -> Vec<f64> {
    let len = x.len() / groups;
    let mut out = vec![0.0; x.len()];
    for g in 0..groups {
        let seg = &x[g * len..(g + 1) * len];
        let mut sum = 0.0;
        for v in seg {
            sum += v;
        }
        let mean = sum / len as f64;
        let mut ss = 0.0;
        for v in seg {
            ss += (v - mean) * (v - mean);
        }
        let inv = 1.0 / (ss / len as f64 + NORM_EPS).sqrt();
        for (k, v) in seg.iter().enumerate() {
            let flat = g * len + k;
            let c = chan_of(flat);
            out[flat] = (v - mean) * inv * gain[c] + shift[c];
        }
    }
    out
}

fn layer_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst32 = [0.0f64; 4];
    let mut mismatches = Vec::new();

    for _ in 0..100 {
        let (bt, n, m) = (rng.gen_range(1..=6), rng.gen_range(1..=40), rng.gen_range(1..=40));
        for exact in [true, false] {
            let gen = |rng: &mut ChaCha8Rng, k| if exact { dyadic(rng, k) } else { f32_vals(rng, k) };
            let (x, w, b) = (gen(&mut rng, bt * n), gen(&mut rng, m * n), gen(&mut rng, m));
            let y = dense_forward(
                &Array::new(vec![bt, n], x.clone()).unwrap(),
                &Array::new(vec![m, n], w.clone()).unwrap(),
                Some(&Array::from_vec(b.clone())),
            )
            .map_err(err)?;
            let mut want = Vec::with_capacity(bt * m);
            for r in 0..bt {
                for i in 0..m {
                    if exact {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += w[i * n + j] * x[r * n + j];
                        }
                        want.push(acc + b[i]);
                    } else {
                        let mut acc = 0.0f32;
                        for j in 0..n {
                            acc += w[i * n + j] as f32 * x[r * n + j] as f32;
                        }
                        want.push((acc + b[i] as f32) as f64);
                    }
                }
            }
            if exact && y.data() != want.as_slice() {
                mismatches.push("dense");
            } else if !exact {
                worst32[0] = worst32[0].max(rel32(y.data(), &want));
            }
        }
    }

    for _ in 0..100 {
        let g = geo(&mut rng);
        for exact in [true, false] {
            let gen = |rng: &mut ChaCha8Rng, k| if exact { dyadic(rng, k) } else { f32_vals(rng, k) };
            let x = gen(&mut rng, g.b * g.c * g.h * g.w);
            let k = gen(&mut rng, g.k * g.c * g.kh * g.kw);
            let b = gen(&mut rng, g.k);
            let y = conv2d_forward(
                &Array::new(vec![g.b, g.c, g.h, g.w], x.clone()).unwrap(),
                &Array::new(vec![g.k, g.c, g.kh, g.kw], k.clone()).unwrap(),
                &Array::from_vec(b.clone()),
                ConvGeom::new(g.s, g.p),
            )
            .map_err(err)?;
            let want = conv_oracle(&x, &k, &b, &g, !exact);
            if exact && y.data() != want.as_slice() {
                mismatches.push("conv");
            } else if !exact {
                worst32[1] = worst32[1].max(rel32(y.data(), &want));
            }
        }
    }

    let mut done = 0;
    while done < 100 {
        let g = geo(&mut rng);
        let full_h = (g.h - 1) * g.s + g.kh;
        let full_w = (g.w - 1) * g.s + g.kw;
        if full_h <= 2 * g.p || full_w <= 2 * g.p {
            continue;
        }
        let (oh, ow) = (full_h - 2 * g.p, full_w - 2 * g.p);
        let mut ok = true;
        for exact in [true, false] {
            let gen = |rng: &mut ChaCha8Rng, k| if exact { dyadic(rng, k) } else { f32_vals(rng, k) };
            let x = gen(&mut rng, g.b * g.c * g.h * g.w);
            let k = gen(&mut rng, g.c * g.k * g.kh * g.kw);
            let b = gen(&mut rng, g.k);
            let Ok(y) = deconv2d_forward(
                &Array::new(vec![g.b, g.c, g.h, g.w], x.clone()).unwrap(),
                &Array::new(vec![g.c, g.k, g.kh, g.kw], k.clone()).unwrap(),
                &Array::from_vec(b.clone()),
                ConvGeom::new(g.s, g.p),
            ) else {
                ok = false;
                break;
            };
            let want = deconv_oracle(&x, &k, &b, &g, oh, ow, !exact);
            if exact && y.data() != want.as_slice() {
                mismatches.push("deconv");
            } else if !exact {
                worst32[2] = worst32[2].max(rel32(y.data(), &want));
            }
        }
        if ok {
            done += 1;
        }
    }

    for case in 0..100 {
        let (b, c, h, w) = (rng.gen_range(1..=3), rng.gen_range(1..=4), rng.gen_range(1..=5), rng.gen_range(2..=5));
        let kind = if case % 2 == 0 { NormKind::Layer } else { NormKind::Instance };
        for exact in [true, false] {
            let gen = |rng: &mut ChaCha8Rng, k| if exact { dyadic(rng, k) } else { f32_vals(rng, k) };
            let x = gen(&mut rng, b * c * h * w);
            let gain = gen(&mut rng, c);
            let shift = gen(&mut rng, c);
            let y = normalize(
                &Array::new(vec![b, c, h, w], x.clone()).unwrap(),
                kind,
                &Array::from_vec(gain.clone()),
                &Array::from_vec(shift.clone()),
                NORM_EPS,
            )
            .map_err(err)?;
            let groups = if kind == NormKind::Layer { b } else { b * c };
            let want = norm_oracle(&x, groups, |f| (f / (h * w)) % c, &gain, &shift);
            if exact && y.data() != want.as_slice() {
                mismatches.push("normalize");
            } else if !exact {
                worst32[3] = worst32[3].max(rel32(y.data(), &want));
            }
        }
    }

    let max32 = worst32.iter().copied().fold(0.0, f64::max);
    gate(
        mismatches.is_empty() && max32 <= 1e-6,
        format!(
            "64-bit mismatches {:?}; 32-bit max rel dense {:.1e} conv {:.1e} deconv {:.1e} norm {:.1e} (<= 1e-6), 100 shapes each",
            mismatches, worst32[0], worst32[1], worst32[2], worst32[3]
        ),
    )
}

// ---------------------------------------------------------------- 3, 4, 5

struct Pipeline {
    env: Box<dyn Environment>,
    cfg: PipelineConfig,
    tspn: Tspn,
    initial_mse: f64,
    final_mse: f64,
    phase1_secs: f64,
}

fn run_phase1() -> Result<Pipeline, String> {
    let cfg = PipelineConfig::default();
    let mut env = cfg.env.build().map_err(err)?;
    let t = Instant::now();
    let (tspn, report) = phase1(&mut *env, &cfg.train, SEED).map_err(err)?;
    Ok(Pipeline {
        env,
        cfg,
        tspn,
        initial_mse: report.initial_heldout_mse.unwrap_or(f64::NAN),
        final_mse: report.final_heldout_mse().unwrap_or(f64::NAN),
        phase1_secs: t.elapsed().as_secs_f64(),
    })
}

fn tspn_learning(p: &Pipeline) -> Outcome {
    let ratio = p.initial_mse / p.final_mse;
    gate(
        p.final_mse < 1e-3 && ratio >= 10.0 && p.phase1_secs < 600.0,
        format!(
            "held-out mse {:.2e} (< 1e-3), {:.0}x below init {:.3} (>= 10x), {:.0}s (< 600s)",
            p.final_mse, ratio, p.initial_mse, p.phase1_secs
        ),
    )
}

/// Byte ranges of every checkpoint entry's payload.
fn entry_bytes(bytes: &[u8]) -> Vec<(String, Vec<u8>)> {
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let manifest: serde_json::Value = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
    let mut off = 16 + len;
    let mut out = Vec::new();
    for e in manifest["entries"].as_array().unwrap() {
        let n: usize = e["shape"].as_array().unwrap().iter().map(|d| d.as_u64().unwrap() as usize).product();
        out.push((e["name"].as_str().unwrap().to_string(), bytes[off..off + 4 * n].to_vec()));
        off += 4 * n;
    }
    out
}

fn freeze_invariance(p: &Pipeline, full_after: &Tspn) -> Outcome {
    let hash = "acceptance";
    let before = encode(&Network::Tspn(p.tspn.clone()), hash).map_err(err)?;
    let full = encode(&Network::Tspn(full_after.clone()), hash).map_err(err)?;
    let full_same = before == full;

    let mut pf_cfg = p.cfg.train.phase2.clone();
    pf_cfg.freeze_mode = FreezeMode::Partial;
    let mut env = p.cfg.env.build().map_err(err)?;
    let demos = record_demonstrations(&mut *env, &p.cfg.expert, SEED).map_err(err)?;
    let (_, pf_after, _) =
        train_policy(&*env, &demos, &p.tspn, &pf_cfg, stage_seed(SEED, stage::POLICY)).map_err(err)?;
    let pf = encode(&Network::Tspn(pf_after), hash).map_err(err)?;

    let mut wrong = Vec::new();
    let (mut kept, mut changed) = (0, 0);
    for ((name, a), (name_b, b)) in entry_bytes(&before).into_iter().zip(entry_bytes(&pf)) {
        assert_eq!(name, name_b);
        if name.starts_with("stats.") {
            continue;
        }
        let frozen = PARTIAL_FREEZE_PREFIXES.iter().any(|x| name.starts_with(x));
        match (frozen, a == b) {
            (true, true) => kept += 1,
            (false, false) => changed += 1,
            _ => wrong.push(name),
        }
    }
    gate(
        full_same && wrong.is_empty(),
        format!(
            "full mode checkpoint identical: {full_same}; PF: {kept} frozen layer entries unchanged, {changed} others changed, mismatched {wrong:?}"
        ),
    )
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn reward_free_gate(p: &Pipeline) -> (Outcome, Option<Tspn>) {
    let t = Instant::now();
    let run = || -> Result<(f64, f64, f64, Vec<f64>, Tspn), String> {
        let mut env = p.env.box_clone();
        let demos = record_demonstrations(&mut *env, &p.cfg.expert, SEED).map_err(err)?;
        let n = p.cfg.eval.episodes;
        let expert = returns_of(&expert_reference(&*env, n, SEED).map_err(err)?);
        let (policy, after, _) = train_policy(
            &*env,
            &demos,
            &p.tspn,
            &p.cfg.train.phase2,
            stage_seed(SEED, stage::POLICY),
        )
        .map_err(err)?;
        let eval_seed = stage_seed(SEED, stage::EVAL);
        let trained = returns_of(&run_episodes(&*env, &policy, n, eval_seed).map_err(err)?);
        // same architecture, seed and input scaling, no training
        let mut untrained = Policy::init(policy.arch.clone(), stage_seed(SEED, stage::POLICY)).map_err(err)?;
        untrained.stats = policy.stats.clone();
        let base = returns_of(&run_episodes(&*env, &untrained, n, eval_seed).map_err(err)?);
        let spread: Vec<f64> = (0..10)
            .map(|s| {
                let mut u = Policy::init(policy.arch.clone(), s).unwrap();
                u.stats = policy.stats.clone();
                mean(&returns_of(&run_episodes(&*env, &u, n, eval_seed).unwrap())) / mean(&expert)
            })
            .collect();
        Ok((mean(&trained), mean(&base), mean(&expert), spread, after))
    };
    match run() {
        Ok((trained, base, expert, spread, after)) => {
            let (r, u) = (trained / expert, base / expert);
            let secs = t.elapsed().as_secs_f64() + p.phase1_secs;
            let spread: Vec<String> = spread.iter().map(|v| format!("{v:.2}")).collect();
            (
                gate(
                    r >= 0.70 && u < 0.20 && secs < 1200.0,
                    format!(
                        "trained/expert mean return {r:.3} (>= 0.70), untrained {u:.3} (< 0.20), expert mean {expert:.1}, {secs:.0}s (< 1200s); untrained ratio for init seeds 0-9: [{}]",
                        spread.join(", ")
                    ),
                ),
                Some(after),
            )
        }
        Err(e) => (Err(e), None),
    }
}

// ---------------------------------------------------------------- 6 - 9

fn schedule_exactness() -> Outcome {
    let eps = [
        epsilon_schedule(0.0, 0.9, 0.5, 2.0),
        epsilon_schedule(1.0, 0.9, 0.5, 2.0),
        epsilon_schedule(2.0, 0.9, 0.5, 2.0),
        epsilon_schedule(5.0, 0.9, 0.5, 2.0),
    ];
    let eps_ok = eps[0] == 0.9 && (eps[1] - 0.7).abs() < 1e-15 && eps[2] == 0.5 && eps[3] == 0.5;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let lr = rng.gen_range(1e-5..1e-1);
        let total = rng.gen_range(1..200_000u64);
        let step = rng.gen_range(0..=total);
        let cos = LrSchedule::Cosine { total_steps: total }.rate(lr, step).map_err(err)?;
        let want = lr / 2.0 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos());
        worst = worst.max((cos - want).abs());
        let every = rng.gen_range(1..10_000u64);
        let coeff = rng.gen_range(0.1..1.0);
        let sd = LrSchedule::StepDecay { every, coeff }.rate(lr, step).map_err(err)?;
        let mut want = lr;
        for _ in 0..step / every {
            want *= coeff;
        }
        worst = worst.max((sd - want).abs());
    }
    gate(
        eps_ok && worst <= 1e-12,
        format!("epsilon at epochs 0,1,2,5 = {eps:?}; schedule max abs err {worst:.1e} over 1000 points (<= 1e-12)"),
    )
}

fn window_property() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut windows, mut bad, mut terminals) = (0usize, 0usize, 0usize);
    while windows < 10_000 {
        let n = rng.gen_range(30..300);
        let mut buf = ReplayBuffer::new("toy", &[2], 2, n).map_err(err)?;
        for i in 0..n {
            let done = rng.gen_bool(0.1);
            terminals += done as usize;
            buf.push(Transition {
                state: Array::from_vec(vec![i as f64, 0.0]),
                action: Array::from_vec(vec![1.0, 0.0]),
                next_state: Array::from_vec(vec![i as f64 + 1.0, 0.0]),
                done,
            })
            .map_err(err)?;
        }
        let h = rng.gen_range(2..6);
        let Ok(starts) = sample_windows_with(&buf, 50, h, &mut rng) else {
            continue;
        };
        for s in starts {
            bad += (s..s + h - 1).any(|k| buf.get(k).done) as usize;
            windows += 1;
        }
    }
    gate(
        bad == 0,
        format!("{bad} of {windows} windows hold an interior terminal ({terminals} terminals injected)"),
    )
}

fn simplex_property() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let blocks = [7, 3];
    let mut off_simplex = 0;
    for _ in 0..10_000 {
        let logits: Vec<f64> = (0..10).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let tau = rng.gen_range(0.05..5.0);
        let y = gumbel_softmax_values(&logits, &gumbel_noise(&mut rng, 10), tau, &blocks);
        for (lo, hi) in [(0, 7), (7, 10)] {
            let sum: f64 = y[lo..hi].iter().sum();
            if (sum - 1.0).abs() > 1e-6 || y[lo..hi].iter().any(|&v| !(-1e-6..=1.0 + 1e-6).contains(&v)) {
                off_simplex += 1;
            }
        }
    }
    let n = 10_000;
    let mut agree = 0;
    for _ in 0..n {
        let logits: Vec<f64> = (0..7).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let g = gumbel_noise(&mut rng, 7);
        let y = gumbel_softmax_values(&logits, &g, 0.01, &[7]);
        let z: Vec<f64> = logits.iter().zip(&g).map(|(a, b)| a + b).collect();
        agree += (argmax(&y) == argmax(&z)) as usize;
    }
    let rate = agree as f64 / n as f64;
    gate(
        off_simplex == 0 && rate >= 0.999,
        format!("{off_simplex} of 20000 blocks off the simplex; argmax agreement at tau 0.01 {rate:.4} (>= 0.999)"),
    )
}

fn sort_trim_mean(values: &[f64]) -> f64 {
    // four copies of each value put both quartile cuts on element boundaries
    let mut v: Vec<f64> = values.iter().flat_map(|&x| [x; 4]).collect();
    v.sort_by(f64::total_cmp);
    let n = values.len();
    v[n..3 * n].iter().sum::<f64>() / (2 * n) as f64
}

fn iqm_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..80);
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1e3..1e3)).collect();
        let want = sort_trim_mean(&v);
        worst = worst.max((iqm(&v).map_err(err)? - want).abs() / want.abs().max(1.0));
    }
    let hand = iqm(&[1.0, 2.0, 3.0, 4.0]).map_err(err)?;
    let mut affine: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.gen_range(1..80);
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1e3..1e3)).collect();
        let (a, b) = (rng.gen_range(0.01..100.0), rng.gen_range(-1e3..1e3));
        let w: Vec<f64> = v.iter().map(|x| a * x + b).collect();
        let lhs = iqm(&w).map_err(err)?;
        let rhs = a * iqm(&v).map_err(err)? + b;
        affine = affine.max((lhs - rhs).abs() / rhs.abs().max(1.0));
    }
    gate(
        worst <= 1e-12 && hand == 2.5 && affine <= 1e-9,
        format!("oracle max rel err {worst:.1e} (<= 1e-12) on 1000 lists; [1,2,3,4] -> {hand}; affine max rel err {affine:.1e} on 100 maps"),
    )
}

// ---------------------------------------------------------------- 10

fn sensitivity_robustness() -> Outcome {
    let t = Instant::now();
    let cells = sensitivity_suite(&PipelineConfig::default(), SEED).map_err(err)?;
    let default = cells
        .iter()
        .find(|c| c.label == "default")
        .and_then(|c| c.summary.as_ref())
        .map(|s| s.iqm)
        .ok_or("default cell failed")?;
    let mut ok = true;
    let mut parts = Vec::new();
    for c in &cells {
        match &c.summary {
            Some(s) => {
                let dev = (s.iqm - default).abs() / default.abs();
                ok &= dev <= 0.30;
                parts.push(format!("{} {:.1} ({:+.0}%)", c.label, s.iqm, 100.0 * (s.iqm - default) / default));
            }
            None => {
                ok = false;
                parts.push(format!("{} failed: {}", c.label, c.error.as_deref().unwrap_or("?")));
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    gate(
        ok && secs < 3.0 * 3600.0,
        format!("IQM by cell: {} (each within 30%), {secs:.0}s", parts.join(", ")),
    )
}

// ---------------------------------------------------------------- 11

const SMALL: &str = r#"
seed = 3

[collection]
n_steps = 4000
heldout_steps = 400

[phase1]
epochs = 2
iters_per_epoch = 40
batch = 16

[phase2]
epochs = 2
episodes_per_epoch = 2

[expert]
episodes = 3
max_steps = 80

[eval]
episodes = 6
"#;

fn cli_determinism() -> Outcome {
    let root = tempfile::tempdir().map_err(err)?;
    let cfg = root.path().join("run.toml");
    std::fs::write(&cfg, SMALL).map_err(err)?;
    let cfg = cfg.to_str().unwrap().to_string();
    let run = |name: &str| -> Result<std::path::PathBuf, String> {
        let out = root.path().join(name);
        let o = out.to_str().unwrap().to_string();
        let f = |file: &str| out.join(file).to_str().unwrap().to_string();
        let steps: Vec<Vec<String>> = vec![
            vec!["collect".into()],
            vec!["record-expert".into()],
            vec!["train-tspn".into(), "--data".into(), f("transitions.rfds"), "--heldout".into(), f("heldout.rfds")],
            vec!["train-policy".into(), "--tspn".into(), f("tspn.ck"), "--expert".into(), f("expert.rfds")],
            vec!["eval".into(), "--checkpoint".into(), f("policy.ck")],
            vec!["rollout".into(), "--checkpoint".into(), f("policy.ck")],
            vec!["sensitivity".into()],
        ];
        for args in steps {
            let status = Command::new(env!("CARGO_BIN_EXE_rfrlf"))
                .args(&args)
                .args(["--config", &cfg, "--out", &o])
                .env_remove("RFRLF_SEED")
                .output()
                .map_err(err)?;
            if !status.status.success() {
                return Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&status.stderr)));
            }
        }
        Ok(out)
    };
    let a = run("a")?;
    let b = run("b")?;
    let mut names: BTreeSet<String> = BTreeSet::new();
    for e in std::fs::read_dir(&a).map_err(err)? {
        let name = e.map_err(err)?.file_name().to_string_lossy().into_owned();
        if [".ck", ".csv", ".rfds"].iter().any(|x| name.ends_with(x)) {
            names.insert(name);
        }
    }
    let hash = |dir: &Path, n: &str| file_hash(&dir.join(n)).unwrap_or_default();
    let differing: Vec<&String> = names.iter().filter(|n| hash(&a, n) != hash(&b, n)).collect();
    gate(
        differing.is_empty() && names.len() >= 12,
        format!("{} checkpoints, CSVs and datasets compared across two runs of 7 commands; differing {differing:?}", names.len()),
    )
}

// ----------------------------------------------------------------

fn main() {
    let wanted: BTreeSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |k: usize| wanted.is_empty() || wanted.contains(&k);
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |k: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        if want(k) {
            let t = Instant::now();
            let r = f();
            let line = match &r {
                Ok(d) => format!("criterion {k:>2} PASS {name}: {d}"),
                Err(d) => format!("criterion {k:>2} FAIL {name}: {d}"),
            };
            println!("{line} [{:.1}s]", t.elapsed().as_secs_f64());
            results.push((k, name, r));
        }
    };

    record(1, "gradient fidelity", &mut gradient_fidelity);
    record(2, "layer-oracle equivalence", &mut layer_oracles);
    if want(3) || want(4) || want(5) {
        match run_phase1() {
            Ok(p) => {
                record(3, "TSPN learning gate", &mut || tspn_learning(&p));
                let mut after = None;
                if want(4) || want(5) {
                    record(5, "reward-free end-to-end gate", &mut || {
                        let (o, a) = reward_free_gate(&p);
                        after = a;
                        o
                    });
                }
                record(4, "freeze invariance", &mut || match &after {
                    Some(a) => freeze_invariance(&p, a),
                    None => Err("full-freeze phase 2 did not complete".into()),
                });
            }
            Err(e) => {
                for (k, name) in [(3, "TSPN learning gate"), (4, "freeze invariance"), (5, "reward-free end-to-end gate")] {
                    record(k, name, &mut || Err(format!("phase 1 failed: {e}")));
                }
            }
        }
    }
    record(6, "schedule exactness", &mut schedule_exactness);
    record(7, "data-processor windows", &mut window_property);
    record(8, "simplex and limit properties", &mut simplex_property);
    record(9, "IQM correctness", &mut iqm_correctness);
    record(10, "sensitivity robustness", &mut sensitivity_robustness);
    record(11, "CLI determinism", &mut cli_determinism);

    results.sort_by_key(|r| r.0);
    let failed: Vec<String> = results
        .iter()
        .filter(|r| r.2.is_err())
        .map(|r| format!("{} ({})", r.0, r.1))
        .collect();
    println!(
        "acceptance: {} of {} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        println!("acceptance: failed {}", failed.join(", "));
        std::process::exit(1);
    }
}
