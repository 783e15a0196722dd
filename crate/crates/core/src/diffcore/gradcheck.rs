use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{value_and_grad, Bound, Tape, Var};
use super::ParamSet;
use crate::error::Result;

/// Magnitude below which the absolute difference is reported instead of the relative one.
pub const ABS_FALLBACK: f64 = 1e-6;

/// What to do with coordinates whose difference stencil crosses a ReLU kink.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kinks {
    Include,
    /// Leave out coordinates where some ReLU input changes sign between
    /// `x - h`, `x` and `x + h`; the derivative is not defined across them.
    Skip,
}

/// How the numeric derivative is formed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FdMethod {
    /// One central difference at `step`.
    Central,
    /// Ridders' extrapolation of central differences at `step`, `step / 2`, ...
    /// (at most `levels` of them), keeping the entry with the smallest internal
    /// error estimate. Resolves both steep and nearly flat coordinates.
    Ridders { levels: usize },
}

#[derive(Clone, Copy, Debug)]
pub struct FdOptions {
    pub step: f64,
    pub method: FdMethod,
    pub kinks: Kinks,
    /// Probe at most this many randomly chosen coordinates of each entry.
    pub per_param: usize,
    pub seed: u64,
}

impl FdOptions {
    pub fn central(step: f64) -> Self {
        FdOptions {
            step,
            method: FdMethod::Central,
            kinks: Kinks::Include,
            per_param: usize::MAX,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FdReport {
    /// Worst relative error over every checked coordinate; `inf` if any difference was non-finite.
    pub max_rel_error: f64,
    /// Names of the parameters that were probed (frozen ones are excluded).
    pub checked: Vec<String>,
    pub coords: usize,
    /// Coordinates left out because every stencil crossed a kink.
    pub skipped: usize,
}

fn eval<F>(computation: &F, params: &ParamSet) -> Result<(f64, Vec<bool>)>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = tape.bind(params);
    let out = computation(&mut tape, &bound)?;
    Ok((tape.value(out).data()[0], tape.relu_pattern()))
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    if !analytic.is_finite() || !numeric.is_finite() {
        return f64::INFINITY;
    }
    let scale = analytic.abs().max(numeric.abs());
    let diff = (analytic - numeric).abs();
    if scale < ABS_FALLBACK {
        diff
    } else {
        diff / scale
    }
}

/// Compare reverse-mode gradients against central differences on every coordinate.
pub fn finite_diff_check<F>(computation: F, params: &ParamSet, step: f64) -> Result<FdReport>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    finite_diff_check_with(computation, params, &FdOptions::central(step))
}

/// Like [`finite_diff_check`] but probes at most `per_param` randomly chosen coordinates of each entry.
pub fn finite_diff_check_sampled<F>(
    computation: F,
    params: &ParamSet,
    step: f64,
    per_param: usize,
    seed: u64,
) -> Result<FdReport>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let opts = FdOptions {
        per_param,
        seed,
        ..FdOptions::central(step)
    };
    finite_diff_check_with(computation, params, &opts)
}

pub fn finite_diff_check_with<F>(computation: F, params: &ParamSet, opts: &FdOptions) -> Result<FdReport>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let (_, grads) = value_and_grad(params, |t, b| computation(t, b))?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    let mut checked = Vec::new();
    let mut coords = 0;
    let mut skipped = 0;
    let base = match opts.kinks {
        Kinks::Skip => Some(eval(&computation, params)?.1),
        Kinks::Include => None,
    };
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        if params.is_frozen(&name) {
            continue;
        }
        let n = params.get(&name)?.len();
        let idx: Vec<usize> = if opts.per_param >= n {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, opts.per_param).into_vec();
            v.sort_unstable();
            v
        };
        for i in idx {
            let orig = params.get(&name)?.data()[i];
            // central difference at `h`, or None if the stencil crosses a kink
            let mut central = |h: f64| -> Result<Option<f64>> {
                probe.get_mut(&name)?.data_mut()[i] = orig + h;
                let (up, p_up) = eval(&computation, &probe)?;
                probe.get_mut(&name)?.data_mut()[i] = orig - h;
                let (down, p_down) = eval(&computation, &probe)?;
                probe.get_mut(&name)?.data_mut()[i] = orig;
                if let Some(b) = &base {
                    if &p_up != b || &p_down != b {
                        return Ok(None);
                    }
                }
                Ok(Some((up - down) / (2.0 * h)))
            };
            let numeric = match opts.method {
                FdMethod::Central => central(opts.step)?,
                FdMethod::Ridders { levels } => ridders(&mut central, opts.step, levels.max(2))?,
            };
            let Some(numeric) = numeric else {
                skipped += 1;
                continue;
            };
            let analytic = grads.get(&name)?.data()[i];
            worst = worst.max(relative_error(analytic, numeric));
            coords += 1;
        }
        checked.push(name);
    }
    Ok(FdReport {
        max_rel_error: worst,
        checked,
        coords,
        skipped,
    })
}

/// Ridders' method with step ratio 2. Starts at the largest halving of `h0`
/// whose stencil is kink-free; `None` if there is none among `levels` halvings.
fn ridders(central: &mut dyn FnMut(f64) -> Result<Option<f64>>, h0: f64, levels: usize) -> Result<Option<f64>> {
    const CON2: f64 = 4.0;
    const SAFE: f64 = 2.0;
    let mut h = h0;
    let mut first = None;
    for _ in 0..levels {
        if let Some(d) = central(h)? {
            first = Some(d);
            break;
        }
        h /= 2.0;
    }
    let Some(d0) = first else {
        return Ok(None);
    };
    let mut prev = vec![d0];
    let mut best = d0;
    let mut err = f64::INFINITY;
    for _ in 1..levels {
        h /= 2.0;
        let Some(d) = central(h)? else {
            break;
        };
        let mut row = vec![d];
        let mut fac = CON2;
        for j in 1..=prev.len() {
            let ext = (row[j - 1] * fac - prev[j - 1]) / (fac - 1.0);
            fac *= CON2;
            let e = (ext - row[j - 1]).abs().max((ext - prev[j - 1]).abs());
            row.push(ext);
            if e <= err {
                err = e;
                best = ext;
            }
        }
        let k = row.len() - 1;
        let diverging = (row[k] - prev[k - 1]).abs() >= SAFE * err;
        prev = row;
        if diverging {
            break;
        }
    }
    Ok(Some(best))
}
