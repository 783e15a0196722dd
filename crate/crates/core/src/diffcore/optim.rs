//! Adafactor (factored second moments) and Adam.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{Array, ParamSet};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Adafactor,
    Adam,
}

/// Adafactor constants: explicit learning rate, no relative step, no parameter scaling.
/// First-moment smoothing of the update is off unless set with [`OptimState::with_momentum`].
pub const ADAFACTOR_EPS: f64 = 1e-30;
pub const ADAFACTOR_CLIP: f64 = 1.0;
pub const ADAFACTOR_DECAY: f64 = -0.8;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
enum Slot {
    /// Row and column running means of the squared gradient for a matrix view.
    Factored { rows: usize, cols: usize, row: Vec<f64>, col: Vec<f64> },
    Full { v: Vec<f64> },
    Adam { m: Vec<f64>, v: Vec<f64> },
}

#[derive(Clone, Debug)]
pub struct OptimState {
    algorithm: Algorithm,
    step: u64,
    slots: IndexMap<String, Slot>,
    momentum: f64,
    smoothed: IndexMap<String, Vec<f64>>,
}

/// Matrix view used for factoring: leading dimension by the rest. Vectors are not factored.
fn matrix_view(shape: &[usize]) -> Option<(usize, usize)> {
    if shape.len() < 2 {
        return None;
    }
    let rows = shape[0];
    let cols: usize = shape[1..].iter().product();
    (rows > 1 && cols > 1).then_some((rows, cols))
}

impl OptimState {
    pub fn new(algorithm: Algorithm, params: &ParamSet) -> Self {
        let slots = params
            .iter()
            .map(|(name, p)| {
                let n = p.value.len();
                let slot = match algorithm {
                    Algorithm::Adam => Slot::Adam {
                        m: vec![0.0; n],
                        v: vec![0.0; n],
                    },
                    Algorithm::Adafactor => match matrix_view(p.value.shape()) {
                        Some((rows, cols)) => Slot::Factored {
                            rows,
                            cols,
                            row: vec![0.0; rows],
                            col: vec![0.0; cols],
                        },
                        None => Slot::Full { v: vec![0.0; n] },
                    },
                };
                (name.to_string(), slot)
            })
            .collect();
        OptimState {
            algorithm,
            step: 0,
            slots,
            momentum: 0.0,
            smoothed: IndexMap::new(),
        }
    }

    /// Exponential averaging of Adafactor's clipped updates with coefficient
    /// `beta1` in `[0, 1)`; 0 disables it. Adam keeps its own first moment.
    pub fn with_momentum(mut self, beta1: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta1) {
            return Err(Error::config(format!("momentum must lie in [0, 1), got {beta1}")));
        }
        self.momentum = beta1;
        Ok(self)
    }

    pub fn algorithm(&self) -> Algorithm {
        self.algorithm
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// Apply one update in place. Frozen entries are left bit-identical.
pub fn optimizer_step(
    params: &mut ParamSet,
    grads: &ParamSet,
    state: &mut OptimState,
    algorithm: Algorithm,
    lr: f64,
) -> Result<()> {
    if algorithm != state.algorithm {
        return Err(Error::config(format!(
            "optimizer state was built for {:?}, step requested {:?}",
            state.algorithm, algorithm
        )));
    }
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(Error::config(format!("invalid learning rate {lr}")));
    }
    params.check_compatible(grads)?;
    state.step += 1;
    let t = state.step as f64;
    for ((name, p), (_, g)) in params.iter_mut().zip(grads.iter()) {
        if p.frozen {
            continue;
        }
        let slot = state
            .slots
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("no optimizer slot for `{name}`")))?;
        let gd = g.value.data();
        let update = match slot {
            Slot::Adam { m, v } => {
                let bc1 = 1.0 - ADAM_BETA1.powf(t);
                let bc2 = 1.0 - ADAM_BETA2.powf(t);
                gd.iter()
                    .enumerate()
                    .map(|(i, &gi)| {
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
                        let mh = m[i] / bc1;
                        let vh = v[i] / bc2;
                        mh / (vh.sqrt() + ADAM_EPS)
                    })
                    .collect::<Vec<_>>()
            }
            Slot::Full { v } => {
                let beta = 1.0 - t.powf(ADAFACTOR_DECAY);
                let mut u: Vec<f64> = gd
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| {
                        v[i] = beta * v[i] + (1.0 - beta) * (gi * gi + ADAFACTOR_EPS);
                        gi / v[i].sqrt()
                    })
                    .collect();
                clip_update_rms(&mut u);
                u
            }
            Slot::Factored {
                rows,
                cols,
                row,
                col,
            } => {
                let (rows, cols) = (*rows, *cols);
                let beta = 1.0 - t.powf(ADAFACTOR_DECAY);
                let mut rmean = vec![0.0; rows];
                let mut cmean = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        let sq = gd[r * cols + c] * gd[r * cols + c] + ADAFACTOR_EPS;
                        rmean[r] += sq;
                        cmean[c] += sq;
                    }
                }
                for r in 0..rows {
                    row[r] = beta * row[r] + (1.0 - beta) * rmean[r] / cols as f64;
                }
                for c in 0..cols {
                    col[c] = beta * col[c] + (1.0 - beta) * cmean[c] / rows as f64;
                }
                let row_mean = row.iter().sum::<f64>() / rows as f64;
                let mut u = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        let vhat = row[r] * col[c] / row_mean;
                        u[r * cols + c] = gd[r * cols + c] / vhat.sqrt();
                    }
                }
                clip_update_rms(&mut u);
                u
            }
        };
        let update = if state.momentum > 0.0 && algorithm == Algorithm::Adafactor {
            let b1 = state.momentum;
            let m = state
                .smoothed
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; update.len()]);
            for (mi, ui) in m.iter_mut().zip(&update) {
                *mi = b1 * *mi + (1.0 - b1) * ui;
            }
            m.clone()
        } else {
            update
        };
        for (w, u) in p.value.data_mut().iter_mut().zip(update) {
            *w -= lr * u;
        }
    }
    Ok(())
}

fn clip_update_rms(u: &mut [f64]) {
    let rms = (u.iter().map(|v| v * v).sum::<f64>() / u.len() as f64).sqrt();
    let denom = (rms / ADAFACTOR_CLIP).max(1.0);
    if denom > 1.0 {
        for v in u.iter_mut() {
            *v /= denom;
        }
    }
}

/// Scale all gradients so the global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut ParamSet, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::config(format!("max_norm must be positive, got {max_norm}")));
    }
    for (name, p) in grads.iter() {
        if !p.value.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient in `{name}`")));
        }
    }
    let norm = grads.global_norm();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, p) in grads.iter_mut() {
            for v in p.value.data_mut() {
                *v *= s;
            }
        }
    }
    Ok(norm)
}

/// Convenience for tests and callers holding a single array.
pub fn single(name: &str, value: Array) -> ParamSet {
    let mut p = ParamSet::new();
    p.insert(name, value).expect("fresh set");
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_zero_gradient_barely_moves() {
        let mut p = single("w", Array::from_vec(vec![0.5, -1.25, 2.0]));
        let before = p.clone();
        let g = p.zeros_like();
        let mut st = OptimState::new(Algorithm::Adam, &p);
        for _ in 0..10 {
            optimizer_step(&mut p, &g, &mut st, Algorithm::Adam, 1e-3).unwrap();
        }
        assert!(p.get("w").unwrap().max_abs_diff(before.get("w").unwrap()) <= 1e-8);
        assert_eq!(st.step(), 10);
    }

    #[test]
    fn adam_constant_gradient_displacement_tends_to_lr() {
        let mut p = single("w", Array::from_vec(vec![0.0, 0.0]));
        let g = single("w", Array::from_vec(vec![0.3, -7.0]));
        let mut st = OptimState::new(Algorithm::Adam, &p);
        let lr = 1e-2;
        let mut prev = p.get("w").unwrap().clone();
        for _ in 0..2000 {
            optimizer_step(&mut p, &g, &mut st, Algorithm::Adam, lr).unwrap();
            let cur = p.get("w").unwrap().clone();
            let d = cur.max_abs_diff(&prev);
            prev = cur;
            assert!(d <= lr * 1.0001);
        }
        let w = p.get("w").unwrap().data();
        // after many steps each coordinate has moved ~lr per step against the gradient sign
        assert!((w[0] + 2000.0 * lr).abs() < 1e-3 * 2000.0 * lr + 1e-6);
        assert!((w[1] - 2000.0 * lr).abs() < 1e-3 * 2000.0 * lr + 1e-6);
    }

    #[test]
    fn algorithm_mismatch_is_config_error() {
        let mut p = single("w", Array::from_vec(vec![1.0]));
        let g = p.zeros_like();
        let mut st = OptimState::new(Algorithm::Adam, &p);
        let err = optimizer_step(&mut p, &g, &mut st, Algorithm::Adafactor, 1e-3).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn frozen_entries_are_untouched() {
        let mut p = single("a", Array::from_vec(vec![0.1, 0.2]));
        p.insert("b", Array::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        p.set_frozen("b", true).unwrap();
        let before = p.get("b").unwrap().clone();
        let mut g = p.zeros_like();
        g.get_mut("a").unwrap().data_mut().copy_from_slice(&[1.0, -1.0]);
        g.get_mut("b").unwrap().data_mut().copy_from_slice(&[5.0, 5.0, 5.0, 5.0]);
        for alg in [Algorithm::Adam, Algorithm::Adafactor] {
            let mut st = OptimState::new(alg, &p);
            optimizer_step(&mut p, &g, &mut st, alg, 0.1).unwrap();
            let after = p.get("b").unwrap();
            assert!(before
                .data()
                .iter()
                .zip(after.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn clip_examples() {
        let mut g = single("g", Array::from_vec(vec![0.3, 0.4]));
        clip_global_norm(&mut g, 1.0).unwrap();
        assert_eq!(g.get("g").unwrap().data(), &[0.3, 0.4]);

        let mut g = single("g", Array::from_vec(vec![3.0, 4.0]));
        let n = clip_global_norm(&mut g, 1.0).unwrap();
        assert_eq!(n, 5.0);
        let d = g.get("g").unwrap().data();
        assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);

        let mut g = single("g", Array::from_vec(vec![f64::NAN]));
        assert!(matches!(clip_global_norm(&mut g, 1.0), Err(Error::Numeric(_))));
    }
}
