//! Target state prediction network: an encoder/decoder that predicts the next
//! state from the current state and an (exact or relaxed) action encoding.
//!
//! Parameter layout, by name prefix:
//! `in` input embedding, `c1`/`c2` feature extraction, `a1`/`a2` action
//! injection, `u1`/`u2` feature reconstruction, `out` spatial decoding.
//! Normalized layers carry a gain `.g` and shift `.s` next to `.w`/`.b`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{sigmoid, Array, Bound, ConvGeom, NormKind, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, glorot, insert_dense, insert_norm, stride2_kernel, stride2_out, Standardizer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Mlp,
    Conv,
}

/// Layers kept frozen in partial-freeze mode.
pub const PARTIAL_FREEZE_PREFIXES: [&str; 3] = ["in.", "c1.", "c2."];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TspnArch {
    pub variant: Variant,
    pub state_shape: Vec<usize>,
    pub action_dim: usize,
    /// MLP: embedding, extraction-1, extraction-2 widths. Conv: channel counts.
    pub widths: [usize; 3],
    pub norm: NormKind,
}

impl TspnArch {
    pub fn mlp(state_dim: usize, action_dim: usize) -> Self {
        TspnArch {
            variant: Variant::Mlp,
            state_shape: vec![state_dim],
            action_dim,
            widths: [128, 64, 32],
            norm: NormKind::Layer,
        }
    }

    pub fn conv(state_shape: &[usize], action_dim: usize) -> Self {
        TspnArch {
            variant: Variant::Conv,
            state_shape: state_shape.to_vec(),
            action_dim,
            widths: [16, 32, 64],
            norm: NormKind::Instance,
        }
    }

    /// Pick the variant from the state rank.
    pub fn for_state(state_shape: &[usize], action_dim: usize) -> Result<Self> {
        match state_shape.len() {
            1 => Ok(Self::mlp(state_shape[0], action_dim)),
            3 => Ok(Self::conv(state_shape, action_dim)),
            _ => Err(Error::shape(format!("no network variant for state {state_shape:?}"))),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self.variant {
            Variant::Mlp => self.state_shape.len() == 1,
            Variant::Conv => self.state_shape.len() == 3 && self.state_shape[1] >= 4 && self.state_shape[2] >= 4,
        };
        if !ok || self.action_dim == 0 || self.widths.contains(&0) {
            return Err(Error::config(format!("invalid tspn architecture {self:?}")));
        }
        Ok(())
    }

    /// Kernel extents `(kh, kw)` of the two stride-2 extraction layers.
    pub fn down_kernels(&self) -> [(usize, usize); 2] {
        let (h, w) = (self.state_shape[1], self.state_shape[2]);
        let (h1, w1) = (stride2_out(h), stride2_out(w));
        [
            (stride2_kernel(h), stride2_kernel(w)),
            (stride2_kernel(h1), stride2_kernel(w1)),
        ]
    }

    /// Shape of the injected feature map for one sample.
    pub fn feature_shape(&self) -> Vec<usize> {
        match self.variant {
            Variant::Mlp => vec![self.widths[2]],
            Variant::Conv => {
                let (h, w) = (self.state_shape[1], self.state_shape[2]);
                vec![self.widths[2], stride2_out(stride2_out(h)), stride2_out(stride2_out(w))]
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Tspn {
    pub arch: TspnArch,
    pub params: ParamSet,
    pub stats: Standardizer,
    /// Set once phase-1 training completes; policy training requires it.
    pub finalized: bool,
}

impl Tspn {
    pub fn init(arch: TspnArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let [e, f1, f2] = arch.widths;
        let a = arch.action_dim;
        match arch.variant {
            Variant::Mlp => {
                let s = arch.state_shape[0];
                insert_dense(&mut p, &mut rng, "in", e, s, true)?;
                insert_dense(&mut p, &mut rng, "c1", f1, e, true)?;
                insert_norm(&mut p, "c1", f1)?;
                insert_dense(&mut p, &mut rng, "c2", f2, f1, true)?;
                insert_norm(&mut p, "c2", f2)?;
                insert_dense(&mut p, &mut rng, "a1", f2, a, false)?;
                insert_dense(&mut p, &mut rng, "a2", f2, a, false)?;
                insert_dense(&mut p, &mut rng, "u1", f1, f2, true)?;
                insert_norm(&mut p, "u1", f1)?;
                insert_dense(&mut p, &mut rng, "u2", e, f1, true)?;
                insert_norm(&mut p, "u2", e)?;
                insert_dense(&mut p, &mut rng, "out", s, e, true)?;
            }
            Variant::Conv => {
                let c = arch.state_shape[0];
                let [(kh1, kw1), (kh2, kw2)] = arch.down_kernels();
                let conv = |rng: &mut ChaCha8Rng, o: usize, i: usize, kh: usize, kw: usize| {
                    glorot(rng, &[o, i, kh, kw], i * kh * kw, o * kh * kw)
                };
                p.insert("in.w", conv(&mut rng, e, c, 5, 5))?;
                p.insert("in.b", Array::zeros(&[e]))?;
                p.insert("c1.w", conv(&mut rng, f1, e, kh1, kw1))?;
                p.insert("c1.b", Array::zeros(&[f1]))?;
                insert_norm(&mut p, "c1", f1)?;
                p.insert("c2.w", conv(&mut rng, f2, f1, kh2, kw2))?;
                p.insert("c2.b", Array::zeros(&[f2]))?;
                insert_norm(&mut p, "c2", f2)?;
                insert_dense(&mut p, &mut rng, "a1", f2, a, false)?;
                insert_dense(&mut p, &mut rng, "a2", f2, a, false)?;
                // transposed kernels are [in, out, kh, kw]
                p.insert("u1.w", conv(&mut rng, f2, f1, kh2, kw2))?;
                p.insert("u1.b", Array::zeros(&[f1]))?;
                insert_norm(&mut p, "u1", f1)?;
                p.insert("u2.w", conv(&mut rng, f1, e, kh1, kw1))?;
                p.insert("u2.b", Array::zeros(&[e]))?;
                insert_norm(&mut p, "u2", e)?;
                p.insert("out.w", conv(&mut rng, c, e, 1, 1))?;
                p.insert("out.b", Array::zeros(&[c]))?;
            }
        }
        let stats = Standardizer::identity(state_dim_for_stats(&arch));
        Ok(Tspn {
            arch,
            params: p,
            stats,
            finalized: false,
        })
    }

    /// Record the forward pass on `tape`. `state` is `[B, ...state_shape]` (or
    /// unbatched) in standardized units; `action` is `[B, A]` (or `[A]`).
    pub fn forward(&self, t: &mut Tape, b: &Bound, state: Var, action: Var) -> Result<Var> {
        tspn_forward(&self.arch, t, b, state, action)
    }

    /// Batched prediction in standardized units, outside of any training tape.
    pub fn predict_std(&self, state: &Array, action: &Array) -> Result<Array> {
        let mut t = Tape::new();
        let mut frozen = self.params.clone();
        frozen.freeze_all();
        let b = t.bind(&frozen);
        let s = t.constant(state.clone());
        let a = t.constant(action.clone());
        let y = self.forward(&mut t, &b, s, a)?;
        Ok(t.value(y).clone())
    }

    /// Mark training complete and freeze every entry.
    pub fn finalize(&mut self) {
        self.params.freeze_all();
        self.finalized = true;
    }

    /// Freeze every entry (full mode) or only the embedding and extraction layers.
    pub fn freeze(&mut self, partial: bool) {
        if partial {
            for (_, p) in self.params.iter_mut() {
                p.frozen = false;
            }
            self.params.freeze_prefixes(&PARTIAL_FREEZE_PREFIXES);
        } else {
            self.params.freeze_all();
        }
    }
}

fn state_dim_for_stats(arch: &TspnArch) -> usize {
    match arch.variant {
        Variant::Mlp => arch.state_shape[0],
        // images are already in [0, 1]; one identity entry per element keeps the
        // standardizer well-defined without altering them
        Variant::Conv => arch.state_shape.iter().product(),
    }
}

pub fn tspn_forward(arch: &TspnArch, t: &mut Tape, b: &Bound, state: Var, action: Var) -> Result<Var> {
    let ss = t.value(state).shape().to_vec();
    let batched = ss.len() == arch.state_shape.len() + 1;
    let core = if batched { &ss[1..] } else { &ss[..] };
    if core != arch.state_shape.as_slice() {
        return Err(Error::shape(format!(
            "tspn expects state {:?}, got {ss:?}",
            arch.state_shape
        )));
    }
    let av = t.value(action).shape().to_vec();
    let want_a: Vec<usize> = if batched {
        vec![ss[0], arch.action_dim]
    } else {
        vec![arch.action_dim]
    };
    if av != want_a {
        return Err(Error::shape(format!("tspn expects action {want_a:?}, got {av:?}")));
    }
    let kind = arch.norm;
    match arch.variant {
        Variant::Mlp => {
            let h0 = nn::dense(t, b, state, "in")?;
            let h0 = t.relu(h0);
            let h1 = mlp_block(t, b, h0, "c1", kind)?;
            let h2 = mlp_block(t, b, h1, "c2", kind)?;
            let h2 = inject(t, b, h2, action)?;
            let g1 = mlp_block(t, b, h2, "u1", kind)?;
            let g0 = mlp_block(t, b, g1, "u2", kind)?;
            nn::dense(t, b, g0, "out")
        }
        Variant::Conv => {
            let same = ConvGeom::new(1, 2);
            let h0 = t.conv2d(state, b.get("in.w")?, b.get("in.b")?, same)?;
            let h0 = t.relu(h0);
            let h1 = conv_block(t, b, h0, "c1", kind, false)?;
            let h2 = conv_block(t, b, h1, "c2", kind, false)?;
            let h2 = inject(t, b, h2, action)?;
            let g1 = conv_block(t, b, h2, "u1", kind, true)?;
            let g0 = conv_block(t, b, g1, "u2", kind, true)?;
            t.conv2d(g0, b.get("out.w")?, b.get("out.b")?, ConvGeom::new(1, 0))
        }
    }
}

fn mlp_block(t: &mut Tape, b: &Bound, x: Var, name: &str, kind: NormKind) -> Result<Var> {
    let y = nn::dense(t, b, x, name)?;
    let y = t.relu(y);
    nn::norm(t, b, y, name, kind)
}

fn conv_block(t: &mut Tape, b: &Bound, x: Var, name: &str, kind: NormKind, up: bool) -> Result<Var> {
    let (w, bias) = (b.get(&format!("{name}.w"))?, b.get(&format!("{name}.b"))?);
    let y = if up {
        t.deconv2d(x, w, bias, nn::DOWN)?
    } else {
        t.conv2d(x, w, bias, nn::DOWN)?
    };
    let y = t.relu(y);
    nn::norm(t, b, y, name, kind)
}

/// `h2 * sigmoid(W_a1 a) + W_a2 a`, with the per-channel terms broadcast spatially.
pub fn inject(t: &mut Tape, b: &Bound, h2: Var, action: Var) -> Result<Var> {
    let m1 = t.dense(action, b.get("a1.w")?, None)?;
    let m1 = t.sigmoid(m1);
    let gated = t.mul_channel(h2, m1)?;
    let m2 = t.dense(action, b.get("a2.w")?, None)?;
    t.add_channel(gated, m2)
}

/// Direct array version of the injection for one sample: `h2` is `[C]` or `[C, H, W]`.
pub fn action_inject(h2: &Array, action: &Array, w_a1: &Array, w_a2: &Array) -> Result<Array> {
    let c = h2.shape()[0];
    if w_a1.shape() != [c, action.len()] || w_a2.shape() != [c, action.len()] {
        return Err(Error::shape(format!(
            "injection weights must be [{c}, {}]",
            action.len()
        )));
    }
    let proj = |w: &Array, ch: usize| -> f64 {
        w.row(ch).iter().zip(action.data()).map(|(a, b)| a * b).sum()
    };
    let inner = h2.len() / c;
    let data = h2
        .data()
        .iter()
        .enumerate()
        .map(|(i, &h)| {
            let ch = i / inner;
            h * sigmoid(proj(w_a1, ch)) + proj(w_a2, ch)
        })
        .collect();
    Array::new(h2.shape().to_vec(), data)
}

/// Mean over all elements of the squared difference.
pub fn tspn_loss(t: &mut Tape, pred: Var, actual: Var) -> Result<Var> {
    t.mse(pred, actual)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_shapes_match_state() {
        for arch in [TspnArch::mlp(18, 10), TspnArch::conv(&[3, 24, 32], 3)] {
            let net = Tspn::init(arch.clone(), 0).unwrap();
            let mut shape = vec![2];
            shape.extend(&arch.state_shape);
            let s = Array::zeros(&shape);
            let mut a = Array::zeros(&[2, arch.action_dim]);
            a.data_mut()[0] = 1.0;
            a.data_mut()[arch.action_dim] = 1.0;
            let y = net.predict_std(&s, &a).unwrap();
            assert_eq!(y.shape(), s.shape());
        }
    }

    #[test]
    fn injection_limits() {
        let h = Array::from_vec(vec![1.0, -2.0, 3.0]);
        let a = Array::from_vec(vec![0.0, 1.0]);
        let zero = Array::zeros(&[3, 2]);
        let half = action_inject(&h, &a, &zero, &zero).unwrap();
        assert_eq!(half.data(), &[0.5, -1.0, 1.5]);
        let big = Array::full(&[3, 2], 60.0);
        let id = action_inject(&h, &a, &big, &zero).unwrap();
        assert!(id.max_abs_diff(&h) < 1e-12);
    }

    #[test]
    fn zero_network_outputs_bias() {
        let mut net = Tspn::init(TspnArch::mlp(4, 3), 1).unwrap();
        for (name, p) in net.params.iter_mut() {
            if name.ends_with(".w") {
                p.value = Array::zeros(p.value.shape());
            }
        }
        net.params.get_mut("out.b").unwrap().data_mut().copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        let s = Array::from_vec(vec![0.3, -1.0, 2.0, 5.0]);
        let a = Array::from_vec(vec![0.0, 1.0, 0.0]);
        let y = net.predict_std(&s, &a).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    }
}
