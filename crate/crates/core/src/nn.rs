//! Building blocks shared by the two networks: initialization, layer helpers
//! on the tape, and per-feature state standardization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Array, Bound, ConvGeom, NormKind, ParamSet, Tape, Var};
use crate::error::{Error, Result};

/// Uniform Glorot initialization.
pub fn glorot<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize) -> Array {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Array::new(shape.to_vec(), data).expect("init shape")
}

pub(crate) fn insert_dense<R: Rng>(
    p: &mut ParamSet,
    rng: &mut R,
    name: &str,
    out: usize,
    inp: usize,
    bias: bool,
) -> Result<()> {
    p.insert(format!("{name}.w"), glorot(rng, &[out, inp], inp, out))?;
    if bias {
        p.insert(format!("{name}.b"), Array::zeros(&[out]))?;
    }
    Ok(())
}

pub(crate) fn insert_norm(p: &mut ParamSet, name: &str, channels: usize) -> Result<()> {
    p.insert(format!("{name}.g"), Array::full(&[channels], 1.0))?;
    p.insert(format!("{name}.s"), Array::zeros(&[channels]))?;
    Ok(())
}

/// Kernel extent for a stride-2, padding-1 layer: 4 on even inputs, 3 on odd
/// ones, so that the mirrored transposed convolution restores the input size.
pub fn stride2_kernel(extent: usize) -> usize {
    if extent % 2 == 0 {
        4
    } else {
        3
    }
}

pub fn stride2_out(extent: usize) -> usize {
    (extent + 2 - stride2_kernel(extent)) / 2 + 1
}

pub(crate) const DOWN: ConvGeom = ConvGeom {
    stride: 2,
    padding: 1,
};

pub(crate) fn dense(t: &mut Tape, b: &Bound, x: Var, name: &str) -> Result<Var> {
    let w = b.get(&format!("{name}.w"))?;
    let bias = b.get(&format!("{name}.b"))?;
    t.dense(x, w, Some(bias))
}

pub(crate) fn norm(t: &mut Tape, b: &Bound, x: Var, name: &str, kind: NormKind) -> Result<Var> {
    let g = b.get(&format!("{name}.g"))?;
    let s = b.get(&format!("{name}.s"))?;
    t.normalize(x, kind, g, s)
}

/// Per-feature affine standardization `(x - mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const MIN_STD: f64 = 1e-6;

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Standardizer {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Fit per-feature mean and standard deviation over `rows`.
    pub fn fit<'a>(rows: impl Iterator<Item = &'a [f64]>) -> Result<Self> {
        let mut n = 0usize;
        let mut sum: Vec<f64> = vec![];
        let mut sq: Vec<f64> = vec![];
        let mut all: Vec<&[f64]> = vec![];
        for r in rows {
            if sum.is_empty() {
                sum = vec![0.0; r.len()];
                sq = vec![0.0; r.len()];
            } else if r.len() != sum.len() {
                return Err(Error::shape("rows of different width"));
            }
            for (s, v) in sum.iter_mut().zip(r) {
                *s += v;
            }
            all.push(r);
            n += 1;
        }
        if n == 0 {
            return Err(Error::Data("cannot fit statistics on no rows".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        for r in &all {
            for ((q, v), m) in sq.iter_mut().zip(r.iter()).zip(&mean) {
                *q += (v - m) * (v - m);
            }
        }
        let std = sq
            .iter()
            .map(|q| (q / n as f64).sqrt().max(MIN_STD))
            .collect();
        Ok(Standardizer { mean, std })
    }

    /// Standardize an array whose trailing elements repeat with period `dim`.
    pub fn apply(&self, x: &Array) -> Array {
        let d = self.dim();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % d]) / self.std[i % d])
            .collect();
        Array::new(x.shape().to_vec(), data).expect("same shape")
    }

    pub fn invert(&self, x: &Array) -> Array {
        let d = self.dim();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.std[i % d] + self.mean[i % d])
            .collect();
        Array::new(x.shape().to_vec(), data).expect("same shape")
    }

    pub fn to_params(&self, p: &mut ParamSet) -> Result<()> {
        p.insert("stats.mean", Array::from_vec(self.mean.clone()))?;
        p.insert("stats.std", Array::from_vec(self.std.clone()))?;
        Ok(())
    }

    pub fn from_params(p: &ParamSet) -> Result<Self> {
        Ok(Standardizer {
            mean: p.get("stats.mean")?.data().to_vec(),
            std: p.get("stats.std")?.data().to_vec(),
        })
    }

    /// Round the statistics to 32-bit values so they survive a checkpoint roundtrip.
    pub fn quantize_f32(&mut self) {
        for v in self.mean.iter_mut().chain(self.std.iter_mut()) {
            *v = *v as f32 as f64;
        }
    }
}

/// Stack equally shaped arrays along a new leading batch axis.
pub fn stack(items: &[&Array]) -> Result<Array> {
    let first = items
        .first()
        .ok_or_else(|| Error::shape("cannot stack an empty batch"))?;
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(items.len() * first.len());
    for a in items {
        if a.shape() != first.shape() {
            return Err(Error::shape(format!(
                "batch items differ: {:?} vs {:?}",
                a.shape(),
                first.shape()
            )));
        }
        data.extend_from_slice(a.data());
    }
    Array::new(shape, data)
}

/// Split the leading axis of a batch back into separate arrays.
pub fn unstack(x: &Array) -> Vec<Array> {
    let n = x.shape()[0];
    let inner = x.shape()[1..].to_vec();
    let len = x.len() / n.max(1);
    (0..n)
        .map(|i| {
            let shape = if inner.is_empty() { vec![1] } else { inner.clone() };
            Array::new(shape, x.data()[i * len..(i + 1) * len].to_vec()).expect("slice")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stride2_roundtrip_sizes() {
        for n in [24, 32, 159, 255, 12, 7] {
            let k = stride2_kernel(n);
            let m = stride2_out(n);
            assert_eq!((m - 1) * 2 - 2 + k, n, "extent {n}");
        }
    }

    #[test]
    fn standardizer_fit_and_invert() {
        let rows = [vec![1.0, 10.0], vec![3.0, 10.0]];
        let s = Standardizer::fit(rows.iter().map(|r| r.as_slice())).unwrap();
        assert_eq!(s.mean, vec![2.0, 10.0]);
        assert_eq!(s.std, vec![1.0, MIN_STD]);
        let x = Array::from_vec(vec![3.0, 10.0]);
        let z = s.apply(&x);
        assert_eq!(z.data(), &[1.0, 0.0]);
        assert_eq!(s.invert(&z).data(), x.data());
    }
}
