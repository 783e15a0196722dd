//! Batched forward/backward kernels over flat `f64` buffers.
//!
//! Every parallel split writes disjoint output slices and each output value is
//! accumulated in a fixed order, so results do not depend on thread count.

use rayon::prelude::*;

use super::Array;
use crate::error::{Error, Result};

/// Fixed epsilon inside the normalization square root.
pub const NORM_EPS: f64 = 1e-5;

const PAR_MIN: usize = 4096;

/// Split a dense input into (batch, features); a 1-D input is a batch of one.
fn batch_rows(x: &Array) -> Result<(usize, usize)> {
    match x.shape() {
        [n] => Ok((1, *n)),
        [b, n] => Ok((*b, *n)),
        s => Err(Error::shape(format!("dense input must be 1-D or 2-D, got {s:?}"))),
    }
}

/// `out[b, i] = sum_j w[i, j] * x[b, j] + bias[i]`.
pub fn dense_forward(x: &Array, w: &Array, bias: Option<&Array>) -> Result<Array> {
    let (batch, n) = batch_rows(x)?;
    let [m, wn] = *w.shape() else {
        return Err(Error::shape(format!("dense weight must be 2-D, got {:?}", w.shape())));
    };
    if wn != n {
        return Err(Error::shape(format!(
            "dense weight {:?} does not accept input width {n}",
            w.shape()
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [m] {
            return Err(Error::shape(format!("dense bias {:?} != [{m}]", b.shape())));
        }
    }
    let xd = x.data();
    let wd = w.data();
    let mut out = vec![0.0; batch * m];
    let row = |(bi, orow): (usize, &mut [f64])| {
        let xr = &xd[bi * n..(bi + 1) * n];
        for (i, o) in orow.iter_mut().enumerate() {
            let wr = &wd[i * n..(i + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += wr[j] * xr[j];
            }
            *o = acc + bias.map_or(0.0, |b| b.data()[i]);
        }
    };
    if batch * m * n >= PAR_MIN {
        out.par_chunks_mut(m).enumerate().for_each(row);
    } else {
        out.chunks_mut(m).enumerate().for_each(row);
    }
    let shape = if x.ndim() == 1 { vec![m] } else { vec![batch, m] };
    Array::new(shape, out)
}

/// Gradients of [`dense_forward`] given the upstream gradient `dy`.
/// Returns `(dx, dw, dbias)`.
pub fn dense_backward(x: &Array, w: &Array, dy: &Array) -> (Array, Array, Array) {
    let (batch, n) = batch_rows(x).expect("checked in forward");
    let m = w.shape()[0];
    let xd = x.data();
    let wd = w.data();
    let dyd = dy.data();

    let mut dx = vec![0.0; batch * n];
    let dx_row = |(bi, drow): (usize, &mut [f64])| {
        let g = &dyd[bi * m..(bi + 1) * m];
        for (i, &gi) in g.iter().enumerate() {
            if gi == 0.0 {
                continue;
            }
            let wr = &wd[i * n..(i + 1) * n];
            for j in 0..n {
                drow[j] += gi * wr[j];
            }
        }
    };
    let mut dw = vec![0.0; m * n];
    let dw_row = |(i, drow): (usize, &mut [f64])| {
        for bi in 0..batch {
            let gi = dyd[bi * m + i];
            if gi == 0.0 {
                continue;
            }
            let xr = &xd[bi * n..(bi + 1) * n];
            for j in 0..n {
                drow[j] += gi * xr[j];
            }
        }
    };
    if batch * m * n >= PAR_MIN {
        dx.par_chunks_mut(n).enumerate().for_each(dx_row);
        dw.par_chunks_mut(n).enumerate().for_each(dw_row);
    } else {
        dx.chunks_mut(n).enumerate().for_each(dx_row);
        dw.chunks_mut(n).enumerate().for_each(dw_row);
    }
    let mut db = vec![0.0; m];
    for bi in 0..batch {
        for i in 0..m {
            db[i] += dyd[bi * m + i];
        }
    }
    (
        Array::new(x.shape().to_vec(), dx).expect("shape"),
        Array::new(w.shape().to_vec(), dw).expect("shape"),
        Array::from_vec(db),
    )
}

/// Stride and zero-padding shared by both spatial dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn new(stride: usize, padding: usize) -> Self {
        ConvGeom { stride, padding }
    }
}

fn conv_out_dim(input: usize, kernel: usize, g: ConvGeom) -> Result<usize> {
    if g.stride == 0 {
        return Err(Error::shape("stride must be positive"));
    }
    let span = input + 2 * g.padding;
    if span < kernel || (span - kernel) % g.stride != 0 {
        return Err(Error::shape(format!(
            "non-integral conv output: input {input}, kernel {kernel}, stride {}, padding {}",
            g.stride, g.padding
        )));
    }
    Ok((span - kernel) / g.stride + 1)
}

fn deconv_out_dim(input: usize, kernel: usize, g: ConvGeom) -> Result<usize> {
    if g.stride == 0 {
        return Err(Error::shape("stride must be positive"));
    }
    let full = (input - 1) * g.stride + kernel;
    if full <= 2 * g.padding {
        return Err(Error::shape(format!(
            "empty transposed-conv output: input {input}, kernel {kernel}, stride {}, padding {}",
            g.stride, g.padding
        )));
    }
    Ok(full - 2 * g.padding)
}

/// Interpret a feature map as (batch, channels, height, width).
fn image_dims(x: &Array) -> Result<[usize; 4]> {
    match *x.shape() {
        [c, h, w] => Ok([1, c, h, w]),
        [b, c, h, w] => Ok([b, c, h, w]),
        _ => Err(Error::shape(format!(
            "feature map must be 3-D or 4-D, got {:?}",
            x.shape()
        ))),
    }
}

fn kernel_dims(k: &Array) -> Result<[usize; 4]> {
    match *k.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::shape(format!("kernel must be 4-D, got {:?}", k.shape()))),
    }
}

fn shaped_like_input(x: &Array, batch: usize, c: usize, h: usize, w: usize) -> Vec<usize> {
    if x.ndim() == 3 {
        vec![c, h, w]
    } else {
        vec![batch, c, h, w]
    }
}

/// Gather form of the cross-correlation: `out[b,o,y,x] = sum k[o,c,i,j] * in[b,c,y*s-p+i, x*s-p+j]`.
fn correlate(
    input: &[f64],
    [batch, cin, h, w]: [usize; 4],
    kernel: &[f64],
    [kout, kh, kw]: [usize; 3],
    [oh, ow]: [usize; 2],
    g: ConvGeom,
) -> Vec<f64> {
    let plane = oh * ow;
    let mut out = vec![0.0; batch * kout * plane];
    let job = |(idx, oplane): (usize, &mut [f64])| {
        let b = idx / kout;
        let o = idx % kout;
        for c in 0..cin {
            let ibase = (b * cin + c) * h * w;
            let kbase = (o * cin + c) * kh * kw;
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = 0.0;
                    for i in 0..kh {
                        let iy = (y * g.stride + i) as isize - g.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let irow = ibase + iy as usize * w;
                        let krow = kbase + i * kw;
                        for j in 0..kw {
                            let ix = (x * g.stride + j) as isize - g.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += kernel[krow + j] * input[irow + ix as usize];
                        }
                    }
                    oplane[y * ow + x] += acc;
                }
            }
        }
    };
    let work = batch * kout * plane * cin * kh * kw;
    if work >= PAR_MIN {
        out.par_chunks_mut(plane).enumerate().for_each(job);
    } else {
        out.chunks_mut(plane).enumerate().for_each(job);
    }
    out
}

/// Transpose of [`correlate`] with respect to its input, written as a gather:
/// `out[b,c,y,x] = sum_{o,i,j} k[o,c,i,j] * g[b,o,(y+p-i)/s,(x+p-j)/s]` over integral in-range positions.
fn correlate_transpose(
    grad: &[f64],
    [batch, kout, gh, gw]: [usize; 4],
    kernel: &[f64],
    [cin, kh, kw]: [usize; 3],
    [h, w]: [usize; 2],
    g: ConvGeom,
) -> Vec<f64> {
    let plane = h * w;
    let mut out = vec![0.0; batch * cin * plane];
    let s = g.stride as isize;
    let p = g.padding as isize;
    let job = |(idx, oplane): (usize, &mut [f64])| {
        let b = idx / cin;
        let c = idx % cin;
        for o in 0..kout {
            let gbase = (b * kout + o) * gh * gw;
            let kbase = (o * cin + c) * kh * kw;
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for i in 0..kh {
                        let ty = y as isize + p - i as isize;
                        if ty < 0 || ty % s != 0 || ty / s >= gh as isize {
                            continue;
                        }
                        let grow = gbase + (ty / s) as usize * gw;
                        let krow = kbase + i * kw;
                        for j in 0..kw {
                            let tx = x as isize + p - j as isize;
                            if tx < 0 || tx % s != 0 || tx / s >= gw as isize {
                                continue;
                            }
                            acc += kernel[krow + j] * grad[grow + (tx / s) as usize];
                        }
                    }
                    oplane[y * w + x] += acc;
                }
            }
        }
    };
    let work = batch * cin * plane * kout * kh * kw / (g.stride * g.stride).max(1);
    if work >= PAR_MIN {
        out.par_chunks_mut(plane).enumerate().for_each(job);
    } else {
        out.chunks_mut(plane).enumerate().for_each(job);
    }
    out
}

/// `dk[o,c,i,j] = sum_{b,y,x} g[b,o,y,x] * in[b,c,y*s-p+i, x*s-p+j]`.
fn correlate_kernel_grad(
    grad: &[f64],
    [batch, kout, gh, gw]: [usize; 4],
    input: &[f64],
    [cin, h, w]: [usize; 3],
    [kh, kw]: [usize; 2],
    g: ConvGeom,
) -> Vec<f64> {
    let kplane = cin * kh * kw;
    let mut dk = vec![0.0; kout * kplane];
    let job = |(o, krow_all): (usize, &mut [f64])| {
        for b in 0..batch {
            let gbase = (b * kout + o) * gh * gw;
            for c in 0..cin {
                let ibase = (b * cin + c) * h * w;
                for i in 0..kh {
                    for j in 0..kw {
                        let mut acc = 0.0;
                        for y in 0..gh {
                            let iy = (y * g.stride + i) as isize - g.padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let irow = ibase + iy as usize * w;
                            for x in 0..gw {
                                let ix = (x * g.stride + j) as isize - g.padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += grad[gbase + y * gw + x] * input[irow + ix as usize];
                            }
                        }
                        krow_all[(c * kh + i) * kw + j] += acc;
                    }
                }
            }
        }
    };
    let work = batch * kout * kplane * gh * gw;
    if work >= PAR_MIN {
        dk.par_chunks_mut(kplane).enumerate().for_each(job);
    } else {
        dk.chunks_mut(kplane).enumerate().for_each(job);
    }
    dk
}

fn add_channel_bias(out: &mut [f64], bias: &[f64], plane: usize) {
    let k = bias.len();
    for (idx, chunk) in out.chunks_mut(plane).enumerate() {
        let bv = bias[idx % k];
        for v in chunk {
            *v += bv;
        }
    }
}

fn channel_sums(g: &[f64], channels: usize, plane: usize) -> Vec<f64> {
    let mut s = vec![0.0; channels];
    for (idx, chunk) in g.chunks(plane).enumerate() {
        s[idx % channels] += chunk.iter().sum::<f64>();
    }
    s
}

/// Cross-correlation of `x: [(B,) C, H, W]` with `kernels: [K, C, kh, kw]` plus per-channel bias.
pub fn conv2d_forward(x: &Array, kernels: &Array, bias: &Array, g: ConvGeom) -> Result<Array> {
    let [b, c, h, w] = image_dims(x)?;
    let [k, kc, kh, kw] = kernel_dims(kernels)?;
    if kc != c {
        return Err(Error::shape(format!(
            "conv kernel {:?} expects {kc} input channels, got {c}",
            kernels.shape()
        )));
    }
    if bias.shape() != [k] {
        return Err(Error::shape(format!("conv bias {:?} != [{k}]", bias.shape())));
    }
    let oh = conv_out_dim(h, kh, g)?;
    let ow = conv_out_dim(w, kw, g)?;
    let mut out = correlate(x.data(), [b, c, h, w], kernels.data(), [k, kh, kw], [oh, ow], g);
    add_channel_bias(&mut out, bias.data(), oh * ow);
    Array::new(shaped_like_input(x, b, k, oh, ow), out)
}

/// Returns `(dx, dkernels, dbias)` for [`conv2d_forward`].
pub fn conv2d_backward(x: &Array, kernels: &Array, dy: &Array, g: ConvGeom) -> (Array, Array, Array) {
    let [b, c, h, w] = image_dims(x).expect("checked in forward");
    let [k, _, kh, kw] = kernel_dims(kernels).expect("checked in forward");
    let [_, _, oh, ow] = image_dims(dy).expect("checked in forward");
    let dx = correlate_transpose(dy.data(), [b, k, oh, ow], kernels.data(), [c, kh, kw], [h, w], g);
    let dk = correlate_kernel_grad(dy.data(), [b, k, oh, ow], x.data(), [c, h, w], [kh, kw], g);
    let db = channel_sums(dy.data(), k, oh * ow);
    (
        Array::new(x.shape().to_vec(), dx).expect("shape"),
        Array::new(kernels.shape().to_vec(), dk).expect("shape"),
        Array::from_vec(db),
    )
}

/// Transposed convolution of `x: [(B,) C, H, W]` with `kernels: [C, K, kh, kw]`.
/// Output spatial size is `(H - 1) * stride - 2 * padding + kh`.
pub fn deconv2d_forward(x: &Array, kernels: &Array, bias: &Array, g: ConvGeom) -> Result<Array> {
    let [b, c, h, w] = image_dims(x)?;
    let [kc, k, kh, kw] = kernel_dims(kernels)?;
    if kc != c {
        return Err(Error::shape(format!(
            "transposed-conv kernel {:?} expects {kc} input channels, got {c}",
            kernels.shape()
        )));
    }
    if bias.shape() != [k] {
        return Err(Error::shape(format!("deconv bias {:?} != [{k}]", bias.shape())));
    }
    let oh = deconv_out_dim(h, kh, g)?;
    let ow = deconv_out_dim(w, kw, g)?;
    // The transposed conv equals the input-gradient of a conv whose kernel is
    // `kernels` read as [out = C, in = K, kh, kw]; that conv maps [oh, ow] -> [h, w].
    if conv_out_dim(oh, kh, g)? != h || conv_out_dim(ow, kw, g)? != w {
        return Err(Error::shape("transposed-conv geometry does not invert"));
    }
    let mut out = correlate_transpose(x.data(), [b, c, h, w], kernels.data(), [k, kh, kw], [oh, ow], g);
    add_channel_bias(&mut out, bias.data(), oh * ow);
    Array::new(shaped_like_input(x, b, k, oh, ow), out)
}

/// Returns `(dx, dkernels, dbias)` for [`deconv2d_forward`].
pub fn deconv2d_backward(x: &Array, kernels: &Array, dy: &Array, g: ConvGeom) -> (Array, Array, Array) {
    let [b, c, h, w] = image_dims(x).expect("checked in forward");
    let [_, k, kh, kw] = kernel_dims(kernels).expect("checked in forward");
    let [_, _, oh, ow] = image_dims(dy).expect("checked in forward");
    let dx = correlate(dy.data(), [b, k, oh, ow], kernels.data(), [c, kh, kw], [h, w], g);
    let dk = correlate_kernel_grad(x.data(), [b, c, h, w], dy.data(), [k, oh, ow], [kh, kw], g);
    let db = channel_sums(dy.data(), k, oh * ow);
    (
        Array::new(x.shape().to_vec(), dx).expect("shape"),
        Array::new(kernels.shape().to_vec(), dk).expect("shape"),
        Array::from_vec(db),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    /// Per-channel statistics over the spatial extent of each sample.
    Instance,
    /// Statistics over the whole feature vector of each sample.
    Layer,
}

/// Saved statistics of a normalization forward pass.
#[derive(Clone, Debug)]
pub struct NormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    layout: NormLayout,
}

#[derive(Clone, Copy, Debug)]
struct NormLayout {
    outer: usize,
    channels: usize,
    inner: usize,
    kind: NormKind,
}

impl NormLayout {
    fn of(x: &Array, kind: NormKind) -> Result<Self> {
        let s = x.shape();
        let (outer, channels, inner) = match (kind, s.len()) {
            (NormKind::Layer, 1) => (1, s[0], 1),
            (NormKind::Layer, 2) => (s[0], s[1], 1),
            (NormKind::Layer, 3) => (1, s[0], s[1] * s[2]),
            (NormKind::Layer, 4) => (s[0], s[1], s[2] * s[3]),
            (NormKind::Instance, 3) => (1, s[0], s[1] * s[2]),
            (NormKind::Instance, 4) => (s[0], s[1], s[2] * s[3]),
            _ => {
                return Err(Error::shape(format!(
                    "{kind:?} normalization does not accept shape {s:?}"
                )))
            }
        };
        Ok(NormLayout {
            outer,
            channels,
            inner,
            kind,
        })
    }

    /// (number of groups, group length); groups are contiguous.
    fn groups(&self) -> (usize, usize) {
        match self.kind {
            NormKind::Layer => (self.outer, self.channels * self.inner),
            NormKind::Instance => (self.outer * self.channels, self.inner),
        }
    }

    fn channel_of(&self, flat: usize) -> usize {
        (flat / self.inner) % self.channels
    }
}

/// Zero-mean, unit-variance normalization per group followed by per-channel gain and shift.
pub fn normalize_forward(
    x: &Array,
    kind: NormKind,
    gain: &Array,
    shift: &Array,
    eps: f64,
) -> Result<(Array, NormCache)> {
    let layout = NormLayout::of(x, kind)?;
    let (ngroups, glen) = layout.groups();
    if glen == 0 {
        return Err(Error::shape("empty normalization group"));
    }
    if gain.shape() != [layout.channels] || shift.shape() != [layout.channels] {
        return Err(Error::shape(format!(
            "normalization gain/shift must be [{}], got {:?}/{:?}",
            layout.channels,
            gain.shape(),
            shift.shape()
        )));
    }
    let xd = x.data();
    let mut xhat = vec![0.0; xd.len()];
    let mut inv_std = vec![0.0; ngroups];
    for gi in 0..ngroups {
        let seg = &xd[gi * glen..(gi + 1) * glen];
        let mean = seg.iter().sum::<f64>() / glen as f64;
        let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / glen as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[gi] = is;
        for (o, v) in xhat[gi * glen..(gi + 1) * glen].iter_mut().zip(seg) {
            *o = (v - mean) * is;
        }
    }
    let gd = gain.data();
    let sd = shift.data();
    let out: Vec<f64> = xhat
        .iter()
        .enumerate()
        .map(|(i, &h)| {
            let c = layout.channel_of(i);
            h * gd[c] + sd[c]
        })
        .collect();
    Ok((
        Array::new(x.shape().to_vec(), out)?,
        NormCache {
            xhat,
            inv_std,
            layout,
        },
    ))
}

/// Returns `(dx, dgain, dshift)`.
pub fn normalize_backward(cache: &NormCache, gain: &Array, dy: &Array) -> (Array, Array, Array) {
    let layout = cache.layout;
    let (ngroups, glen) = layout.groups();
    let gd = gain.data();
    let dyd = dy.data();
    let mut dgain = vec![0.0; layout.channels];
    let mut dshift = vec![0.0; layout.channels];
    let mut dxhat = vec![0.0; dyd.len()];
    for (i, &g) in dyd.iter().enumerate() {
        let c = layout.channel_of(i);
        dgain[c] += g * cache.xhat[i];
        dshift[c] += g;
        dxhat[i] = g * gd[c];
    }
    let mut dx = vec![0.0; dyd.len()];
    for gi in 0..ngroups {
        let r = gi * glen..(gi + 1) * glen;
        let dh = &dxhat[r.clone()];
        let xh = &cache.xhat[r.clone()];
        let mean_dh = dh.iter().sum::<f64>() / glen as f64;
        let mean_dh_xh = dh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / glen as f64;
        let is = cache.inv_std[gi];
        for ((o, &d), &h) in dx[r].iter_mut().zip(dh).zip(xh) {
            *o = is * (d - mean_dh - h * mean_dh_xh);
        }
    }
    (
        Array::new(dy.shape().to_vec(), dx).expect("shape"),
        Array::from_vec(dgain),
        Array::from_vec(dshift),
    )
}

/// Convenience wrapper returning only the normalized output.
pub fn normalize(x: &Array, kind: NormKind, gain: &Array, shift: &Array, eps: f64) -> Result<Array> {
    normalize_forward(x, kind, gain, shift, eps).map(|(y, _)| y)
}
