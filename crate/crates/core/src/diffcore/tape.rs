//! Reverse-mode differentiation over a linear tape of array operations.

use indexmap::IndexMap;

use super::kernels::{self, ConvGeom, NormCache, NormKind, NORM_EPS};
use super::{Array, ParamSet};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Dense { x: Var, w: Var, b: Option<Var> },
    Conv { x: Var, k: Var, b: Var, geom: ConvGeom },
    Deconv { x: Var, k: Var, b: Var, geom: ConvGeom },
    Relu(Var),
    Sigmoid(Var),
    Norm { x: Var, gain: Var, shift: Var, cache: NormCache },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Sum(Var),
    MulChannel { x: Var, m: Var },
    AddChannel { x: Var, m: Var },
    BlockSoftmax { x: Var, blocks: Vec<usize> },
    StraightThrough { soft: Var },
    Mse { a: Var, b: Var },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

/// Parameter names bound to tape leaves.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("parameter `{name}` not bound on tape")))
    }

    /// The entries named `prefix` + rest, addressed by rest.
    pub fn scoped(&self, prefix: &str) -> Bound {
        let vars = self
            .vars
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|r| (r.to_string(), *v)))
            .collect();
        Bound { vars }
    }
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.grads[v.0].as_ref()
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Array, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    /// Sign of every ReLU input recorded so far, in tape order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for n in &self.nodes {
            if let Op::Relu(x) = n.op {
                out.extend(self.nodes[x.0].value.data().iter().map(|&v| v > 0.0));
            }
        }
        out
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient.
    pub fn leaf(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Record every parameter as a leaf; frozen entries are recorded as constants.
    pub fn bind(&mut self, params: &ParamSet) -> Bound {
        let mut vars = IndexMap::new();
        for (name, p) in params.iter() {
            let v = self.push(p.value.clone(), Op::Leaf, !p.frozen);
            vars.insert(name.to_string(), v);
        }
        Bound { vars }
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = kernels::dense_forward(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(y, Op::Dense { x, w, b }, rg))
    }

    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, geom: ConvGeom) -> Result<Var> {
        let y = kernels::conv2d_forward(self.value(x), self.value(k), self.value(b), geom)?;
        let rg = self.rg(&[x, k, b]);
        Ok(self.push(y, Op::Conv { x, k, b, geom }, rg))
    }

    pub fn deconv2d(&mut self, x: Var, k: Var, b: Var, geom: ConvGeom) -> Result<Var> {
        let y = kernels::deconv2d_forward(self.value(x), self.value(k), self.value(b), geom)?;
        let rg = self.rg(&[x, k, b]);
        Ok(self.push(y, Op::Deconv { x, k, b, geom }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(&[x]);
        self.push(y, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        self.push(y, Op::Sigmoid(x), rg)
    }

    pub fn normalize(&mut self, x: Var, kind: NormKind, gain: Var, shift: Var) -> Result<Var> {
        let (y, cache) =
            kernels::normalize_forward(self.value(x), kind, self.value(gain), self.value(shift), NORM_EPS)?;
        let rg = self.rg(&[x, gain, shift]);
        Ok(self.push(y, Op::Norm { x, gain, shift, cache }, rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Array {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Array::new(av.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let y = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(y, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let y = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(y, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let y = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(y, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let y = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(y, Op::Scale(x, c), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v * v);
        let rg = self.rg(&[x]);
        self.push(y, Op::Square(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Array::scalar(self.value(x).data().iter().sum());
        let rg = self.rg(&[x]);
        self.push(y, Op::Sum(x), rg)
    }

    fn channel_inner(&self, x: Var, m: Var) -> Result<usize> {
        let xs = self.value(x).shape();
        let ms = self.value(m).shape();
        if xs.len() < ms.len() || &xs[..ms.len()] != ms {
            return Err(Error::shape(format!(
                "channel mask {ms:?} does not broadcast over {xs:?}"
            )));
        }
        Ok(xs[ms.len()..].iter().product())
    }

    /// `x * m` with `m` broadcast over the trailing (spatial) dimensions of `x`.
    pub fn mul_channel(&mut self, x: Var, m: Var) -> Result<Var> {
        let inner = self.channel_inner(x, m)?;
        let md = self.value(m).data();
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * md[i / inner])
            .collect();
        let y = Array::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x, m]);
        Ok(self.push(y, Op::MulChannel { x, m }, rg))
    }

    /// `x + m` with `m` broadcast over the trailing (spatial) dimensions of `x`.
    pub fn add_channel(&mut self, x: Var, m: Var) -> Result<Var> {
        let inner = self.channel_inner(x, m)?;
        let md = self.value(m).data();
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + md[i / inner])
            .collect();
        let y = Array::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x, m]);
        Ok(self.push(y, Op::AddChannel { x, m }, rg))
    }

    /// Softmax over consecutive blocks of the last dimension.
    pub fn block_softmax(&mut self, x: Var, blocks: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let width = *xv.shape().last().expect("non-empty shape");
        if blocks.iter().sum::<usize>() != width || blocks.contains(&0) {
            return Err(Error::shape(format!(
                "softmax blocks {blocks:?} do not tile width {width}"
            )));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(width) {
            let mut off = 0;
            for &n in blocks {
                softmax_in_place(&mut row[off..off + n]);
                off += n;
            }
        }
        let y = Array::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            y,
            Op::BlockSoftmax {
                x,
                blocks: blocks.to_vec(),
            },
            rg,
        ))
    }

    /// Forward value `hard`, backward identity into `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: Array) -> Result<Var> {
        if hard.shape() != self.value(soft).shape() {
            return Err(Error::shape("straight-through values must match soft shape"));
        }
        let rg = self.rg(&[soft]);
        Ok(self.push(hard, Op::StraightThrough { soft }, rg))
    }

    /// Same values under a new shape with an equal element count.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(y, Op::Reshape(x), rg))
    }

    /// Mean over every element of `(a - b)^2`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let n = av.len() as f64;
        let m = av.iter().zip(bv).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Array::scalar(m), Op::Mse { a, b }, rg))
    }

    /// Gradients of the scalar `out` with respect to every node that requires one.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar output, got {:?}",
                self.value(out).shape()
            )));
        }
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Array::full(self.value(out).shape(), 1.0));
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Array, grads: &mut [Option<Array>]) {
        let need = |v: &Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, d: Array| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => {
                    for (a, b) in e.data_mut().iter_mut().zip(d.data()) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Dense { x, w, b } => {
                let (dx, dw, db) = kernels::dense_backward(self.value(*x), self.value(*w), g);
                acc(*x, dx);
                acc(*w, dw);
                if let Some(b) = b {
                    acc(*b, db);
                }
            }
            Op::Conv { x, k, b, geom } => {
                let (dx, dk, db) = kernels::conv2d_backward(self.value(*x), self.value(*k), g, *geom);
                acc(*x, dx);
                acc(*k, dk);
                acc(*b, db);
            }
            Op::Deconv { x, k, b, geom } => {
                let (dx, dk, db) =
                    kernels::deconv2d_backward(self.value(*x), self.value(*k), g, *geom);
                acc(*x, dx);
                acc(*k, dk);
                acc(*b, db);
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let d = zip_arrays(xv, g, |x, g| if x > 0.0 { g } else { 0.0 });
                acc(*x, d);
            }
            Op::Sigmoid(x) => {
                let d = zip_arrays(&node.value, g, |y, g| g * y * (1.0 - y));
                acc(*x, d);
            }
            Op::Norm {
                x,
                gain,
                shift,
                cache,
            } => {
                let (dx, dg, ds) = kernels::normalize_backward(cache, self.value(*gain), g);
                acc(*x, dx);
                acc(*gain, dg);
                acc(*shift, ds);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                if need(b) {
                    acc(*b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if need(a) {
                    acc(*a, zip_arrays(g, self.value(*b), |g, y| g * y));
                }
                if need(b) {
                    acc(*b, zip_arrays(g, self.value(*a), |g, x| g * x));
                }
            }
            Op::Scale(x, c) => acc(*x, g.map(|v| v * c)),
            Op::Square(x) => acc(*x, zip_arrays(self.value(*x), g, |x, g| 2.0 * x * g)),
            Op::Sum(x) => {
                let gv = g.data()[0];
                acc(*x, Array::full(self.value(*x).shape(), gv));
            }
            Op::MulChannel { x, m } => {
                let mv = self.value(*m);
                let inner = g.len() / mv.len();
                if need(x) {
                    let md = mv.data();
                    let d = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| gv * md[i / inner])
                        .collect();
                    acc(*x, Array::new(g.shape().to_vec(), d).expect("shape"));
                }
                if need(m) {
                    let xd = self.value(*x).data();
                    let mut dm = vec![0.0; mv.len()];
                    for (i, &gv) in g.data().iter().enumerate() {
                        dm[i / inner] += gv * xd[i];
                    }
                    acc(*m, Array::new(mv.shape().to_vec(), dm).expect("shape"));
                }
            }
            Op::AddChannel { x, m } => {
                let mv = self.value(*m);
                let inner = g.len() / mv.len();
                acc(*x, g.clone());
                if need(m) {
                    let mut dm = vec![0.0; mv.len()];
                    for (i, &gv) in g.data().iter().enumerate() {
                        dm[i / inner] += gv;
                    }
                    acc(*m, Array::new(mv.shape().to_vec(), dm).expect("shape"));
                }
            }
            Op::BlockSoftmax { x, blocks } => {
                let y = node.value.data();
                let width: usize = blocks.iter().sum();
                let mut d = vec![0.0; y.len()];
                for (r, (yr, gr)) in y.chunks(width).zip(g.data().chunks(width)).enumerate() {
                    let mut off = 0;
                    for &n in blocks {
                        let ys = &yr[off..off + n];
                        let gs = &gr[off..off + n];
                        let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                        for i in 0..n {
                            d[r * width + off + i] = ys[i] * (gs[i] - dot);
                        }
                        off += n;
                    }
                }
                acc(*x, Array::new(node.value.shape().to_vec(), d).expect("shape"));
            }
            Op::StraightThrough { soft } => acc(*soft, g.clone()),
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                acc(*x, g.clone().reshape(&shape).expect("same element count"));
            }
            Op::Mse { a, b } => {
                let av = self.value(*a);
                let scale = 2.0 * g.data()[0] / av.len() as f64;
                let diff = zip_arrays(av, self.value(*b), |x, y| scale * (x - y));
                if need(b) {
                    acc(*b, diff.map(|v| -v));
                }
                acc(*a, diff);
            }
        }
    }

    /// Gather bound-parameter gradients into a [`ParamSet`]; frozen entries are zero.
    pub fn param_grads(&self, grads: &Gradients, bound: &Bound, params: &ParamSet) -> Result<ParamSet> {
        let mut out = params.zeros_like();
        for (name, p) in out.iter_mut() {
            if p.frozen {
                continue;
            }
            let v = bound.get(name)?;
            if let Some(g) = grads.get(v) {
                if !g.is_finite() {
                    return Err(Error::NumericOverflow {
                        param: name.to_string(),
                    });
                }
                p.value = g.clone();
            }
        }
        Ok(out)
    }
}

fn zip_arrays(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Array::new(a.shape().to_vec(), data).expect("same shape")
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(xs: &mut [f64]) {
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

/// Evaluate a scalar computation and its reverse-mode gradient with respect to `params`.
///
/// Frozen parameters map to zero gradient. A non-finite value or gradient is
/// reported as [`Error::NumericOverflow`] naming the offending parameter.
pub fn value_and_grad<F>(params: &ParamSet, f: F) -> Result<(f64, ParamSet)>
where
    F: FnOnce(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = tape.bind(params);
    let out = f(&mut tape, &bound)?;
    let value = tape.value(out).data()[0];
    let grads = tape.backward(out)?;
    let g = tape.param_grads(&grads, &bound, params)?;
    if !value.is_finite() {
        return Err(Error::NumericOverflow {
            param: "<output>".into(),
        });
    }
    Ok((value, g))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_and_relu_gradients() {
        let mut p = ParamSet::new();
        p.insert("x", Array::scalar(3.0)).unwrap();
        let (v, g) = value_and_grad(&p, |t, b| {
            let x = b.get("x")?;
            let y = t.square(x);
            Ok(t.sum(y))
        })
        .unwrap();
        assert_eq!(v, 9.0);
        assert_eq!(g.get("x").unwrap().data(), &[6.0]);

        let mut p = ParamSet::new();
        p.insert("x", Array::from_vec(vec![-1.0, 2.0])).unwrap();
        let (v, g) = value_and_grad(&p, |t, b| {
            let r = t.relu(b.get("x")?);
            Ok(t.sum(r))
        })
        .unwrap();
        assert_eq!(v, 2.0);
        assert_eq!(g.get("x").unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut p = ParamSet::new();
        p.insert("x", Array::from_vec(vec![0.0])).unwrap();
        let (_, g) = value_and_grad(&p, |t, b| {
            let r = t.relu(b.get("x")?);
            Ok(t.sum(r))
        })
        .unwrap();
        assert_eq!(g.get("x").unwrap().data(), &[0.0]);
    }

    #[test]
    fn frozen_parameters_get_zero_gradient() {
        let mut p = ParamSet::new();
        p.insert("a", Array::scalar(2.0)).unwrap();
        p.insert("b", Array::scalar(5.0)).unwrap();
        p.set_frozen("b", true).unwrap();
        let (v, g) = value_and_grad(&p, |t, bd| {
            let m = t.mul(bd.get("a")?, bd.get("b")?)?;
            Ok(t.sum(m))
        })
        .unwrap();
        assert_eq!(v, 10.0);
        assert_eq!(g.get("a").unwrap().data(), &[5.0]);
        assert_eq!(g.get("b").unwrap().data(), &[0.0]);
    }

    #[test]
    fn overflow_names_the_parameter() {
        let mut p = ParamSet::new();
        p.insert("big", Array::scalar(1e200)).unwrap();
        let err = value_and_grad(&p, |t, b| {
            let x = b.get("big")?;
            let y = t.square(x);
            let z = t.square(y);
            Ok(t.sum(z))
        })
        .unwrap_err();
        match err {
            Error::NumericOverflow { param } => assert_eq!(param, "big"),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn block_softmax_rows_sum_to_one() {
        let mut t = Tape::new();
        let x = t.constant(Array::new(vec![2, 5], vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0, 0.0, 0.0, 9.0, 9.0]).unwrap());
        let y = t.block_softmax(x, &[3, 2]).unwrap();
        let v = t.value(y).data();
        assert!((v[0] + v[1] + v[2] - 1.0).abs() < 1e-12);
        assert!((v[3] + v[4] - 1.0).abs() < 1e-12);
        assert!((v[5] - 1.0 / 3.0).abs() < 1e-12);
        assert!((v[8] - 0.5).abs() < 1e-12);
    }
}
