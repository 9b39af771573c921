//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in execution
//! order, which is already a topological order, so [`Tape::backward`] is a
//! single reverse sweep. Operations take `&self`; the node list sits behind a
//! `RefCell` so expressions can nest freely.

use std::cell::RefCell;
use std::rc::Rc;

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation defined outside the built-in set.
///
/// `vjp` receives the upstream cotangent (shaped like the output) and must
/// return one cotangent per input, each shaped like that input.
pub trait CustomOp {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    fn vjp(&self, inputs: &[&Tensor], output: &Tensor, cotangent: &Tensor) -> Result<Vec<Tensor>>;
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Minimum(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    BatchMatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Clamp(usize, f64, f64),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm(usize, Vec<f64>),
    Concat(Vec<usize>, usize),
    Slice(usize, usize, usize),
    Expand(usize, usize),
    SumAll(usize),
    MeanAll(usize),
    SumAxis(usize, usize),
    MeanAxis(usize, usize),
    Custom(Vec<usize>, Box<dyn CustomOp>),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, `None` when no path exists.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r {
            a[i + a.len() - r]
        } else {
            1
        };
        let db = if i + b.len() >= r {
            b[i + b.len() - r]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Flat input index for every flat output index, `None` when shapes match.
fn broadcast_map(out: &[usize], inp: &[usize]) -> Option<Vec<usize>> {
    if out == inp {
        return None;
    }
    let r = out.len();
    let mut strides = vec![0usize; r];
    let mut s = 1;
    for i in (0..inp.len()).rev() {
        let oi = i + r - inp.len();
        strides[oi] = if inp[i] == 1 && out[oi] != 1 { 0 } else { s };
        s *= inp[i];
    }
    let n: usize = out.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; r];
    let mut flat = 0usize;
    for _ in 0..n {
        map.push(flat);
        for d in (0..r).rev() {
            idx[d] += 1;
            flat += strides[d];
            if idx[d] < out[d] {
                break;
            }
            flat -= strides[d] * out[d];
            idx[d] = 0;
        }
    }
    Some(map)
}

fn gather(data: &[f64], map: &Option<Vec<usize>>, i: usize) -> f64 {
    match map {
        Some(m) => data[m[i]],
        None => data[i],
    }
}

fn scatter_add(dst: &mut [f64], map: &Option<Vec<usize>>, i: usize, v: f64) {
    match map {
        Some(m) => dst[m[i]] += v,
        None => dst[i] += v,
    }
}

/// Split a shape around `axis` into (outer, axis length, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn last_dim(t: &Tensor) -> Result<usize> {
    t.shape().last().copied().filter(|&n| n > 0).ok_or_else(|| {
        Error::Shape(format!(
            "operation needs a non-empty last axis, got shape {:?}",
            t.shape()
        ))
    })
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn val(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    /// Value held by `v`.
    pub fn value(&self, v: Var) -> Rc<Tensor> {
        self.val(v)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Record a constant (no gradient is tracked).
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Record a differentiable leaf.
    pub fn var(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn leaf(&self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    fn binary(
        &self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, bool)> {
        let (ta, tb) = (self.val(a), self.val(b));
        let shape = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| {
            Error::Shape(format!(
                "{name}: incompatible shapes {:?} and {:?}",
                ta.shape(),
                tb.shape()
            ))
        })?;
        let ma = broadcast_map(&shape, ta.shape());
        let mb = broadcast_map(&shape, tb.shape());
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|i| f(gather(ta.data(), &ma, i), gather(tb.data(), &mb, i)))
            .collect();
        Ok((Tensor::new(&shape, data)?, self.rg(&[a.0, b.0])))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a.0, b.0), rg))
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a.0, b.0), rg))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "div", |x, y| x / y)?;
        Ok(self.push(t, Op::Div(a.0, b.0), rg))
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn minimum(&self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "minimum", |x, y| if x <= y { x } else { y })?;
        Ok(self.push(t, Op::Minimum(a.0, b.0), rg))
    }

    pub fn scale(&self, a: Var, k: f64) -> Var {
        let t = self.val(a).map(|x| x * k);
        let rg = self.rg(&[a.0]);
        self.push(t, Op::Scale(a.0, k), rg)
    }

    pub fn add_scalar(&self, a: Var, k: f64) -> Var {
        let t = self.val(a).map(|x| x + k);
        let rg = self.rg(&[a.0]);
        self.push(t, Op::AddScalar(a.0), rg)
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    fn unary(&self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.val(a).map(f);
        let rg = self.rg(&[a.0]);
        self.push(t, op, rg)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a.0), |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a.0), f64::tanh)
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, Op::Relu(a.0), |x| x.max(0.0))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, Op::Exp(a.0), f64::exp)
    }

    pub fn log(&self, a: Var) -> Var {
        self.unary(a, Op::Log(a.0), f64::ln)
    }

    pub fn square(&self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a.0, lo, hi), |x| x.clamp(lo, hi))
    }

    /// `[.., m, k] x [k, n] -> [.., m, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::Shape(format!(
                "matmul: cannot multiply {sa:?} by {sb:?}"
            )));
        }
        let k = sb[0];
        let n = sb[1];
        let m = ta.numel() / k.max(1);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let mut shape = sa.to_vec();
        *shape.last_mut().expect("rank >= 2") = n;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul(a.0, b.0), rg))
    }

    /// `[b, m, k] x [b, k, n] -> [b, m, n]`.
    pub fn batch_matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::Shape(format!(
                "batch_matmul: cannot multiply {sa:?} by {sb:?}"
            )));
        }
        let (bn, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bn * m * n];
        for i in 0..bn {
            gemm(
                m,
                k,
                n,
                &ta.data()[i * m * k..(i + 1) * m * k],
                false,
                &tb.data()[i * k * n..(i + 1) * k * n],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(
            Tensor::new(&[bn, m, n], out)?,
            Op::BatchMatMul(a.0, b.0),
            rg,
        ))
    }

    /// Swap the last two axes.
    pub fn transpose(&self, a: Var) -> Result<Var> {
        let ta = self.val(a);
        let s = ta.shape();
        if s.len() < 2 {
            return Err(Error::Shape(format!(
                "transpose needs rank >= 2, got {s:?}"
            )));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batches = ta.numel() / (r * c).max(1);
        let mut out = vec![0.0; ta.numel()];
        for bi in 0..batches {
            let src = &ta.data()[bi * r * c..(bi + 1) * r * c];
            let dst = &mut out[bi * r * c..(bi + 1) * r * c];
            for i in 0..r {
                for j in 0..c {
                    dst[j * r + i] = src[i * c + j];
                }
            }
        }
        let mut shape = s.to_vec();
        let l = shape.len();
        shape.swap(l - 1, l - 2);
        let rg = self.rg(&[a.0]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Transpose(a.0), rg))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = (*self.val(a)).clone().reshaped(shape)?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(t, Op::Reshape(a.0), rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, a: Var) -> Result<Var> {
        let ta = self.val(a);
        let n = last_dim(&ta)?;
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(n) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                s += *x;
            }
            row.iter_mut().for_each(|x| *x /= s);
        }
        let rg = self.rg(&[a.0]);
        Ok(self.push(Tensor::new(ta.shape(), out)?, Op::Softmax(a.0), rg))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self, a: Var) -> Result<Var> {
        let ta = self.val(a);
        let n = last_dim(&ta)?;
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(n) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let rg = self.rg(&[a.0]);
        Ok(self.push(Tensor::new(ta.shape(), out)?, Op::LogSoftmax(a.0), rg))
    }

    /// Normalize the last axis to zero mean and unit variance (no affine part).
    pub fn layer_norm(&self, a: Var) -> Result<Var> {
        let ta = self.val(a);
        let n = last_dim(&ta)?;
        let mut out = ta.data().to_vec();
        let mut rstd = Vec::with_capacity(out.len() / n);
        for row in out.chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * r);
            rstd.push(r);
        }
        let rg = self.rg(&[a.0]);
        Ok(self.push(Tensor::new(ta.shape(), out)?, Op::LayerNorm(a.0, rstd), rg))
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.val(
            *parts
                .first()
                .ok_or_else(|| Error::Shape("concat of nothing".into()))?,
        );
        let base = first.shape().to_vec();
        if axis >= base.len() {
            return Err(Error::Shape(format!(
                "concat axis {axis} out of range for {base:?}"
            )));
        }
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.val(p)).collect();
        let mut total = 0;
        for v in &vals {
            let s = v.shape();
            let same = s.len() == base.len() && (0..s.len()).all(|i| i == axis || s[i] == base[i]);
            if !same {
                return Err(Error::Shape(format!(
                    "concat: {s:?} does not match {base:?} off axis {axis}"
                )));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &vals {
                let len = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat(ids, axis), rg))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let ta = self.val(a);
        let s = ta.shape();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(Error::Shape(format!(
                "slice {start}..{end} on axis {axis} of {s:?}"
            )));
        }
        let (outer, len, inner) = axis_split(s, axis);
        let w = end - start;
        let mut out = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            let base = o * len * inner;
            out.extend_from_slice(&ta.data()[base + start * inner..base + end * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = w;
        let rg = self.rg(&[a.0]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Slice(a.0, axis, start), rg))
    }

    /// Insert a new axis at `axis` holding `n` copies.
    pub fn expand(&self, a: Var, axis: usize, n: usize) -> Result<Var> {
        let ta = self.val(a);
        let s = ta.shape();
        if axis > s.len() {
            return Err(Error::Shape(format!(
                "expand axis {axis} out of range for {s:?}"
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis..].iter().product();
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for _ in 0..n {
                out.extend_from_slice(&ta.data()[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = s.to_vec();
        shape.insert(axis, n);
        let rg = self.rg(&[a.0]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Expand(a.0, axis), rg))
    }

    pub fn sum(&self, a: Var) -> Var {
        let t = Tensor::scalar(self.val(a).sum());
        let rg = self.rg(&[a.0]);
        self.push(t, Op::SumAll(a.0), rg)
    }

    pub fn mean(&self, a: Var) -> Var {
        let ta = self.val(a);
        let t = Tensor::scalar(ta.sum() / ta.numel().max(1) as f64);
        let rg = self.rg(&[a.0]);
        self.push(t, Op::MeanAll(a.0), rg)
    }

    fn reduce_axis(&self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let ta = self.val(a);
        let s = ta.shape();
        if axis >= s.len() {
            return Err(Error::Shape(format!(
                "reduction axis {axis} out of range for {s:?}"
            )));
        }
        let (outer, len, inner) = axis_split(s, axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &ta.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(d, x)| *d += x);
            }
        }
        if mean {
            out.iter_mut().for_each(|x| *x /= len as f64);
        }
        let mut shape = s.to_vec();
        shape.remove(axis);
        let rg = self.rg(&[a.0]);
        let op = if mean {
            Op::MeanAxis(a.0, axis)
        } else {
            Op::SumAxis(a.0, axis)
        };
        Ok(self.push(Tensor::new(&shape, out)?, op, rg))
    }

    pub fn sum_axis(&self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    pub fn mean_axis(&self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    /// Record a user-defined operation.
    pub fn custom(&self, op: Box<dyn CustomOp>, inputs: &[Var]) -> Result<Var> {
        let vals: Vec<Rc<Tensor>> = inputs.iter().map(|&v| self.val(v)).collect();
        let refs: Vec<&Tensor> = vals.iter().map(|v| v.as_ref()).collect();
        let out = op.forward(&refs)?;
        let ids: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(out, Op::Custom(ids, op), rg))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let lv = &nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(lv.shape(), vec![1.0])?);

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let needs = |i: usize| nodes[i].requires_grad;
            let value = |i: usize| nodes[i].value.as_ref();
            let out = node.value.as_ref();
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) {
                        -1.0
                    } else {
                        1.0
                    };
                    for (i, s) in [(*a, 1.0), (*b, sign)] {
                        if needs(i) {
                            let map = broadcast_map(out.shape(), value(i).shape());
                            let mut acc = vec![0.0; value(i).numel()];
                            for (k, gv) in g.data().iter().enumerate() {
                                scatter_add(&mut acc, &map, k, s * gv);
                            }
                            accumulate(&mut grads[i], Tensor::new(value(i).shape(), acc)?);
                        }
                    }
                }
                Op::Mul(a, b) | Op::Div(a, b) | Op::Minimum(a, b) => {
                    let (ta, tb) = (value(*a), value(*b));
                    let ma = broadcast_map(out.shape(), ta.shape());
                    let mb = broadcast_map(out.shape(), tb.shape());
                    let mut ga = needs(*a).then(|| vec![0.0; ta.numel()]);
                    let mut gb = needs(*b).then(|| vec![0.0; tb.numel()]);
                    for (k, gv) in g.data().iter().enumerate() {
                        let x = gather(ta.data(), &ma, k);
                        let y = gather(tb.data(), &mb, k);
                        let (da, db) = match node.op {
                            Op::Mul(..) => (y, x),
                            Op::Div(..) => (1.0 / y, -x / (y * y)),
                            _ => {
                                if x <= y {
                                    (1.0, 0.0)
                                } else {
                                    (0.0, 1.0)
                                }
                            }
                        };
                        if let Some(ga) = ga.as_mut() {
                            scatter_add(ga, &ma, k, gv * da);
                        }
                        if let Some(gb) = gb.as_mut() {
                            scatter_add(gb, &mb, k, gv * db);
                        }
                    }
                    if let Some(ga) = ga {
                        accumulate(&mut grads[*a], Tensor::new(ta.shape(), ga)?);
                    }
                    if let Some(gb) = gb {
                        accumulate(&mut grads[*b], Tensor::new(tb.shape(), gb)?);
                    }
                }
                Op::Scale(a, k) => {
                    let k = *k;
                    accumulate(&mut grads[*a], g.map(|x| x * k));
                }
                Op::AddScalar(a) | Op::Reshape(a) => {
                    let shape = value(*a).shape().to_vec();
                    accumulate(&mut grads[*a], g.reshaped(&shape)?);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (value(*a), value(*b));
                    let (k, n) = (tb.shape()[0], tb.shape()[1]);
                    let m = ta.numel() / k.max(1);
                    if needs(*a) {
                        let mut ga = vec![0.0; m * k];
                        gemm(m, n, k, g.data(), false, tb.data(), true, &mut ga, false);
                        accumulate(&mut grads[*a], Tensor::new(ta.shape(), ga)?);
                    }
                    if needs(*b) {
                        let mut gb = vec![0.0; k * n];
                        gemm(k, m, n, ta.data(), true, g.data(), false, &mut gb, false);
                        accumulate(&mut grads[*b], Tensor::new(tb.shape(), gb)?);
                    }
                }
                Op::BatchMatMul(a, b) => {
                    let (ta, tb) = (value(*a), value(*b));
                    let (bn, m, k, n) =
                        (ta.shape()[0], ta.shape()[1], ta.shape()[2], tb.shape()[2]);
                    let mut ga = needs(*a).then(|| vec![0.0; bn * m * k]);
                    let mut gb = needs(*b).then(|| vec![0.0; bn * k * n]);
                    for i in 0..bn {
                        let gi = &g.data()[i * m * n..(i + 1) * m * n];
                        if let Some(ga) = ga.as_mut() {
                            let bi = &tb.data()[i * k * n..(i + 1) * k * n];
                            gemm(
                                m,
                                n,
                                k,
                                gi,
                                false,
                                bi,
                                true,
                                &mut ga[i * m * k..(i + 1) * m * k],
                                false,
                            );
                        }
                        if let Some(gb) = gb.as_mut() {
                            let ai = &ta.data()[i * m * k..(i + 1) * m * k];
                            gemm(
                                k,
                                m,
                                n,
                                ai,
                                true,
                                gi,
                                false,
                                &mut gb[i * k * n..(i + 1) * k * n],
                                false,
                            );
                        }
                    }
                    if let Some(ga) = ga {
                        accumulate(&mut grads[*a], Tensor::new(ta.shape(), ga)?);
                    }
                    if let Some(gb) = gb {
                        accumulate(&mut grads[*b], Tensor::new(tb.shape(), gb)?);
                    }
                }
                Op::Transpose(a) => {
                    let s = g.shape().to_vec();
                    let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                    let mut ga = vec![0.0; g.numel()];
                    for bi in 0..g.numel() / (r * c).max(1) {
                        let src = &g.data()[bi * r * c..(bi + 1) * r * c];
                        let dst = &mut ga[bi * r * c..(bi + 1) * r * c];
                        for i in 0..r {
                            for j in 0..c {
                                dst[j * r + i] = src[i * c + j];
                            }
                        }
                    }
                    accumulate(&mut grads[*a], Tensor::new(value(*a).shape(), ga)?);
                }
                Op::Sigmoid(a) => {
                    let d = g
                        .data()
                        .iter()
                        .zip(out.data())
                        .map(|(gv, y)| gv * y * (1.0 - y))
                        .collect();
                    accumulate(&mut grads[*a], Tensor::new(out.shape(), d)?);
                }
                Op::Tanh(a) => {
                    let d = g
                        .data()
                        .iter()
                        .zip(out.data())
                        .map(|(gv, y)| gv * (1.0 - y * y))
                        .collect();
                    accumulate(&mut grads[*a], Tensor::new(out.shape(), d)?);
                }
                Op::Relu(a) => {
                    let x = value(*a);
                    let d = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads[*a], Tensor::new(out.shape(), d)?);
                }
                Op::Exp(a) => {
                    let d = g
                        .data()
                        .iter()
                        .zip(out.data())
                        .map(|(gv, y)| gv * y)
                        .collect();
                    accumulate(&mut grads[*a], Tensor::new(out.shape(), d)?);
                }
                Op::Log(a) => {
                    let x = value(*a);
                    let d = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(gv, x)| gv / x)
                        .collect();
                    accumulate(&mut grads[*a], Tensor::new(out.shape(), d)?);
                }
                Op::Clamp(a, lo, hi) => {
                    let x = value(*a);
                    let d = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(gv, x)| if *x >= *lo && *x <= *hi { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads[*a], Tensor::new(out.shape(), d)?);
                }
                Op::Softmax(a) => {
                    let n = last_dim(out)?;
                    let mut d = vec![0.0; out.numel()];
                    for ((dr, yr), gr) in d
                        .chunks_mut(n)
                        .zip(out.data().chunks(n))
                        .zip(g.data().chunks(n))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, gv)| y * gv).sum();
                        for j in 0..n {
                            dr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut grads[*a], Tensor::new(out.shape(), d)?);
                }
                Op::LogSoftmax(a) => {
                    let n = last_dim(out)?;
                    let mut d = vec![0.0; out.numel()];
                    for ((dr, yr), gr) in d
                        .chunks_mut(n)
                        .zip(out.data().chunks(n))
                        .zip(g.data().chunks(n))
                    {
                        let gs: f64 = gr.iter().sum();
                        for j in 0..n {
                            dr[j] = gr[j] - yr[j].exp() * gs;
                        }
                    }
                    accumulate(&mut grads[*a], Tensor::new(out.shape(), d)?);
                }
                Op::LayerNorm(a, rstd) => {
                    let n = last_dim(out)?;
                    let mut d = vec![0.0; out.numel()];
                    for (r, ((dr, yr), gr)) in d
                        .chunks_mut(n)
                        .zip(out.data().chunks(n))
                        .zip(g.data().chunks(n))
                        .enumerate()
                    {
                        let mg = gr.iter().sum::<f64>() / n as f64;
                        let mgy = gr.iter().zip(yr).map(|(gv, y)| gv * y).sum::<f64>() / n as f64;
                        for j in 0..n {
                            dr[j] = rstd[r] * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                    accumulate(&mut grads[*a], Tensor::new(out.shape(), d)?);
                }
                Op::Concat(ids, axis) => {
                    let (outer, total, inner) = axis_split(out.shape(), *axis);
                    let mut offset = 0;
                    for &i in ids {
                        let len = value(i).shape()[*axis];
                        if needs(i) {
                            let mut gi = Vec::with_capacity(value(i).numel());
                            for o in 0..outer {
                                let base = (o * total + offset) * inner;
                                gi.extend_from_slice(&g.data()[base..base + len * inner]);
                            }
                            accumulate(&mut grads[i], Tensor::new(value(i).shape(), gi)?);
                        }
                        offset += len;
                    }
                }
                Op::Slice(a, axis, start) => {
                    let s = value(*a).shape();
                    let (outer, len, inner) = axis_split(s, *axis);
                    let w = out.shape()[*axis];
                    let mut ga = vec![0.0; value(*a).numel()];
                    for o in 0..outer {
                        let dst = o * len * inner + start * inner;
                        ga[dst..dst + w * inner]
                            .copy_from_slice(&g.data()[o * w * inner..(o + 1) * w * inner]);
                    }
                    accumulate(&mut grads[*a], Tensor::new(s, ga)?);
                }
                Op::Expand(a, axis) => {
                    let s = value(*a).shape();
                    let outer: usize = s[..*axis].iter().product();
                    let inner: usize = s[*axis..].iter().product();
                    let n = out.shape()[*axis];
                    let mut ga = vec![0.0; value(*a).numel()];
                    for o in 0..outer {
                        for r in 0..n {
                            let src = &g.data()[(o * n + r) * inner..(o * n + r + 1) * inner];
                            ga[o * inner..(o + 1) * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, x)| *d += x);
                        }
                    }
                    accumulate(&mut grads[*a], Tensor::new(s, ga)?);
                }
                Op::SumAll(a) | Op::MeanAll(a) => {
                    let x = value(*a);
                    let gv = g.data()[0];
                    let gv = if matches!(node.op, Op::MeanAll(_)) {
                        gv / x.numel().max(1) as f64
                    } else {
                        gv
                    };
                    accumulate(&mut grads[*a], Tensor::full(x.shape(), gv));
                }
                Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                    let s = value(*a).shape();
                    let (outer, len, inner) = axis_split(s, *axis);
                    let k = if matches!(node.op, Op::MeanAxis(..)) {
                        1.0 / len as f64
                    } else {
                        1.0
                    };
                    let mut ga = vec![0.0; value(*a).numel()];
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                ga[(o * len + l) * inner + i] = k * g.data()[o * inner + i];
                            }
                        }
                    }
                    accumulate(&mut grads[*a], Tensor::new(s, ga)?);
                }
                Op::Custom(ids, op) => {
                    let refs: Vec<&Tensor> = ids.iter().map(|&i| value(i)).collect();
                    let cots = op.vjp(&refs, out, &g)?;
                    if cots.len() != ids.len() {
                        return Err(Error::Contract(format!(
                            "custom op `{}` returned {} cotangents for {} inputs",
                            op.name(),
                            cots.len(),
                            ids.len()
                        )));
                    }
                    for (&i, c) in ids.iter().zip(cots) {
                        if c.shape() != value(i).shape() {
                            return Err(Error::Shape(format!(
                                "custom op `{}` cotangent shape {:?} does not match input {:?}",
                                op.name(),
                                c.shape(),
                                value(i).shape()
                            )));
                        }
                        if needs(i) {
                            accumulate(&mut grads[i], c);
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}
