//! Reverse-mode differentiation by operation recording.
//!
//! Every operation appends a node holding its output value; nodes are only
//! ever appended, so node order is a valid evaluation order and `backward`
//! walks it in reverse.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, ConvGeom};
use super::{broadcast_binary, broadcast_shape, expand_to, sum_to_shape, Tensor};
use crate::error::{Error, Result};
use crate::params::ParamId;
use crate::real::{self, Real};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
enum Unary {
    Neg,
    Exp,
    Log,
    Sigmoid,
    Softplus,
    Tanh,
    Relu,
    Abs,
    Square,
    Sqrt,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Unary(Var, Unary),
    Clamp(Var, f64, f64),
    SumTo(Var),
    MaxAxis(Var, Vec<usize>),
    Reshape(Var),
    Transpose(Var),
    Matmul(Var, Var),
    Conv2d(Var, Var, usize),
    Softmax(Var),
    Concat(Vec<Var>, usize),
    Narrow(Var, usize, usize),
    SpaceToChannel(Var),
    ChannelToSpace(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<ParamId, Var>,
    /// Patch matrices of convolutions whose kernel needs a gradient.
    conv_cols: BTreeMap<usize, Vec<T>>,
    grad_nodes: usize,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), params: BTreeMap::new(), conv_cols: BTreeMap::new(), grad_nodes: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> Var {
        self.grad_nodes += usize::from(needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn grad_of(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf for a stored parameter. Repeated requests for the same id share
    /// one node so that gradients accumulate.
    pub fn param(&mut self, id: ParamId, track: bool, value: impl FnOnce() -> Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(value(), Op::Param, track);
        self.params.insert(id, v);
        v
    }

    /// Frees the values of every node except `live` and parameter leaves when
    /// nothing on the tape needs a gradient. Released values must not be read
    /// again. Returns whether anything was released.
    pub fn release(&mut self, live: &[Var]) -> bool {
        if self.grad_nodes > 0 {
            return false;
        }
        let mut keep = alloc::vec![false; self.nodes.len()];
        for v in live {
            keep[v.0] = true;
        }
        for (node, k) in self.nodes.iter_mut().zip(keep) {
            if !k && !matches!(node.op, Op::Param) && node.value.numel() > 0 {
                node.value = Tensor::from_parts(alloc::vec![0], Vec::new());
            }
        }
        self.conv_cols.clear();
        true
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        broadcast_binary(self.value(a), self.value(b), op, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let g = self.grad_of(a) || self.grad_of(b);
        Ok(self.push(out, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let g = self.grad_of(a) || self.grad_of(b);
        Ok(self.push(out, Op::Sub(a, b), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let g = self.grad_of(a) || self.grad_of(b);
        Ok(self.push(out, Op::Mul(a, b), g))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if let Some(i) = self.value(b).data().iter().position(|&x| x == T::zero()) {
            return Err(Error::domain("div", format!("division by zero at element {}", i)));
        }
        let out = self.binary(a, b, "div", |x, y| x / y)?;
        let g = self.grad_of(a) || self.grad_of(b);
        Ok(self.push(out, Op::Div(a, b), g))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        let out = self.value(a).map(|x| x + c);
        let g = self.grad_of(a);
        self.push(out, Op::AddScalar(a), g)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let ct = T::of(c);
        let out = self.value(a).map(|x| x * ct);
        let g = self.grad_of(a);
        self.push(out, Op::MulScalar(a, c), g)
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Result<Var> {
        let x = self.value(a);
        match kind {
            Unary::Log => {
                if let Some(i) = x.data().iter().position(|&v| !(v > T::zero())) {
                    return Err(Error::domain(
                        "log",
                        format!("non-positive argument {} at element {}", x.data()[i], i),
                    ));
                }
            }
            Unary::Sqrt => {
                if let Some(i) = x.data().iter().position(|&v| v < T::zero()) {
                    return Err(Error::domain("sqrt", format!("negative argument at element {}", i)));
                }
            }
            _ => {}
        }
        let out = x.map(match kind {
            Unary::Neg => |v: T| -v,
            Unary::Exp => |v: T| v.exp(),
            Unary::Log => |v: T| v.ln(),
            Unary::Sigmoid => real::sigmoid,
            Unary::Softplus => real::softplus,
            Unary::Tanh => |v: T| v.tanh(),
            Unary::Relu => |v: T| if v > T::zero() { v } else { T::zero() },
            Unary::Abs => |v: T| v.abs(),
            Unary::Square => |v: T| v * v,
            Unary::Sqrt => |v: T| v.sqrt(),
        });
        let g = self.grad_of(a);
        Ok(self.push(out, Op::Unary(a, kind), g))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Neg).expect("neg has no domain restriction")
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp).expect("exp has no domain restriction")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Log)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid).expect("sigmoid has no domain restriction")
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus).expect("softplus has no domain restriction")
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh).expect("tanh has no domain restriction")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu).expect("relu has no domain restriction")
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs).expect("abs has no domain restriction")
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square).expect("square has no domain restriction")
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sqrt)
    }

    /// `ln(sigmoid(x))`, computed as `-softplus(-x)`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let n = self.neg(a);
        let s = self.softplus(n);
        self.neg(s)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (T::of(lo), T::of(hi));
        let out = self.value(a).map(|v| v.max(l).min(h));
        let g = self.grad_of(a);
        self.push(out, Op::Clamp(a, lo, hi), g)
    }

    /// Sums `a` down to `shape`, which must broadcast to `a`'s shape.
    pub fn sum_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(a);
        if broadcast_shape(shape, src).as_deref() != Some(src) {
            return Err(Error::shape("sum_to", format!("cannot reduce {:?} to {:?}", src, shape)));
        }
        let out = sum_to_shape(self.value(a), shape);
        let g = self.grad_of(a);
        Ok(self.push(out, Op::SumTo(a), g))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let r = self.shape(a).len();
        let ones = vec![1; r.max(1)];
        let s = self.sum_to(a, &ones).expect("all-ones shape always broadcasts");
        self.reshape(s, &[1]).expect("single element")
    }

    /// Sum over the given axes, keeping them as extent 1.
    pub fn sum_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let mut shape = self.shape(a).to_vec();
        for &ax in axes {
            if ax >= shape.len() {
                return Err(Error::shape("sum_axes", format!("axis {} for rank {}", ax, shape.len())));
            }
            shape[ax] = 1;
        }
        self.sum_to(a, &shape)
    }

    pub fn mean_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let count: usize = axes.iter().map(|&ax| self.shape(a)[ax]).product();
        let s = self.sum_axes(a, axes)?;
        Ok(self.mul_scalar(s, 1.0 / count as f64))
    }

    /// Sum over every axis but the first: `[b, ...] -> [b]`.
    pub fn sum_per_example(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let b = *shape.first().ok_or_else(|| Error::shape("sum_per_example", "rank-0 input"))?;
        let mut target = vec![1; shape.len()];
        target[0] = b;
        let s = self.sum_to(a, &target)?;
        self.reshape(s, &[b])
    }

    /// Maximum along `axis`, keeping it as extent 1. Gradient flows to the
    /// first maximal element.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        let shape = x.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("max_axis", format!("axis {} for rank {}", axis, shape.len())));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let len = shape[axis];
        let mut vals = Vec::with_capacity(outer * inner);
        let mut arg = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * len * inner + i;
                for k in 1..len {
                    let idx = (o * len + k) * inner + i;
                    if x.data()[idx] > x.data()[best] {
                        best = idx;
                    }
                }
                vals.push(x.data()[best]);
                arg.push(best);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let g = self.grad_of(a);
        Ok(self.push(Tensor::from_parts(out_shape, vals), Op::MaxAxis(a, arg), g))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let g = self.grad_of(a);
        Ok(self.push(out, Op::Reshape(a), g))
    }

    /// Transpose of the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose_last()?;
        let g = self.grad_of(a);
        Ok(self.push(out, Op::Transpose(a), g))
    }

    /// Matrix product over the last two axes. Operands are `[m, k]` or
    /// `[batch, m, k]`; a rank-2 operand is shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let geom = MatmulGeom::new(&sa, &sb)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); geom.batch * geom.m * geom.n];
        for bi in 0..geom.batch {
            kernels::gemm(
                &av[geom.a_off(bi)..],
                &bv[geom.b_off(bi)..],
                &mut out[bi * geom.m * geom.n..(bi + 1) * geom.m * geom.n],
                geom.m,
                geom.k,
                geom.n,
            );
        }
        let shape = geom.out_shape();
        let g = self.grad_of(a) || self.grad_of(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Matmul(a, b), g))
    }

    /// 2-d cross-correlation, stride 1, symmetric zero padding.
    pub fn conv2d(&mut self, input: Var, kernel: Var, padding: usize) -> Result<Var> {
        let geom = conv_geom(self.shape(input), self.shape(kernel), padding)?;
        let keep = self.grad_of(kernel);
        let (out, col) = kernels::conv2d_forward(&geom, self.value(input).data(), self.value(kernel).data(), keep);
        let g = self.grad_of(input) || keep;
        let shape = vec![geom.b, geom.co, geom.oh, geom.ow];
        let v = self.push(Tensor::from_parts(shape, out), Op::Conv2d(input, kernel, padding), g);
        if let Some(col) = col {
            self.conv_cols.insert(v.0, col);
        }
        Ok(v)
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if !x.is_finite() {
            return Err(Error::domain("softmax", "non-finite input"));
        }
        let n = *x.shape().last().ok_or_else(|| Error::shape("softmax", "rank-0 input"))?;
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(n.max(1)) {
            let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let g = self.grad_of(a);
        Ok(self.push(out, Op::Softmax(a), g))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat(&tensors, axis)?;
        let g = parts.iter().any(|&p| self.grad_of(p));
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), g))
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).narrow(axis, start, len)?;
        let g = self.grad_of(a);
        Ok(self.push(out, Op::Narrow(a, axis, start), g))
    }

    /// Splits channels (axis 1) at `first`.
    pub fn split_channels(&mut self, a: Var, first: usize) -> Result<(Var, Var)> {
        let c = *self.shape(a).get(1).ok_or_else(|| Error::shape("split", "rank < 2"))?;
        if first > c {
            return Err(Error::shape("split", format!("split point {} beyond {} channels", first, c)));
        }
        let x1 = self.narrow(a, 1, 0, first)?;
        let x2 = self.narrow(a, 1, first, c - first)?;
        Ok((x1, x2))
    }

    pub fn space_to_channel(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).space_to_channel()?;
        let g = self.grad_of(a);
        Ok(self.push(out, Op::SpaceToChannel(a), g))
    }

    pub fn channel_to_space(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).channel_to_space()?;
        let g = self.grad_of(a);
        Ok(self.push(out, Op::ChannelToSpace(a), g))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let params = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let mut acc = |v: Var, t: Tensor<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => e.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                acc(*a, sum_to_shape(g, self.shape(*a)));
                acc(*b, sum_to_shape(g, self.shape(*b)));
            }
            Op::Sub(a, b) => {
                acc(*a, sum_to_shape(g, self.shape(*a)));
                acc(*b, sum_to_shape(&g.map(|v| -v), self.shape(*b)));
            }
            Op::Mul(a, b) => {
                if self.grad_of(*a) {
                    let t = broadcast_binary(g, self.value(*b), "mul", |u, v| u * v).unwrap();
                    acc(*a, sum_to_shape(&t, self.shape(*a)));
                }
                if self.grad_of(*b) {
                    let t = broadcast_binary(g, self.value(*a), "mul", |u, v| u * v).unwrap();
                    acc(*b, sum_to_shape(&t, self.shape(*b)));
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.grad_of(*a) {
                    let t = broadcast_binary(g, bv, "div", |u, v| u / v).unwrap();
                    acc(*a, sum_to_shape(&t, self.shape(*a)));
                }
                if self.grad_of(*b) {
                    let gy = broadcast_binary(g, y, "div", |u, v| u * v).unwrap();
                    let t = broadcast_binary(&gy, bv, "div", |u, v| -u / v).unwrap();
                    acc(*b, sum_to_shape(&t, self.shape(*b)));
                }
            }
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::MulScalar(a, c) => {
                let c = T::of(*c);
                acc(*a, g.map(|v| v * c));
            }
            Op::Unary(a, kind) => {
                let x = self.value(*a);
                let d: Vec<T> = match kind {
                    Unary::Neg => g.data().iter().map(|&u| -u).collect(),
                    Unary::Exp => zip_map(g, y, |u, yv| u * yv),
                    Unary::Log => zip_map(g, x, |u, xv| u / xv),
                    Unary::Sigmoid => zip_map(g, y, |u, yv| u * yv * (T::one() - yv)),
                    Unary::Softplus => zip_map(g, x, |u, xv| u * real::sigmoid(xv)),
                    Unary::Tanh => zip_map(g, y, |u, yv| u * (T::one() - yv * yv)),
                    Unary::Relu => zip_map(g, x, |u, xv| if xv > T::zero() { u } else { T::zero() }),
                    Unary::Abs => zip_map(g, x, |u, xv| {
                        if xv > T::zero() {
                            u
                        } else if xv < T::zero() {
                            -u
                        } else {
                            T::zero()
                        }
                    }),
                    Unary::Square => zip_map(g, x, |u, xv| T::of(2.0) * u * xv),
                    Unary::Sqrt => zip_map(g, y, |u, yv| u / (T::of(2.0) * yv)),
                };
                acc(*a, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::Clamp(a, lo, hi) => {
                let (l, h) = (T::of(*lo), T::of(*hi));
                let d = zip_map(g, self.value(*a), |u, xv| if xv > l && xv < h { u } else { T::zero() });
                acc(*a, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::SumTo(a) => acc(*a, expand_to(g, self.shape(*a))),
            Op::MaxAxis(a, arg) => {
                let mut t = Tensor::zeros(self.shape(*a));
                for (k, &src) in arg.iter().enumerate() {
                    t.data_mut()[src] += g.data()[k];
                }
                acc(*a, t);
            }
            Op::Reshape(a) => acc(*a, g.reshape(self.shape(*a)).unwrap()),
            Op::Transpose(a) => acc(*a, g.transpose_last().unwrap()),
            Op::Matmul(a, b) => {
                let geom = MatmulGeom::new(self.shape(*a), self.shape(*b)).unwrap();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let (m, k, n) = (geom.m, geom.k, geom.n);
                if self.grad_of(*a) {
                    let mut ga = vec![T::zero(); self.value(*a).numel()];
                    for bi in 0..geom.batch {
                        let go = &g.data()[bi * m * n..(bi + 1) * m * n];
                        kernels::gemm_nt(go, &bv[geom.b_off(bi)..], &mut ga[geom.a_off(bi)..], m, n, k);
                    }
                    acc(*a, Tensor::from_parts(self.shape(*a).to_vec(), ga));
                }
                if self.grad_of(*b) {
                    let mut gb = vec![T::zero(); self.value(*b).numel()];
                    for bi in 0..geom.batch {
                        let go = &g.data()[bi * m * n..(bi + 1) * m * n];
                        kernels::gemm_tn(&av[geom.a_off(bi)..], go, &mut gb[geom.b_off(bi)..], k, m, n);
                    }
                    acc(*b, Tensor::from_parts(self.shape(*b).to_vec(), gb));
                }
            }
            Op::Conv2d(input, kernel, padding) => {
                let geom = conv_geom(self.shape(*input), self.shape(*kernel), *padding).unwrap();
                let (gi, gk) = kernels::conv2d_backward(
                    &geom,
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    g.data(),
                    self.grad_of(*input),
                    self.grad_of(*kernel),
                    self.conv_cols.get(&idx).map(|c| c.as_slice()),
                );
                if let Some(gi) = gi {
                    acc(*input, Tensor::from_parts(self.shape(*input).to_vec(), gi));
                }
                if let Some(gk) = gk {
                    acc(*kernel, Tensor::from_parts(self.shape(*kernel).to_vec(), gk));
                }
            }
            Op::Softmax(a) => {
                let n = *y.shape().last().unwrap();
                let mut d = Vec::with_capacity(y.numel());
                for (yr, gr) in y.data().chunks(n).zip(g.data().chunks(n)) {
                    let s: T = yr.iter().zip(gr).map(|(&p, &u)| p * u).sum();
                    d.extend(yr.iter().zip(gr).map(|(&p, &u)| p * (u - s)));
                }
                acc(*a, Tensor::from_parts(y.shape().to_vec(), d));
            }
            Op::Concat(parts, axis) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.grad_of(p) {
                        acc(p, g.narrow(*axis, start, len).unwrap());
                    }
                    start += len;
                }
            }
            Op::Narrow(a, axis, start) => {
                let full = self.shape(*a);
                let len = g.shape()[*axis];
                let outer: usize = full[..*axis].iter().product();
                let inner: usize = full[*axis + 1..].iter().product();
                let mut t = Tensor::zeros(full);
                for o in 0..outer {
                    let dst = (o * full[*axis] + start) * inner;
                    let src = o * len * inner;
                    t.data_mut()[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                acc(*a, t);
            }
            Op::SpaceToChannel(a) => acc(*a, g.channel_to_space().unwrap()),
            Op::ChannelToSpace(a) => acc(*a, g.space_to_channel().unwrap()),
        }
    }
}

fn zip_map<T: Real>(g: &Tensor<T>, x: &Tensor<T>, f: impl Fn(T, T) -> T) -> Vec<T> {
    g.data().iter().zip(x.data()).map(|(&u, &v)| f(u, v)).collect()
}

struct MatmulGeom {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
}

impl MatmulGeom {
    fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        let err = || Error::shape("matmul", format!("incompatible operands {:?} and {:?}", sa, sb));
        let split = |s: &[usize]| -> Option<(Option<usize>, usize, usize)> {
            match *s {
                [m, k] => Some((None, m, k)),
                [b, m, k] => Some((Some(b), m, k)),
                _ => None,
            }
        };
        let (ba, m, k) = split(sa).ok_or_else(err)?;
        let (bb, k2, n) = split(sb).ok_or_else(err)?;
        if k != k2 {
            return Err(err());
        }
        let batch = match (ba, bb) {
            (Some(x), Some(y)) if x != y => return Err(err()),
            (Some(x), _) | (None, Some(x)) => x,
            (None, None) => 1,
        };
        Ok(MatmulGeom { batch, m, k, n, a_batched: ba.is_some(), b_batched: bb.is_some() })
    }

    fn a_off(&self, bi: usize) -> usize {
        if self.a_batched {
            bi * self.m * self.k
        } else {
            0
        }
    }

    fn b_off(&self, bi: usize) -> usize {
        if self.b_batched {
            bi * self.k * self.n
        } else {
            0
        }
    }

    fn out_shape(&self) -> Vec<usize> {
        if self.a_batched || self.b_batched {
            vec![self.batch, self.m, self.n]
        } else {
            vec![self.m, self.n]
        }
    }
}

fn conv_geom(input: &[usize], kernel: &[usize], pad: usize) -> Result<ConvGeom> {
    let (&[b, ci, h, w], &[co, ki, kh, kw]) = (input, kernel) else {
        return Err(Error::shape("conv2d", format!("input {:?}, kernel {:?}", input, kernel)));
    };
    if ci != ki {
        return Err(Error::shape(
            "conv2d",
            format!("input has {} channels but kernel expects {} ({:?} vs {:?})", ci, ki, input, kernel),
        ));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::shape("conv2d", format!("kernel extents {}x{} must be odd", kh, kw)));
    }
    let oh = (h + 2 * pad) as isize - kh as isize + 1;
    let ow = (w + 2 * pad) as isize - kw as isize + 1;
    if oh <= 0 || ow <= 0 {
        return Err(Error::shape(
            "conv2d",
            format!("non-positive output extent {}x{} for input {:?}", oh, ow, input),
        ));
    }
    Ok(ConvGeom { b, ci, h, w, co, kh, kw, pad, oh: oh as usize, ow: ow as usize })
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every parameter that was placed on the tape and reached.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> + '_ {
        self.params.iter().filter_map(|&(id, v)| self.wrt(v).map(|g| (id, g)))
    }
}
