//! Tape-based reverse-mode automatic differentiation.
//!
//! Nodes live in an arena in creation order. Every op's inputs are older
//! than the op itself, so walking the arena backwards is a topological
//! order and each node is visited exactly once per backward pass.

use std::fmt;

use super::array::Tensor;
use super::kernels::{self, ConvGeom};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Built-in differentiable operations.
///
/// Binary elementwise ops accept equal shapes, a single-element operand,
/// or an operand whose shape is a trailing suffix of the other's.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Scale(f64),
    /// `[m, k] x [k, n] -> [m, n]`
    MatMul,
    Sigmoid,
    Tanh,
    Relu,
    Reshape(Vec<usize>),
    Transpose(usize, usize),
    Concat(usize),
    Slice {
        axis: usize,
        start: usize,
        len: usize,
    },
    Sum,
    Mean,
    BroadcastTo(Vec<usize>),
    /// `x: [B, H, W, C]`, `k: [kh, kw, C]`; stride 1, same padding.
    DepthwiseConv2d,
    /// `x: [B, H, W, Cin]`, `w: [kh, kw, Cin, Cout]`; stride 1, same padding.
    Conv2d,
    /// `x: [..., C]`, `gamma: [C]`, `beta: [C]`; normalizes with the
    /// statistics of the batch over every axis but the last.
    BatchNorm { epsilon: f64 },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Scale(_) => "scale",
            Primitive::MatMul => "matmul",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Tanh => "tanh",
            Primitive::Relu => "relu",
            Primitive::Reshape(_) => "reshape",
            Primitive::Transpose(..) => "transpose",
            Primitive::Concat(_) => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::BroadcastTo(_) => "broadcast",
            Primitive::DepthwiseConv2d => "depthwise_conv2d",
            Primitive::Conv2d => "conv2d",
            Primitive::BatchNorm { .. } => "batch_norm",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::MatMul
            | Primitive::DepthwiseConv2d
            | Primitive::Conv2d => Some(2),
            Primitive::BatchNorm { .. } => Some(3),
            Primitive::Concat(_) => None,
            _ => Some(1),
        }
    }
}

/// User-defined op with a hand-written backward rule.
pub trait CustomOp: Send + fmt::Debug {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    /// One gradient per input, each shaped like that input.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor>;
}

/// Batch statistics captured by a training-mode batch norm node.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

#[derive(Debug)]
enum OpKind {
    Leaf,
    Prim(Primitive),
    Custom(Box<dyn CustomOp>),
}

#[derive(Debug)]
enum Saved {
    Nothing,
    BatchNorm {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        stats: BatchStats,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: OpKind,
    inputs: Vec<Var>,
    requires_grad: bool,
    saved: Saved,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, OpKind::Leaf, Vec::new(), requires_grad, Saved::Nothing)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn batch_stats(&self, v: Var) -> Option<&BatchStats> {
        match &self.nodes[v.0].saved {
            Saved::BatchNorm { stats, .. } => Some(stats),
            Saved::Nothing => None,
        }
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(
        &mut self,
        value: Tensor,
        op: OpKind,
        inputs: Vec<Var>,
        requires_grad: bool,
        saved: Saved,
    ) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            inputs,
            requires_grad,
            saved,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record `op` applied to `inputs` and compute its value.
    pub fn forward_op(&mut self, op: Primitive, inputs: &[Var]) -> Result<Var> {
        if let Some(n) = op.arity() {
            if inputs.len() != n {
                return Err(Error::invalid(format!(
                    "{} expects {n} inputs, got {}",
                    op.name(),
                    inputs.len()
                )));
            }
        } else if inputs.is_empty() {
            return Err(Error::invalid(format!("{} needs inputs", op.name())));
        }
        let (value, saved) = {
            let vals: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            eval(&op, &vals)?
        };
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, OpKind::Prim(op), inputs.to_vec(), rg, saved))
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var]) -> Result<Var> {
        let value = {
            let vals: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            op.forward(&vals)?
        };
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(
            value,
            OpKind::Custom(op),
            inputs.to_vec(),
            rg,
            Saved::Nothing,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(Primitive::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(Primitive::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(Primitive::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.forward_op(Primitive::Scale(c), &[a])
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(Primitive::MatMul, &[a, b])
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.forward_op(Primitive::Sigmoid, &[a])
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.forward_op(Primitive::Tanh, &[a])
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.forward_op(Primitive::Relu, &[a])
    }
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.forward_op(Primitive::Reshape(shape.to_vec()), &[a])
    }
    pub fn transpose(&mut self, a: Var, x: usize, y: usize) -> Result<Var> {
        self.forward_op(Primitive::Transpose(x, y), &[a])
    }
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.forward_op(Primitive::Concat(axis), parts)
    }
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.forward_op(Primitive::Slice { axis, start, len }, &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.forward_op(Primitive::Sum, &[a])
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.forward_op(Primitive::Mean, &[a])
    }
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.forward_op(Primitive::BroadcastTo(shape.to_vec()), &[a])
    }
    pub fn depthwise_conv2d(&mut self, x: Var, k: Var) -> Result<Var> {
        self.forward_op(Primitive::DepthwiseConv2d, &[x, k])
    }
    pub fn conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        self.forward_op(Primitive::Conv2d, &[x, w])
    }
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, epsilon: f64) -> Result<Var> {
        self.forward_op(Primitive::BatchNorm { epsilon }, &[x, gamma, beta])
    }

    /// Accumulate `d root / d node` into every reachable node that requires
    /// gradients. Calling twice without [`Graph::zero_grads`] adds twice.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_shape = self.nodes[root.0].value.shape().to_vec();
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::NonScalarRoot(root_shape));
        }
        let mut pending: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        pending[root.0] = Some(Tensor::ones(&root_shape));
        for id in (0..=root.0).rev() {
            let Some(g) = pending[id].take() else {
                continue;
            };
            if !self.nodes[id].requires_grad {
                continue;
            }
            let node = &self.nodes[id];
            let input_grads: Vec<Option<Tensor>> = match &node.op {
                OpKind::Leaf => Vec::new(),
                OpKind::Prim(p) => {
                    let vals: Vec<&Tensor> =
                        node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                    let wanted: Vec<bool> = node
                        .inputs
                        .iter()
                        .map(|v| self.nodes[v.0].requires_grad)
                        .collect();
                    vjp(p, &vals, &node.value, &node.saved, &g, &wanted)?
                }
                OpKind::Custom(op) => {
                    let vals: Vec<&Tensor> =
                        node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                    op.backward(&vals, &node.value, &g)
                        .into_iter()
                        .map(Some)
                        .collect()
                }
            };
            let inputs = node.inputs.clone();
            for (inp, gi) in inputs.iter().zip(input_grads) {
                let Some(gi) = gi else { continue };
                if !self.nodes[inp.0].requires_grad {
                    continue;
                }
                if gi.shape() != self.nodes[inp.0].value.shape() {
                    return Err(Error::shape(
                        "backward",
                        self.nodes[inp.0].value.shape(),
                        gi.shape(),
                    ));
                }
                match &mut pending[inp.0] {
                    Some(acc) => acc.add_assign(&gi),
                    slot @ None => *slot = Some(gi),
                }
            }
            let node = &mut self.nodes[id];
            match &mut node.grad {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

/// Number of elements of `small` repeated to fill `big`, if `small` is a
/// single element or a trailing suffix of `big`.
fn broadcast_period(big: &[usize], small: &[usize]) -> Option<usize> {
    let n: usize = small.iter().product();
    if n == 1 || (small.len() <= big.len() && big.ends_with(small)) {
        Some(n)
    } else {
        None
    }
}

fn binary_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() {
        return Ok(a.shape().to_vec());
    }
    if broadcast_period(a.shape(), b.shape()).is_some() && a.len() >= b.len() {
        return Ok(a.shape().to_vec());
    }
    if broadcast_period(b.shape(), a.shape()).is_some() {
        return Ok(b.shape().to_vec());
    }
    Err(Error::shape(op, a.shape(), b.shape()))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis + 1..].iter().product(),
    )
}

fn conv_geom(op: &'static str, x: &Tensor, k_shape: &[usize]) -> Result<ConvGeom> {
    let xs = x.shape();
    if xs.len() != 4 || k_shape.len() < 3 || k_shape[2] != xs[3] {
        return Err(Error::shape(op, xs, k_shape));
    }
    Ok(ConvGeom {
        batch: xs[0],
        height: xs[1],
        width: xs[2],
        channels: xs[3],
        kh: k_shape[0],
        kw: k_shape[1],
    })
}

fn eval(op: &Primitive, v: &[&Tensor]) -> Result<(Tensor, Saved)> {
    let plain = |t: Tensor| Ok((t, Saved::Nothing));
    match op {
        Primitive::Add | Primitive::Sub | Primitive::Mul => {
            let (a, b) = (v[0], v[1]);
            let shape = binary_shape(op.name(), a, b)?;
            let n: usize = shape.iter().product();
            let (ma, mb) = (a.len(), b.len());
            let (ad, bd) = (a.data(), b.data());
            let data: Vec<f64> = match op {
                Primitive::Add => (0..n).map(|i| ad[i % ma] + bd[i % mb]).collect(),
                Primitive::Sub => (0..n).map(|i| ad[i % ma] - bd[i % mb]).collect(),
                _ => (0..n).map(|i| ad[i % ma] * bd[i % mb]).collect(),
            };
            plain(Tensor::new(shape, data)?)
        }
        Primitive::Scale(c) => plain(v[0].map(|x| c * x)),
        Primitive::MatMul => {
            let (a, b) = (v[0], v[1]);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(Error::shape("matmul", a.shape(), b.shape()));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut c = vec![0.0; m * n];
            kernels::gemm(m, k, n, a.data(), false, b.data(), false, &mut c, false);
            plain(Tensor::new(vec![m, n], c)?)
        }
        Primitive::Sigmoid => plain(v[0].map(sigmoid)),
        Primitive::Tanh => plain(v[0].map(f64::tanh)),
        Primitive::Relu => plain(v[0].map(|x| if x > 0.0 { x } else { 0.0 })),
        Primitive::Reshape(shape) => plain(v[0].clone().reshape(shape)?),
        Primitive::Transpose(a, b) => plain(v[0].transpose(*a, *b)?),
        Primitive::Concat(axis) => {
            let first = v[0].shape();
            if *axis >= first.len() {
                return Err(Error::shape("concat", first, &[*axis]));
            }
            let mut total = 0;
            for t in v {
                let s = t.shape();
                let same_rank = s.len() == first.len();
                if !same_rank || s.iter().zip(first).enumerate().any(|(i, (x, y))| i != *axis && x != y) {
                    return Err(Error::shape("concat", first, s));
                }
                total += s[*axis];
            }
            let mut shape = first.to_vec();
            shape[*axis] = total;
            let (outer, inner) = outer_inner(first, *axis);
            let mut data = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for t in v {
                    let block = t.shape()[*axis] * inner;
                    data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
                }
            }
            plain(Tensor::new(shape, data)?)
        }
        Primitive::Slice { axis, start, len } => {
            let s = v[0].shape();
            if *axis >= s.len() || *len == 0 || start + len > s[*axis] {
                return Err(Error::shape("slice", s, &[*axis, *start, *len]));
            }
            let (outer, inner) = outer_inner(s, *axis);
            let mut shape = s.to_vec();
            shape[*axis] = *len;
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * s[*axis] + start) * inner;
                data.extend_from_slice(&v[0].data()[base..base + len * inner]);
            }
            plain(Tensor::new(shape, data)?)
        }
        Primitive::Sum => plain(Tensor::scalar(v[0].sum())),
        Primitive::Mean => plain(Tensor::scalar(v[0].sum() / v[0].len() as f64)),
        Primitive::BroadcastTo(shape) => {
            let m = broadcast_period(shape, v[0].shape())
                .ok_or_else(|| Error::shape("broadcast", v[0].shape(), shape))?;
            let n: usize = shape.iter().product();
            let d = v[0].data();
            plain(Tensor::new(shape.clone(), (0..n).map(|i| d[i % m]).collect())?)
        }
        Primitive::DepthwiseConv2d => {
            let (x, k) = (v[0], v[1]);
            if k.rank() != 3 {
                return Err(Error::shape("depthwise_conv2d", x.shape(), k.shape()));
            }
            let g = conv_geom("depthwise_conv2d", x, k.shape())?;
            let y = kernels::depthwise_forward(&g, x.data(), k.data());
            plain(Tensor::new(x.shape().to_vec(), y)?)
        }
        Primitive::Conv2d => {
            let (x, w) = (v[0], v[1]);
            if w.rank() != 4 {
                return Err(Error::shape("conv2d", x.shape(), w.shape()));
            }
            let g = conv_geom("conv2d", x, w.shape())?;
            let cout = w.shape()[3];
            let rows = g.batch * g.height * g.width;
            let inner = g.kh * g.kw * g.channels;
            let cols = kernels::im2col(&g, x.data());
            let mut y = vec![0.0; rows * cout];
            kernels::gemm(rows, inner, cout, &cols, false, w.data(), false, &mut y, false);
            let mut shape = x.shape().to_vec();
            shape[3] = cout;
            plain(Tensor::new(shape, y)?)
        }
        Primitive::BatchNorm { epsilon } => {
            let (x, gamma, beta) = (v[0], v[1], v[2]);
            let c = *x.shape().last().unwrap_or(&1);
            if x.rank() < 2 || gamma.shape() != [c] || beta.shape() != [c] {
                return Err(Error::shape("batch_norm", x.shape(), gamma.shape()));
            }
            let n = x.len() / c;
            let xd = x.data();
            let mut mean = vec![0.0; c];
            for row in xd.chunks_exact(c) {
                for (m, &val) in mean.iter_mut().zip(row) {
                    *m += val;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            let mut var = vec![0.0; c];
            for row in xd.chunks_exact(c) {
                for ((s, &val), m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (val - m) * (val - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= n as f64);
            let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s + epsilon).sqrt()).collect();
            let mut xhat = Vec::with_capacity(xd.len());
            let mut y = Vec::with_capacity(xd.len());
            for row in xd.chunks_exact(c) {
                for ch in 0..c {
                    let h = (row[ch] - mean[ch]) * inv_std[ch];
                    xhat.push(h);
                    y.push(gamma.data()[ch] * h + beta.data()[ch]);
                }
            }
            Ok((
                Tensor::new(x.shape().to_vec(), y)?,
                Saved::BatchNorm {
                    xhat,
                    inv_std,
                    stats: BatchStats {
                        mean,
                        variance: var,
                    },
                },
            ))
        }
    }
}

/// Reduce a gradient of the broadcast result back onto an operand holding
/// `period` elements.
fn reduce_to(g: &[f64], period: usize, shape: &[usize], f: impl Fn(usize) -> f64) -> Result<Tensor> {
    let mut out = vec![0.0; period];
    for (i, gi) in g.iter().enumerate() {
        out[i % period] += gi * f(i);
    }
    Tensor::new(shape.to_vec(), out)
}

fn vjp(
    op: &Primitive,
    v: &[&Tensor],
    out: &Tensor,
    saved: &Saved,
    g: &Tensor,
    wanted: &[bool],
) -> Result<Vec<Option<Tensor>>> {
    let gd = g.data();
    let like = |t: &Tensor, data: Vec<f64>| Tensor::new(t.shape().to_vec(), data);
    Ok(match op {
        Primitive::Add | Primitive::Sub | Primitive::Mul => {
            let (a, b) = (v[0], v[1]);
            let (ma, mb) = (a.len(), b.len());
            let sign = if matches!(op, Primitive::Sub) { -1.0 } else { 1.0 };
            let is_mul = matches!(op, Primitive::Mul);
            let ga = if wanted[0] {
                Some(reduce_to(gd, ma, a.shape(), |i| {
                    if is_mul {
                        b.data()[i % mb]
                    } else {
                        1.0
                    }
                })?)
            } else {
                None
            };
            let gb = if wanted[1] {
                Some(reduce_to(gd, mb, b.shape(), |i| {
                    if is_mul {
                        a.data()[i % ma]
                    } else {
                        sign
                    }
                })?)
            } else {
                None
            };
            vec![ga, gb]
        }
        Primitive::Scale(c) => vec![Some(g.map(|x| c * x))],
        Primitive::MatMul => {
            let (a, b) = (v[0], v[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let ga = if wanted[0] {
                let mut da = vec![0.0; m * k];
                kernels::gemm(m, n, k, gd, false, b.data(), true, &mut da, false);
                Some(like(a, da)?)
            } else {
                None
            };
            let gb = if wanted[1] {
                let mut db = vec![0.0; k * n];
                kernels::gemm(k, m, n, a.data(), true, gd, false, &mut db, false);
                Some(like(b, db)?)
            } else {
                None
            };
            vec![ga, gb]
        }
        Primitive::Sigmoid => {
            let d = out.data().iter().zip(gd).map(|(y, g)| g * y * (1.0 - y)).collect();
            vec![Some(like(v[0], d)?)]
        }
        Primitive::Tanh => {
            let d = out.data().iter().zip(gd).map(|(y, g)| g * (1.0 - y * y)).collect();
            vec![Some(like(v[0], d)?)]
        }
        Primitive::Relu => {
            let d = v[0]
                .data()
                .iter()
                .zip(gd)
                .map(|(x, g)| if *x > 0.0 { *g } else { 0.0 })
                .collect();
            vec![Some(like(v[0], d)?)]
        }
        Primitive::Reshape(_) => vec![Some(g.clone().reshape(v[0].shape())?)],
        Primitive::Transpose(a, b) => vec![Some(g.transpose(*a, *b)?)],
        Primitive::Concat(axis) => {
            let (outer, inner) = outer_inner(out.shape(), *axis);
            let total = out.shape()[*axis];
            let mut grads = Vec::with_capacity(v.len());
            let mut offset = 0;
            for (t, w) in v.iter().zip(wanted) {
                let len = t.shape()[*axis];
                if *w {
                    let mut d = Vec::with_capacity(t.len());
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        d.extend_from_slice(&gd[base..base + len * inner]);
                    }
                    grads.push(Some(like(t, d)?));
                } else {
                    grads.push(None);
                }
                offset += len;
            }
            grads
        }
        Primitive::Slice { axis, start, len } => {
            let s = v[0].shape();
            let (outer, inner) = outer_inner(s, *axis);
            let mut d = vec![0.0; v[0].len()];
            for o in 0..outer {
                let dst = (o * s[*axis] + start) * inner;
                let src = o * len * inner;
                d[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
            }
            vec![Some(like(v[0], d)?)]
        }
        Primitive::Sum => vec![Some(Tensor::full(v[0].shape(), gd[0]))],
        Primitive::Mean => {
            let n = v[0].len() as f64;
            vec![Some(like(v[0], vec![gd[0] / n; v[0].len()])?)]
        }
        Primitive::BroadcastTo(_) => {
            vec![Some(reduce_to(gd, v[0].len(), v[0].shape(), |_| 1.0)?)]
        }
        Primitive::DepthwiseConv2d => {
            let (x, k) = (v[0], v[1]);
            let geom = conv_geom("depthwise_conv2d", x, k.shape())?;
            let (dx, dk) = kernels::depthwise_backward(&geom, x.data(), k.data(), gd);
            vec![Some(like(x, dx)?), Some(like(k, dk)?)]
        }
        Primitive::Conv2d => {
            let (x, w) = (v[0], v[1]);
            let geom = conv_geom("conv2d", x, w.shape())?;
            let cout = w.shape()[3];
            let rows = geom.batch * geom.height * geom.width;
            let inner = geom.kh * geom.kw * geom.channels;
            let gx = if wanted[0] {
                let mut dcols = vec![0.0; rows * inner];
                kernels::gemm(rows, cout, inner, gd, false, w.data(), true, &mut dcols, false);
                Some(like(x, kernels::col2im(&geom, &dcols))?)
            } else {
                None
            };
            let gw = if wanted[1] {
                let cols = kernels::im2col(&geom, x.data());
                let mut dw = vec![0.0; inner * cout];
                kernels::gemm(inner, rows, cout, &cols, true, gd, false, &mut dw, false);
                Some(like(w, dw)?)
            } else {
                None
            };
            vec![gx, gw]
        }
        Primitive::BatchNorm { .. } => {
            let Saved::BatchNorm { xhat, inv_std, .. } = saved else {
                return Err(Error::invalid("batch norm node lost its saved state"));
            };
            let (x, gamma) = (v[0], v[1]);
            let c = gamma.len();
            let n = (x.len() / c) as f64;
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for (grow, hrow) in gd.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                for ch in 0..c {
                    dgamma[ch] += grow[ch] * hrow[ch];
                    dbeta[ch] += grow[ch];
                }
            }
            let gx = if wanted[0] {
                let mut dx = Vec::with_capacity(x.len());
                for (grow, hrow) in gd.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for ch in 0..c {
                        let gm = gamma.data()[ch];
                        dx.push(
                            gm * inv_std[ch] / n
                                * (n * grow[ch] - dbeta[ch] - hrow[ch] * dgamma[ch]),
                        );
                    }
                }
                Some(like(x, dx)?)
            } else {
                None
            };
            vec![
                gx,
                Some(Tensor::new(vec![c], dgamma)?),
                Some(Tensor::new(vec![c], dbeta)?),
            ]
        }
    })
}
