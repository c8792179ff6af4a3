use std::cell::{Ref, RefCell};

use super::ops::{self, ConvDims};
use super::Tensor;
use crate::error::{Error, Result};

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    /// `x` viewed as `[outer, channels, inner]` plus `bias[channels]`.
    BiasAdd { x: usize, bias: usize, inner: usize },
    MatMul(usize, usize),
    Conv2d { x: usize, w: usize, dims: ConvDims },
    Relu(usize),
    MaxPool2 { x: usize, argmax: Vec<usize> },
    GlobalAvgPool { x: usize, area: usize },
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    SumSquares(usize),
    L1Norm(usize),
    Softmax(usize),
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<f64> },
    Clamp { x: usize, lo: f64, hi: f64 },
    /// Zero gradient, so the input is not recorded.
    Sign,
    MulConst { x: usize, factor: Vec<f64> },
    AddConst(usize),
    /// `out[i] = x[index[i]]`, or 0 where the index is `None`.
    Gather { x: usize, index: Vec<Option<usize>> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// Not `Sync`; use one tape per thread.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.tape.nodes.borrow()[self.id].value.shape())
    }
}

/// Gradients produced by [`Tape::backward`], addressed by the `Var`s that
/// were created on the same tape.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; an all-zero tensor when the loss does not
    /// depend on it.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        let shape = self.shapes[v.id].clone();
        match &self.grads[v.id] {
            Some(g) => Tensor { shape, data: g.clone() },
            None => Tensor::zeros(&shape),
        }
    }

    /// Moves the gradient out; subsequent calls return zeros.
    pub fn take(&mut self, v: Var<'_>) -> Tensor {
        let shape = self.shapes[v.id].clone();
        match self.grads[v.id].take() {
            Some(data) => Tensor { shape, data },
            None => Tensor::zeros(&shape),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient. Ops whose parents are all
    /// constants skip gradient bookkeeping entirely.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn derived(&self, value: Tensor, op: Op, parents: &[usize]) -> Var<'_> {
        let rg = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        self.push(value, op, rg)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);

        for i in (0..=loss.id).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let g = match &upper[0] {
                Some(g) => g.as_slice(),
                None => continue,
            };
            propagate(&nodes, node, g, lower);
        }

        // Only leaves are addressable from outside in a meaningful way, but
        // keep everything so intermediate Vars can be inspected in tests.
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Zero-initialized accumulation buffer for parent `p`, or `None` when `p`
/// does not need a gradient.
fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], p: usize) -> Option<&'a mut [f64]> {
    if !nodes[p].requires_grad {
        return None;
    }
    let n = nodes[p].value.len();
    Some(grads[p].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |p: usize| nodes[p].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for p in [*a, *b] {
                if let Some(s) = slot(nodes, grads, p) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(s) = slot(nodes, grads, *a) {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
            }
            if let Some(s) = slot(nodes, grads, *b) {
                s.iter_mut().zip(g).for_each(|(s, g)| *s -= g);
            }
        }
        Op::Mul(a, b) => {
            if let Some(s) = slot(nodes, grads, *a) {
                for ((s, g), o) in s.iter_mut().zip(g).zip(val(*b)) {
                    *s += g * o;
                }
            }
            if let Some(s) = slot(nodes, grads, *b) {
                for ((s, g), o) in s.iter_mut().zip(g).zip(val(*a)) {
                    *s += g * o;
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(s) = slot(nodes, grads, *a) {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += c * g);
            }
        }
        Op::BiasAdd { x, bias, inner } => {
            if let Some(s) = slot(nodes, grads, *x) {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
            }
            if let Some(s) = slot(nodes, grads, *bias) {
                let c = s.len();
                for (chunk_idx, chunk) in g.chunks(*inner).enumerate() {
                    s[chunk_idx % c] += chunk.iter().sum::<f64>();
                }
            }
        }
        Op::MatMul(a, b) => {
            let (sa, sb) = (nodes[*a].value.shape(), nodes[*b].value.shape());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            if let Some(s) = slot(nodes, grads, *a) {
                ops::matmul_grad_a(g, val(*b), m, k, n, s);
            }
            if let Some(s) = slot(nodes, grads, *b) {
                ops::matmul_grad_b(val(*a), g, m, k, n, s);
            }
        }
        Op::Conv2d { x, w, dims } => {
            if let Some(s) = slot(nodes, grads, *x) {
                ops::conv2d_grad_input(g, val(*w), *dims, s);
            }
            if let Some(s) = slot(nodes, grads, *w) {
                ops::conv2d_grad_weight(g, val(*x), *dims, s);
            }
        }
        Op::Relu(a) => {
            if let Some(s) = slot(nodes, grads, *a) {
                for ((s, g), &x) in s.iter_mut().zip(g).zip(val(*a)) {
                    if x > 0.0 {
                        *s += g;
                    }
                }
            }
        }
        Op::MaxPool2 { x, argmax } => {
            if let Some(s) = slot(nodes, grads, *x) {
                for (&j, g) in argmax.iter().zip(g) {
                    s[j] += g;
                }
            }
        }
        Op::GlobalAvgPool { x, area } => {
            if let Some(s) = slot(nodes, grads, *x) {
                let inv = 1.0 / *area as f64;
                for (plane, gv) in s.chunks_mut(*area).zip(g) {
                    plane.iter_mut().for_each(|v| *v += gv * inv);
                }
            }
        }
        Op::Reshape(a) | Op::AddConst(a) => {
            if let Some(s) = slot(nodes, grads, *a) {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
            }
        }
        Op::Sum(a) => {
            if let Some(s) = slot(nodes, grads, *a) {
                s.iter_mut().for_each(|s| *s += g[0]);
            }
        }
        Op::Mean(a) => {
            if let Some(s) = slot(nodes, grads, *a) {
                let d = g[0] / s.len() as f64;
                s.iter_mut().for_each(|s| *s += d);
            }
        }
        Op::SumSquares(a) => {
            if let Some(s) = slot(nodes, grads, *a) {
                for (s, &x) in s.iter_mut().zip(val(*a)) {
                    *s += 2.0 * x * g[0];
                }
            }
        }
        Op::L1Norm(a) => {
            if let Some(s) = slot(nodes, grads, *a) {
                for (s, &x) in s.iter_mut().zip(val(*a)) {
                    *s += super::sign(x) * g[0];
                }
            }
        }
        Op::Softmax(a) => {
            if let Some(s) = slot(nodes, grads, *a) {
                let y = node.value.data();
                let c = *node.value.shape().last().unwrap_or(&1);
                for ((srow, grow), yrow) in s.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for ((s, g), y) in srow.iter_mut().zip(grow).zip(yrow) {
                        *s += y * (g - dot);
                    }
                }
            }
        }
        Op::CrossEntropy { logits, labels, probs } => {
            if let Some(s) = slot(nodes, grads, *logits) {
                let b = labels.len();
                let c = probs.len() / b;
                let scale = g[0] / b as f64;
                for (row, &y) in labels.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == y { 1.0 } else { 0.0 };
                        s[row * c + j] += scale * (probs[row * c + j] - onehot);
                    }
                }
            }
        }
        Op::Clamp { x, lo, hi } => {
            if let Some(s) = slot(nodes, grads, *x) {
                for ((s, g), &v) in s.iter_mut().zip(g).zip(val(*x)) {
                    if v >= *lo && v <= *hi {
                        *s += g;
                    }
                }
            }
        }
        Op::Sign => {}
        Op::MulConst { x, factor } => {
            if let Some(s) = slot(nodes, grads, *x) {
                for ((s, g), f) in s.iter_mut().zip(g).zip(factor) {
                    *s += g * f;
                }
            }
        }
        Op::Gather { x, index } => {
            if let Some(s) = slot(nodes, grads, *x) {
                for (idx, g) in index.iter().zip(g) {
                    if let Some(j) = idx {
                        s[*j] += g;
                    }
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    /// Borrow of the recorded value. Do not hold it across op calls on the
    /// same tape.
    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn unary(&self, op: Op, f: impl FnOnce(&Tensor) -> Tensor) -> Var<'t> {
        let out = f(&self.value());
        self.tape.derived(out, op, &[self.id])
    }

    fn binary_same_shape(
        &self,
        other: Var<'t>,
        name: &str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let out = {
            let (a, b) = (self.value(), other.value());
            a.expect_same_shape(&b, name)?;
            a.zip_map(&b, f)?
        };
        Ok(self.tape.derived(out, op, &[self.id, other.id]))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_same_shape(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_same_shape(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_same_shape(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |t| t.map(|v| v * c))
    }

    /// Adds a constant tensor of the same shape (no gradient to the constant).
    pub fn add_const(&self, c: &Tensor) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            a.zip_map(c, |x, y| x + y)?
        };
        Ok(self.tape.derived(out, Op::AddConst(self.id), &[self.id]))
    }

    /// Elementwise product with a constant tensor (dropout masks, fixed weights).
    pub fn mul_const(&self, c: &Tensor) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            a.zip_map(c, |x, y| x * y)?
        };
        Ok(self.tape.derived(
            out,
            Op::MulConst {
                x: self.id,
                factor: c.data().to_vec(),
            },
            &[self.id],
        ))
    }

    /// Broadcast-add `bias[C]` along axis 1 of a `[B, C, ...]` tensor.
    pub fn bias_add(&self, bias: Var<'t>) -> Result<Var<'t>> {
        let (out, inner) = {
            let (x, b) = (self.value(), bias.value());
            let xs = x.shape();
            if xs.len() < 2 || b.shape().len() != 1 || b.len() != xs[1] {
                return Err(Error::shape(format!(
                    "bias_add: bias {:?} does not match axis 1 of {:?}",
                    b.shape(),
                    xs
                )));
            }
            let inner: usize = xs[2..].iter().product();
            let c = xs[1];
            let mut data = x.data().to_vec();
            for (i, chunk) in data.chunks_mut(inner).enumerate() {
                let bv = b.data()[i % c];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
            (Tensor { shape: xs.to_vec(), data }, inner)
        };
        Ok(self.tape.derived(
            out,
            Op::BiasAdd {
                x: self.id,
                bias: bias.id,
                inner,
            },
            &[self.id, bias.id],
        ))
    }

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let out = {
            let (a, b) = (self.value(), other.value());
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(Error::shape(format!("matmul: incompatible shapes {sa:?} and {sb:?}")));
            }
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let mut data = vec![0.0; m * n];
            ops::matmul_acc(a.data(), b.data(), m, k, n, &mut data);
            Tensor { shape: vec![m, n], data }
        };
        Ok(self.tape.derived(out, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    /// Stride-1 2-D convolution with symmetric zero padding.
    /// Input `[B, Cin, H, W]`, weight `[Cout, Cin, K, K]`.
    pub fn conv2d(&self, weight: Var<'t>, pad: usize) -> Result<Var<'t>> {
        let (out, dims) = {
            let (x, w) = (self.value(), weight.value());
            let (sx, sw) = (x.shape(), w.shape());
            if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] {
                return Err(Error::shape(format!("conv2d: input {sx:?} incompatible with weight {sw:?}")));
            }
            if sx[2] + 2 * pad < sw[2] || sx[3] + 2 * pad < sw[3] {
                return Err(Error::shape(format!("conv2d: kernel {sw:?} larger than padded input {sx:?}")));
            }
            let dims = ConvDims {
                batch: sx[0],
                c_in: sx[1],
                h: sx[2],
                w: sx[3],
                c_out: sw[0],
                k: sw[2],
                pad,
            };
            let shape = vec![dims.batch, dims.c_out, dims.out_h(), dims.out_w()];
            let mut data = vec![0.0; shape.iter().product()];
            ops::conv2d_forward(x.data(), w.data(), dims, &mut data);
            (Tensor { shape, data }, dims)
        };
        Ok(self.tape.derived(
            out,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                dims,
            },
            &[self.id, weight.id],
        ))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |t| t.map(|v| if v > 0.0 { v } else { 0.0 }))
    }

    /// 2x2 max pooling, stride 2, over the last two axes of a 4-D tensor.
    pub fn max_pool2(&self) -> Result<Var<'t>> {
        let (out, argmax) = {
            let x = self.value();
            let s = x.shape();
            if s.len() != 4 || s[2] < 2 || s[3] < 2 {
                return Err(Error::shape(format!("max_pool2: need [B,C,H>=2,W>=2], got {s:?}")));
            }
            let (vals, idx) = ops::maxpool2(x.data(), s[0] * s[1], s[2], s[3]);
            (
                Tensor {
                    shape: vec![s[0], s[1], s[2] / 2, s[3] / 2],
                    data: vals,
                },
                idx,
            )
        };
        Ok(self.tape.derived(out, Op::MaxPool2 { x: self.id, argmax }, &[self.id]))
    }

    /// `[B, C, H, W] -> [B, C]`
    pub fn global_avg_pool(&self) -> Result<Var<'t>> {
        let (out, area) = {
            let x = self.value();
            let s = x.shape();
            if s.len() != 4 {
                return Err(Error::shape(format!("global_avg_pool: need 4-D input, got {s:?}")));
            }
            let area = s[2] * s[3];
            let data = x.data().chunks(area).map(|p| p.iter().sum::<f64>() / area as f64).collect();
            (
                Tensor {
                    shape: vec![s[0], s[1]],
                    data,
                },
                area,
            )
        };
        Ok(self.tape.derived(out, Op::GlobalAvgPool { x: self.id, area }, &[self.id]))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().reshape(shape)?;
        Ok(self.tape.derived(out, Op::Reshape(self.id), &[self.id]))
    }

    pub fn sum(&self) -> Var<'t> {
        self.unary(Op::Sum(self.id), |t| Tensor::scalar(t.sum()))
    }

    pub fn mean(&self) -> Var<'t> {
        self.unary(Op::Mean(self.id), |t| Tensor::scalar(t.sum() / t.len().max(1) as f64))
    }

    pub fn sum_squares(&self) -> Var<'t> {
        self.unary(Op::SumSquares(self.id), |t| {
            Tensor::scalar(t.data().iter().map(|v| v * v).sum())
        })
    }

    pub fn l1_norm(&self) -> Var<'t> {
        self.unary(Op::L1Norm(self.id), |t| Tensor::scalar(t.l1_norm()))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Var<'t> {
        self.unary(Op::Softmax(self.id), |t| {
            let c = *t.shape().last().unwrap_or(&1);
            let data = t.data().chunks(c).flat_map(super::softmax).collect();
            Tensor {
                shape: t.shape().to_vec(),
                data,
            }
        })
    }

    /// Mean softmax cross-entropy of `[B, C]` logits against class labels.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<'t>> {
        let (loss, probs) = {
            let x = self.value();
            let s = x.shape();
            if s.len() != 2 || s[0] != labels.len() {
                return Err(Error::shape(format!(
                    "cross_entropy: logits {s:?} vs {} labels",
                    labels.len()
                )));
            }
            let c = s[1];
            if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
                return Err(Error::shape(format!("cross_entropy: label {bad} out of range for {c} classes")));
            }
            let mut probs = Vec::with_capacity(x.len());
            let mut total = 0.0;
            for (row, &y) in x.data().chunks(c).zip(labels) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
                total += lse - row[y];
                probs.extend(row.iter().map(|z| (z - lse).exp()));
            }
            (total / labels.len() as f64, probs)
        };
        Ok(self.tape.derived(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: self.id,
                labels: labels.to_vec(),
                probs,
            },
            &[self.id],
        ))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(Op::Clamp { x: self.id, lo, hi }, |t| t.clamp(lo, hi))
    }

    /// Elementwise sign; its gradient is zero everywhere.
    pub fn sign(&self) -> Var<'t> {
        self.unary(Op::Sign, |t| t.sign())
    }

    /// Index-mapped copy: `out[i] = self[index[i]]` or 0 for `None`.
    pub fn gather(&self, index: Vec<Option<usize>>, shape: &[usize]) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            if index.len() != shape.iter().product::<usize>() {
                return Err(Error::shape(format!("gather: {} indices for shape {shape:?}", index.len())));
            }
            if let Some(bad) = index.iter().flatten().find(|&&j| j >= x.len()) {
                return Err(Error::shape(format!("gather: index {bad} out of range {}", x.len())));
            }
            let data = index.iter().map(|i| i.map_or(0.0, |j| x.data()[j])).collect();
            Tensor {
                shape: shape.to_vec(),
                data,
            }
        };
        Ok(self.tape.derived(out, Op::Gather { x: self.id, index }, &[self.id]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(data: &[f64]) -> Tensor {
        Tensor::vector(data.to_vec())
    }

    #[test]
    fn relu_forward_and_inactive_grad() {
        let tape = Tape::new();
        let x = tape.leaf(v(&[-1.0, 0.0, 2.0]));
        let r = x.relu();
        assert_eq!(r.value().data(), &[0.0, 0.0, 2.0]);
        let g = tape.backward(r.sum()).unwrap();
        // gradient at exactly 0 is 0
        assert_eq!(g.wrt(x).data(), &[0.0, 0.0, 1.0]);

        let tape = Tape::new();
        let x = tape.leaf(v(&[-3.0]));
        let g = tape.backward(x.relu().sum()).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0]);
    }

    #[test]
    fn softmax_uniform_logits() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 4], vec![0.0; 4]).unwrap());
        let s = x.softmax();
        for &p in s.value().data() {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_two_class() {
        // -ln(e^2 / (e^2 + 1)) evaluated by hand
        let expected = -((2.0f64).exp() / ((2.0f64).exp() + 1.0)).ln();
        assert!((expected - 0.126_928_011_042_973).abs() < 1e-12);
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![2.0, 0.0]).unwrap());
        let l = x.cross_entropy(&[0]).unwrap();
        assert!((l.value().item() - expected).abs() < 1e-14);
    }

    #[test]
    fn sum_of_squares_grad() {
        let tape = Tape::new();
        let x = tape.leaf(v(&[1.0, 2.0]));
        let l = x.mul(x).unwrap().sum();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn ce_gradient_is_softmax_minus_onehot() {
        let logits = [0.3, -1.2, 2.0, 0.5];
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 4], logits.to_vec()).unwrap());
        let g = tape.backward(x.cross_entropy(&[2]).unwrap()).unwrap();
        let p = crate::tensor::softmax(&logits);
        for (j, (&gj, &pj)) in g.wrt(x).data().iter().zip(&p).enumerate() {
            let expect = pj - if j == 2 { 1.0 } else { 0.0 };
            assert!((gj - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn unused_leaf_gets_zero_grad() {
        let tape = Tape::new();
        let x = tape.leaf(v(&[1.0, 2.0]));
        let unused = tape.leaf(v(&[5.0, 6.0, 7.0]));
        let g = tape.backward(x.sum()).unwrap();
        assert_eq!(g.wrt(unused).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(v(&[1.0, 2.0]));
        assert!(matches!(tape.backward(x.relu()), Err(Error::Shape(_))));
    }

    #[test]
    fn shape_errors_are_descriptive() {
        let tape = Tape::new();
        let a = tape.leaf(v(&[1.0, 2.0]));
        let b = tape.leaf(v(&[1.0, 2.0, 3.0]));
        let err = a.add(b).unwrap_err().to_string();
        assert!(err.contains("[2]") && err.contains("[3]"), "{err}");
        let m = tape.leaf(Tensor::zeros(&[2, 3]));
        assert!(m.matmul(m).is_err());
    }

    #[test]
    fn clamp_stays_in_bounds() {
        let tape = Tape::new();
        let x = tape.leaf(v(&[-5.0, 0.3, 9.0]));
        let c = x.clamp(0.0, 1.0);
        assert_eq!(c.value().data(), &[0.0, 0.3, 1.0]);
    }

    #[test]
    fn constants_do_not_receive_gradients() {
        let tape = Tape::new();
        let w = tape.constant(v(&[3.0]));
        let x = tape.leaf(v(&[2.0]));
        let g = tape.backward(w.mul(x).unwrap().sum()).unwrap();
        assert_eq!(g.wrt(x).data(), &[3.0]);
        assert_eq!(g.wrt(w).data(), &[0.0]);
    }
}
