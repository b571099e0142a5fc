//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive applied to its nodes and replays the
//! chain rule in reverse on [`Tape::backward`]. Graphs are rebuilt per
//! optimizer step; parameters live outside the tape and enter as leaves.

use rayon::prelude::*;

use super::tensor::{broadcast_binary, reduce_to_shape, strides_of, Scalar, Tensor};
use thiserror::Error;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Error)]
pub enum NumericError {
    #[error("non-finite value produced by `{op}` (node {node})")]
    NonFinite { op: &'static str, node: usize },
    #[error("backward target must be a scalar, got shape {0:?}")]
    NonScalarObjective(Vec<usize>),
}

#[derive(Debug, Clone)]
enum Op<T: Scalar> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize, T),
    MulScalar(usize, T),
    Matmul(usize, usize),
    BatchMatmul(usize, usize),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    Relu(usize),
    Silu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Square(usize),
    Neg(usize),
    Clamp(usize, T, T),
    SumAll(usize),
    MeanAll(usize),
    SumLast(usize),
    MaskedSoftmax(usize, Tensor<T>),
    RmsNorm(usize, usize, T),
    Concat(Vec<usize>, usize),
    SliceAxis { input: usize, axis: usize, start: usize, len: usize },
    ExtractPatches { input: usize, kh: usize, kw: usize, stride: usize, pad: usize },
    UpsampleNearest2x(usize),
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::Matmul(..) => "matmul",
            Op::BatchMatmul(..) => "batch_matmul",
            Op::Permute(..) => "permute",
            Op::Reshape(..) => "reshape",
            Op::Relu(..) => "relu",
            Op::Silu(..) => "silu",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Sqrt(..) => "sqrt",
            Op::Square(..) => "square",
            Op::Neg(..) => "neg",
            Op::Clamp(..) => "clamp",
            Op::SumAll(..) => "sum_all",
            Op::MeanAll(..) => "mean_all",
            Op::SumLast(..) => "sum_last",
            Op::MaskedSoftmax(..) => "masked_softmax",
            Op::RmsNorm(..) => "rms_norm",
            Op::Concat(..) => "concat",
            Op::SliceAxis { .. } => "slice_axis",
            Op::ExtractPatches { .. } => "extract_patches",
            Op::UpsampleNearest2x(..) => "upsample_nearest_2x",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Matmul(a, b) | Op::BatchMatmul(a, b) => {
                vec![*a, *b]
            }
            Op::RmsNorm(a, g, _) => vec![*a, *g],
            Op::AddScalar(a, _)
            | Op::MulScalar(a, _)
            | Op::Permute(a, _)
            | Op::Reshape(a)
            | Op::Relu(a)
            | Op::Silu(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Sqrt(a)
            | Op::Square(a)
            | Op::Neg(a)
            | Op::Clamp(a, _, _)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::SumLast(a)
            | Op::MaskedSoftmax(a, _)
            | Op::SliceAxis { input: a, .. }
            | Op::ExtractPatches { input: a, .. }
            | Op::UpsampleNearest2x(a) => vec![*a],
            Op::Concat(xs, _) => xs.clone(),
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by a backward pass, indexed by node.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the objective w.r.t. `id`; zero-shaped nodes that did not
    /// participate return `None`.
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        let requires_grad = match &op {
            Op::Leaf => false, // set by leaf()/constant()
            other => other.inputs().iter().any(|&i| self.nodes[i].requires_grad),
        };
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Differentiable input (parameter or anything needing a gradient).
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        NodeId(self.nodes.len() - 1)
    }

    /// Non-differentiable input (data, masks, targets).
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        NodeId(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = broadcast_binary(self.value(a), self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = broadcast_binary(self.value(a), self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = broadcast_binary(self.value(a), self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = broadcast_binary(self.value(a), self.value(b), |x, y| x / y);
        self.push(v, Op::Div(a.0, b.0))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a.0, c))
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::MulScalar(a.0, c))
    }

    /// `[m, k] @ [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.rank(), 2, "matmul lhs must be rank 2, got {:?}", va.shape());
        assert_eq!(vb.rank(), 2, "matmul rhs must be rank 2, got {:?}", vb.shape());
        let (m, k) = (va.shape()[0], va.shape()[1]);
        let (k2, n) = (vb.shape()[0], vb.shape()[1]);
        assert_eq!(k, k2, "matmul inner dims differ: {:?} vs {:?}", va.shape(), vb.shape());
        let mut out = Tensor::zeros(&[m, n]);
        T::gemm(m, k, n, T::one(), va.data(), vb.data(), T::zero(), out.data_mut());
        self.push(out, Op::Matmul(a.0, b.0))
    }

    /// `[b, m, k] @ [b, k, n] -> [b, m, n]`.
    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.rank(), 3, "batch_matmul lhs must be rank 3, got {:?}", va.shape());
        assert_eq!(vb.rank(), 3, "batch_matmul rhs must be rank 3, got {:?}", vb.shape());
        let (bs, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        let (bs2, k2, n) = (vb.shape()[0], vb.shape()[1], vb.shape()[2]);
        assert_eq!(bs, bs2, "batch_matmul batch dims differ");
        assert_eq!(k, k2, "batch_matmul inner dims differ");
        let mut out = Tensor::zeros(&[bs, m, n]);
        let (da, db) = (va.data(), vb.data());
        out.data_mut().par_chunks_mut(m * n).enumerate().for_each(|(i, c)| {
            T::gemm(m, k, n, T::one(), &da[i * m * k..(i + 1) * m * k], &db[i * k * n..(i + 1) * k * n], T::zero(), c);
        });
        self.push(out, Op::BatchMatmul(a.0, b.0))
    }

    pub fn permute(&mut self, a: NodeId, axes: &[usize]) -> NodeId {
        let v = permute_tensor(self.value(a), axes);
        self.push(v, Op::Permute(a.0, axes.to_vec()))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = self.value(a).clone().reshaped(shape);
        self.push(v, Op::Reshape(a.0))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(v, Op::Relu(a.0))
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let one = T::one();
        let v = self.value(a).map(|x| x / (one + (-x).exp()));
        self.push(v, Op::Silu(a.0))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.tanh());
        self.push(v, Op::Tanh(a.0))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let one = T::one();
        let v = self.value(a).map(|x| one / (one + (-x).exp()));
        self.push(v, Op::Sigmoid(a.0))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.exp());
        self.push(v, Op::Exp(a.0))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.ln());
        self.push(v, Op::Ln(a.0))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.sqrt());
        self.push(v, Op::Sqrt(a.0))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a.0))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| -x);
        self.push(v, Op::Neg(a.0))
    }

    pub fn clamp(&mut self, a: NodeId, lo: T, hi: T) -> NodeId {
        let v = self.value(a).map(|x| if x < lo { lo } else if x > hi { hi } else { x });
        self.push(v, Op::Clamp(a.0, lo, hi))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a.0))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = T::from_f64(self.value(a).len() as f64);
        let s: T = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s / n), Op::MeanAll(a.0))
    }

    /// Sum over the last axis: `[.., n] -> [..]`.
    pub fn sum_last(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        assert!(va.rank() >= 1, "sum_last needs rank >= 1");
        let n = *va.shape().last().unwrap();
        let out_shape: Vec<usize> = va.shape()[..va.rank() - 1].to_vec();
        let rows = va.len() / n;
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            out.push(va.data()[r * n..(r + 1) * n].iter().copied().sum());
        }
        let shape = if out_shape.is_empty() { vec![1] } else { out_shape };
        self.push(Tensor::new(&shape, out), Op::SumLast(a.0))
    }

    /// Softmax over the last axis restricted to positions where `mask` is
    /// nonzero. `mask` must match the trailing two axes of `a`; masked
    /// positions produce exactly zero and receive no gradient, so the output
    /// is bit-independent of the values they hold.
    pub fn masked_softmax(&mut self, a: NodeId, mask: &Tensor<T>) -> NodeId {
        let va = self.value(a);
        assert!(va.rank() >= 2, "masked_softmax needs rank >= 2");
        let (rows, cols) = (va.shape()[va.rank() - 2], va.shape()[va.rank() - 1]);
        assert_eq!(mask.shape(), &[rows, cols], "mask shape must match trailing axes");
        let outer = va.len() / (rows * cols);
        let mut out = vec![T::zero(); va.len()];
        let data = va.data();
        for o in 0..outer {
            for r in 0..rows {
                let base = (o * rows + r) * cols;
                let mrow = &mask.data()[r * cols..(r + 1) * cols];
                let mut max = T::neg_infinity();
                for c in 0..cols {
                    if mrow[c] != T::zero() && data[base + c] > max {
                        max = data[base + c];
                    }
                }
                assert!(max.is_finite() || max != T::neg_infinity(), "masked_softmax row {r} fully masked");
                let mut denom = T::zero();
                for c in 0..cols {
                    if mrow[c] != T::zero() {
                        let e = (data[base + c] - max).exp();
                        out[base + c] = e;
                        denom += e;
                    }
                }
                for c in 0..cols {
                    if mrow[c] != T::zero() {
                        out[base + c] /= denom;
                    }
                }
            }
        }
        let v = Tensor::new(va.shape(), out);
        self.push(v, Op::MaskedSoftmax(a.0, mask.clone()))
    }

    /// Root-mean-square normalization over the last axis with a learned gain.
    pub fn rms_norm(&mut self, a: NodeId, gain: NodeId, eps: T) -> NodeId {
        let va = self.value(a);
        let vg = self.value(gain);
        let n = *va.shape().last().expect("rms_norm needs rank >= 1");
        assert_eq!(vg.shape(), &[n], "gain must be [last_dim]");
        let rows = va.len() / n;
        let mut out = vec![T::zero(); va.len()];
        let inv_n = T::from_f64(1.0 / n as f64);
        for r in 0..rows {
            let row = &va.data()[r * n..(r + 1) * n];
            let ms: T = row.iter().map(|&x| x * x).sum::<T>() * inv_n;
            let inv_rms = T::one() / (ms + eps).sqrt();
            for c in 0..n {
                out[r * n + c] = row[c] * inv_rms * vg.data()[c];
            }
        }
        let v = Tensor::new(va.shape(), out);
        self.push(v, Op::RmsNorm(a.0, gain.0, eps))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> NodeId {
        assert!(!inputs.is_empty());
        let shapes: Vec<Vec<usize>> = inputs.iter().map(|&i| self.value(i).shape().to_vec()).collect();
        let rank = shapes[0].len();
        assert!(axis < rank);
        for s in &shapes {
            assert_eq!(s.len(), rank);
            for d in 0..rank {
                if d != axis {
                    assert_eq!(s[d], shapes[0][d], "concat extents differ off-axis");
                }
            }
        }
        let total_axis: usize = shapes.iter().map(|s| s[axis]).sum();
        let mut out_shape = shapes[0].clone();
        out_shape[axis] = total_axis;
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for (i, &inp) in inputs.iter().enumerate() {
                let alen = shapes[i][axis];
                let src = self.value(inp).data();
                let start = o * alen * inner;
                out.extend_from_slice(&src[start..start + alen * inner]);
            }
        }
        let v = Tensor::new(&out_shape, out);
        self.push(v, Op::Concat(inputs.iter().map(|i| i.0).collect(), axis))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn slice_axis(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> NodeId {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        assert!(axis < shape.len());
        assert!(start + len <= shape[axis], "slice {start}+{len} exceeds extent {}", shape[axis]);
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&va.data()[base..base + len * inner]);
        }
        let v = Tensor::new(&out_shape, out);
        self.push(v, Op::SliceAxis { input: a.0, axis, start, len })
    }

    /// im2col: `[B, C, H, W] -> [B, OH, OW, C*kh*kw]` with zero padding.
    pub fn extract_patches(&mut self, a: NodeId, kh: usize, kw: usize, stride: usize, pad: usize) -> NodeId {
        let va = self.value(a);
        assert_eq!(va.rank(), 4, "extract_patches input must be [B, C, H, W]");
        let (b, c, h, w) = (va.shape()[0], va.shape()[1], va.shape()[2], va.shape()[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let psize = c * kh * kw;
        let mut out = vec![T::zero(); b * oh * ow * psize];
        let data = va.data();
        out.par_chunks_mut(oh * ow * psize).enumerate().for_each(|(bi, obuf)| {
            for oy in 0..oh {
                for ox in 0..ow {
                    let pbase = (oy * ow + ox) * psize;
                    for ci in 0..c {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                obuf[pbase + (ci * kh + ky) * kw + kx] =
                                    data[((bi * c + ci) * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                }
            }
        });
        let v = Tensor::new(&[b, oh, ow, psize], out);
        self.push(v, Op::ExtractPatches { input: a.0, kh, kw, stride, pad })
    }

    /// Nearest-neighbour 2x spatial upsampling of `[B, C, H, W]`.
    pub fn upsample_nearest_2x(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        assert_eq!(va.rank(), 4, "upsample input must be [B, C, H, W]");
        let (b, c, h, w) = (va.shape()[0], va.shape()[1], va.shape()[2], va.shape()[3]);
        let mut out = vec![T::zero(); b * c * 4 * h * w];
        let data = va.data();
        for bc in 0..b * c {
            for y in 0..h {
                for x in 0..w {
                    let v = data[(bc * h + y) * w + x];
                    let base = bc * 4 * h * w;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            out[base + (2 * y + dy) * 2 * w + 2 * x + dx] = v;
                        }
                    }
                }
            }
        }
        let v = Tensor::new(&[b, c, 2 * h, 2 * w], out);
        self.push(v, Op::UpsampleNearest2x(a.0))
    }

    /// Reverse sweep from a scalar objective. Returns the gradient of the
    /// objective with respect to every participating node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>, NumericError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NumericError::NonScalarObjective(lv.shape().to_vec()));
        }
        if !lv.item().is_finite() {
            // Identify the first primitive that produced a non-finite value.
            for (i, n) in self.nodes.iter().enumerate() {
                if !n.value.all_finite() {
                    return Err(NumericError::NonFinite { op: n.op.name(), node: i });
                }
            }
            return Err(NumericError::NonFinite { op: self.nodes[loss.0].op.name(), node: loss.0 });
        }

        // Restrict the sweep to ancestors of the objective that need grads.
        let mut needed = vec![false; self.nodes.len()];
        let mut stack = vec![loss.0];
        needed[loss.0] = true;
        while let Some(i) = stack.pop() {
            for j in self.nodes[i].op.inputs() {
                if self.nodes[j].requires_grad && !needed[j] {
                    needed[j] = true;
                    stack.push(j);
                }
            }
        }

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for i in (0..self.nodes.len()).rev() {
            if !needed[i] || grads[i].is_none() {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], target: usize, delta: Tensor<T>) {
        if !self.nodes[target].requires_grad {
            return;
        }
        debug_assert_eq!(delta.shape(), self.nodes[target].value.shape());
        match &mut grads[target] {
            Some(acc) => {
                for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                    *a += *d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let val = |j: usize| &self.nodes[j].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, reduce_to_shape(g, val(*a).shape()));
                self.accumulate(grads, *b, reduce_to_shape(g, val(*b).shape()));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, reduce_to_shape(g, val(*a).shape()));
                let neg = g.map(|x| -x);
                self.accumulate(grads, *b, reduce_to_shape(&neg, val(*b).shape()));
            }
            Op::Mul(a, b) => {
                let ga = broadcast_binary(g, val(*b), |x, y| x * y);
                let gb = broadcast_binary(g, val(*a), |x, y| x * y);
                self.accumulate(grads, *a, reduce_to_shape(&ga, val(*a).shape()));
                self.accumulate(grads, *b, reduce_to_shape(&gb, val(*b).shape()));
            }
            Op::Div(a, b) => {
                let ga = broadcast_binary(g, val(*b), |x, y| x / y);
                self.accumulate(grads, *a, reduce_to_shape(&ga, val(*a).shape()));
                // d(a/b)/db = -a / b^2
                let t = broadcast_binary(val(*a), val(*b), |x, y| -x / (y * y));
                let gb = broadcast_binary(g, &t, |x, y| x * y);
                self.accumulate(grads, *b, reduce_to_shape(&gb, val(*b).shape()));
            }
            Op::AddScalar(a, _) => self.accumulate(grads, *a, g.clone()),
            Op::MulScalar(a, c) => self.accumulate(grads, *a, g.map(|x| x * *c)),
            Op::Matmul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                // dA = G @ B^T, dB = A^T @ G
                let bt = transpose2(vb);
                let mut ga = Tensor::zeros(&[m, k]);
                T::gemm(m, n, k, T::one(), g.data(), bt.data(), T::zero(), ga.data_mut());
                let at = transpose2(va);
                let mut gb = Tensor::zeros(&[k, n]);
                T::gemm(k, m, n, T::one(), at.data(), g.data(), T::zero(), gb.data_mut());
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::BatchMatmul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (bs, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                let n = vb.shape()[2];
                let mut ga = Tensor::zeros(&[bs, m, k]);
                let mut gb = Tensor::zeros(&[bs, k, n]);
                let gd = g.data();
                ga.data_mut()
                    .par_chunks_mut(m * k)
                    .zip(gb.data_mut().par_chunks_mut(k * n))
                    .enumerate()
                    .for_each(|(ib, (gac, gbc))| {
                        let ab = &va.data()[ib * m * k..(ib + 1) * m * k];
                        let bb = &vb.data()[ib * k * n..(ib + 1) * k * n];
                        let gb_ = &gd[ib * m * n..(ib + 1) * m * n];
                        let bt = transpose_slice(bb, k, n);
                        T::gemm(m, n, k, T::one(), gb_, &bt, T::zero(), gac);
                        let at = transpose_slice(ab, m, k);
                        T::gemm(k, m, n, T::one(), &at, gb_, T::zero(), gbc);
                    });
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Permute(a, axes) => {
                let inv = inverse_permutation(axes);
                self.accumulate(grads, *a, permute_tensor(g, &inv));
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, g.clone().reshaped(val(*a).shape()));
            }
            Op::Relu(a) => {
                let va = val(*a);
                let delta = Tensor::new(
                    g.shape(),
                    g.data().iter().zip(va.data()).map(|(&gx, &x)| if x > T::zero() { gx } else { T::zero() }).collect(),
                );
                self.accumulate(grads, *a, delta);
            }
            Op::Silu(a) => {
                let va = val(*a);
                let one = T::one();
                let delta = Tensor::new(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(va.data())
                        .map(|(&gx, &x)| {
                            let s = one / (one + (-x).exp());
                            gx * s * (one + x * (one - s))
                        })
                        .collect(),
                );
                self.accumulate(grads, *a, delta);
            }
            Op::Tanh(a) => {
                let y = &self.nodes[i].value;
                let delta =
                    Tensor::new(g.shape(), g.data().iter().zip(y.data()).map(|(&gx, &yv)| gx * (T::one() - yv * yv)).collect());
                self.accumulate(grads, *a, delta);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                let delta =
                    Tensor::new(g.shape(), g.data().iter().zip(y.data()).map(|(&gx, &yv)| gx * yv * (T::one() - yv)).collect());
                self.accumulate(grads, *a, delta);
            }
            Op::Exp(a) => {
                let y = &self.nodes[i].value;
                let delta = Tensor::new(g.shape(), g.data().iter().zip(y.data()).map(|(&gx, &yv)| gx * yv).collect());
                self.accumulate(grads, *a, delta);
            }
            Op::Ln(a) => {
                let va = val(*a);
                let delta = Tensor::new(g.shape(), g.data().iter().zip(va.data()).map(|(&gx, &x)| gx / x).collect());
                self.accumulate(grads, *a, delta);
            }
            Op::Sqrt(a) => {
                let y = &self.nodes[i].value;
                let half = T::from_f64(0.5);
                let delta = Tensor::new(g.shape(), g.data().iter().zip(y.data()).map(|(&gx, &yv)| gx * half / yv).collect());
                self.accumulate(grads, *a, delta);
            }
            Op::Square(a) => {
                let va = val(*a);
                let two = T::from_f64(2.0);
                let delta = Tensor::new(g.shape(), g.data().iter().zip(va.data()).map(|(&gx, &x)| gx * two * x).collect());
                self.accumulate(grads, *a, delta);
            }
            Op::Neg(a) => self.accumulate(grads, *a, g.map(|x| -x)),
            Op::Clamp(a, lo, hi) => {
                let va = val(*a);
                let delta = Tensor::new(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(va.data())
                        .map(|(&gx, &x)| if x > *lo && x < *hi { gx } else { T::zero() })
                        .collect(),
                );
                self.accumulate(grads, *a, delta);
            }
            Op::SumAll(a) => {
                let gv = g.item();
                self.accumulate(grads, *a, Tensor::full(val(*a).shape(), gv));
            }
            Op::MeanAll(a) => {
                let n = T::from_f64(val(*a).len() as f64);
                let gv = g.item() / n;
                self.accumulate(grads, *a, Tensor::full(val(*a).shape(), gv));
            }
            Op::SumLast(a) => {
                let va = val(*a);
                let n = *va.shape().last().unwrap();
                let rows = va.len() / n;
                let mut delta = vec![T::zero(); va.len()];
                for r in 0..rows {
                    let gv = g.data()[r];
                    for c in 0..n {
                        delta[r * n + c] = gv;
                    }
                }
                self.accumulate(grads, *a, Tensor::new(va.shape(), delta));
            }
            Op::MaskedSoftmax(a, mask) => {
                let y = &self.nodes[i].value;
                let cols = *y.shape().last().unwrap();
                let rows = y.shape()[y.rank() - 2];
                let outer = y.len() / (rows * cols);
                let mut delta = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for r in 0..rows {
                        let base = (o * rows + r) * cols;
                        let mrow = &mask.data()[r * cols..(r + 1) * cols];
                        let mut dot = T::zero();
                        for c in 0..cols {
                            if mrow[c] != T::zero() {
                                dot += g.data()[base + c] * y.data()[base + c];
                            }
                        }
                        for c in 0..cols {
                            if mrow[c] != T::zero() {
                                delta[base + c] = y.data()[base + c] * (g.data()[base + c] - dot);
                            }
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(y.shape(), delta));
            }
            Op::RmsNorm(a, gain, eps) => {
                let va = val(*a);
                let vg = val(*gain);
                let n = *va.shape().last().unwrap();
                let rows = va.len() / n;
                let inv_n = T::from_f64(1.0 / n as f64);
                let mut da = vec![T::zero(); va.len()];
                let mut dg = vec![T::zero(); n];
                for r in 0..rows {
                    let row = &va.data()[r * n..(r + 1) * n];
                    let grow = &g.data()[r * n..(r + 1) * n];
                    let ms: T = row.iter().map(|&x| x * x).sum::<T>() * inv_n;
                    let rms = (ms + *eps).sqrt();
                    let inv_rms = T::one() / rms;
                    // s = sum_c g_c * gain_c * x_c
                    let mut s = T::zero();
                    for c in 0..n {
                        s += grow[c] * vg.data()[c] * row[c];
                    }
                    let k = s * inv_n * inv_rms * inv_rms * inv_rms;
                    for c in 0..n {
                        da[r * n + c] = grow[c] * vg.data()[c] * inv_rms - row[c] * k;
                        dg[c] += grow[c] * row[c] * inv_rms;
                    }
                }
                self.accumulate(grads, *a, Tensor::new(va.shape(), da));
                self.accumulate(grads, *gain, Tensor::new(&[n], dg));
            }
            Op::Concat(inputs, axis) => {
                let axis = *axis;
                let out_shape = self.nodes[i].value.shape().to_vec();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let mut offset = 0usize;
                for &inp in inputs {
                    let ishape = val(inp).shape().to_vec();
                    let alen = ishape[axis];
                    let mut delta = Vec::with_capacity(val(inp).len());
                    for o in 0..outer {
                        let base = (o * out_shape[axis] + offset) * inner;
                        delta.extend_from_slice(&g.data()[base..base + alen * inner]);
                    }
                    self.accumulate(grads, inp, Tensor::new(&ishape, delta));
                    offset += alen;
                }
            }
            Op::SliceAxis { input, axis, start, len } => {
                let ishape = val(*input).shape().to_vec();
                let outer: usize = ishape[..*axis].iter().product();
                let inner: usize = ishape[*axis + 1..].iter().product();
                let mut delta = vec![T::zero(); val(*input).len()];
                for o in 0..outer {
                    let dst = (o * ishape[*axis] + start) * inner;
                    let src = o * len * inner;
                    delta[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                self.accumulate(grads, *input, Tensor::new(&ishape, delta));
            }
            Op::ExtractPatches { input, kh, kw, stride, pad } => {
                let va = val(*input);
                let (b, c, h, w) = (va.shape()[0], va.shape()[1], va.shape()[2], va.shape()[3]);
                let oh = (h + 2 * pad - kh) / stride + 1;
                let ow = (w + 2 * pad - kw) / stride + 1;
                let psize = c * kh * kw;
                let mut delta = vec![T::zero(); va.len()];
                delta.par_chunks_mut(c * h * w).enumerate().for_each(|(bi, dbuf)| {
                    let gb = &g.data()[bi * oh * ow * psize..(bi + 1) * oh * ow * psize];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let pbase = (oy * ow + ox) * psize;
                            for ci in 0..c {
                                for ky in 0..*kh {
                                    let iy = (oy * stride + ky) as isize - *pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..*kw {
                                        let ix = (ox * stride + kx) as isize - *pad as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        dbuf[(ci * h + iy as usize) * w + ix as usize] +=
                                            gb[pbase + (ci * kh + ky) * kw + kx];
                                    }
                                }
                            }
                        }
                    }
                });
                self.accumulate(grads, *input, Tensor::new(va.shape(), delta));
            }
            Op::UpsampleNearest2x(a) => {
                let va = val(*a);
                let (b, c, h, w) = (va.shape()[0], va.shape()[1], va.shape()[2], va.shape()[3]);
                let mut delta = vec![T::zero(); va.len()];
                for bc in 0..b * c {
                    for y in 0..h {
                        for x in 0..w {
                            let base = bc * 4 * h * w;
                            let mut s = T::zero();
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    s += g.data()[base + (2 * y + dy) * 2 * w + 2 * x + dx];
                                }
                            }
                            delta[(bc * h + y) * w + x] = s;
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(va.shape(), delta));
            }
        }
    }
}

fn transpose2<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    Tensor::new(&[c, r], transpose_slice(t.data(), r, c))
}

fn transpose_slice<T: Scalar>(data: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = data[i * c + j];
        }
    }
    out
}

fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

fn permute_tensor<T: Scalar>(t: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    assert_eq!(axes.len(), t.rank(), "permute axes rank mismatch");
    let in_shape = t.shape();
    let in_strides = strides_of(in_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let walk_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = t.len();
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(t.data()[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += walk_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            off -= walk_strides[d] * out_shape[d];
        }
    }
    Tensor::new(&out_shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        // f(x) = sum(x^2), x = [1, 2] -> value 5, grad [2, 4]
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]));
        let sq = tape.square(x);
        let f = tape.sum_all(sq);
        assert_eq!(tape.value(f).item(), 5.0);
        let grads = tape.backward(f).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(&[3], vec![0.5, -1.0, 7.0]));
        let f = tape.sum_all(x);
        let grads = tape.backward(f).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn matmul_forward() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(Tensor::new(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]));
        let c = tape.matmul(a, b);
        assert_eq!(tape.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn non_scalar_objective_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]));
        let y = tape.square(x);
        assert!(matches!(tape.backward(y), Err(NumericError::NonScalarObjective(_))));
    }

    #[test]
    fn nan_identifies_offender() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(&[1], vec![-1.0]));
        let y = tape.ln(x); // NaN
        let f = tape.sum_all(y);
        match tape.backward(f) {
            Err(NumericError::NonFinite { op, .. }) => assert_eq!(op, "ln"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn masked_softmax_ignores_masked_positions() {
        let mut tape = Tape::<f64>::new();
        let mask = Tensor::new(&[1, 3], vec![1.0, 1.0, 0.0]);
        let x = tape.leaf(Tensor::new(&[1, 3], vec![0.0, 0.0, 1e9]));
        let y = tape.masked_softmax(x, &mask);
        assert_eq!(tape.value(y).data(), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn permute_roundtrip() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let p = tape.permute(x, &[2, 0, 1]);
        let back = tape.permute(p, &[1, 2, 0]);
        assert_eq!(tape.value(back).data(), tape.value(x).data());
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_fn(&[2, 3], |i| i as f64));
        let b = tape.constant(Tensor::from_fn(&[2, 2], |i| 100.0 + i as f64));
        let c = tape.concat(&[a, b], 1);
        assert_eq!(tape.value(c).shape(), &[2, 5]);
        let s = tape.slice_axis(c, 1, 3, 2);
        assert_eq!(tape.value(s).data(), tape.value(b).data());
    }
}
