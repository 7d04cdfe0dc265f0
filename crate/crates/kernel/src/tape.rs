//! Tape-based reverse-mode automatic differentiation.
//!
//! Every primitive appends a node holding its forward value. When at least
//! one input requires gradients the node also records the operation, and
//! [`Tape::backward`] walks the nodes in reverse insertion order, which is a
//! valid reverse topological order because inputs always exist before their
//! consumers.

use crate::attention::{attention_backward, attention_forward, AttentionDims};
use crate::error::{mismatch, KernelError, Result};
use crate::functional::{gelu, layer_norm_row, tanh_exp, GELU_A, GELU_C, LN_EPS};
use crate::scalar::Scalar;
use crate::tensor::{axis_split, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Affine {
        x: Var,
        mul: T,
    },
    Tanh(Var),
    Gelu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        axis: usize,
        rstd: Vec<T>,
    },
    Mse(Var, Var),
    MaskedMse {
        pred: Var,
        target: Var,
        present: Vec<bool>,
        count: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    ScaleShift {
        x: Var,
        scale: Var,
        shift: Var,
    },
    Sum(Var),
    Mean(Var),
    MaskRows {
        x: Var,
        present: Vec<bool>,
    },
    Reshape(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        dims: AttentionDims,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of primitive applications.
#[derive(Debug, Default)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `var`; zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> Tensor<T> {
        self.grads[var.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[var.0].clone()))
    }

    pub fn take(&mut self, var: Var) -> Tensor<T> {
        self.grads[var.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[var.0].clone()))
    }

    pub fn reached(&self, var: Var) -> bool {
        self.grads[var.0].is_some()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, inputs: &[Var], op: impl FnOnce() -> Op<T>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op() } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, &[a, b], || Op::MatMul(a, b)))
    }

    /// `a + b`, where `b` may be a trailing suffix of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_broadcast(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(value, &[a, b], || Op::Add(a, b)))
    }

    /// `a * b` elementwise, with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_broadcast(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(value, &[a, b], || Op::Mul(a, b)))
    }

    /// `mul * x + add` for scalar constants.
    pub fn affine(&mut self, x: Var, mul: T, add: T) -> Var {
        let value = self.value(x).map(|v| mul * v + add);
        self.push(value, &[x], || Op::Affine { x, mul })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.tanh());
        self.push(value, &[x], || Op::Tanh(x))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu);
        self.push(value, &[x], || Op::Gelu(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let src = self.value(x);
        let (outer, n, inner) = axis_split("softmax", src.shape(), axis)?;
        let mut value = src.clone();
        let data = value.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| data[idx(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..n {
                    let e = (data[idx(j)] - max).exp();
                    data[idx(j)] = e;
                    total = total + e;
                }
                for j in 0..n {
                    data[idx(j)] = data[idx(j)] / total;
                }
            }
        }
        Ok(self.push(value, &[x], || Op::Softmax { x, axis }))
    }

    /// Normalizes to zero mean and unit variance along `axis` (no affine terms).
    pub fn layer_norm(&mut self, x: Var, axis: usize) -> Result<Var> {
        let src = self.value(x);
        let (outer, n, inner) = axis_split("layer_norm", src.shape(), axis)?;
        let eps = T::from_f64_lossy(LN_EPS);
        let nf = T::from_usize(n).expect("axis length");
        let mut value = src.clone();
        let mut rstd = Vec::with_capacity(outer * inner);
        if inner == 1 {
            for row in value.data_mut().chunks_mut(n) {
                rstd.push(layer_norm_row(row));
            }
            return Ok(self.push(value, &[x], || Op::LayerNorm { x, axis, rstd }));
        }
        let data = value.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let mean = (0..n).map(|j| data[idx(j)]).sum::<T>() / nf;
                let var = (0..n)
                    .map(|j| {
                        let d = data[idx(j)] - mean;
                        d * d
                    })
                    .sum::<T>()
                    / nf;
                let r = T::one() / (var + eps).sqrt();
                for j in 0..n {
                    data[idx(j)] = (data[idx(j)] - mean) * r;
                }
                rstd.push(r);
            }
        }
        Ok(self.push(value, &[x], || Op::LayerNorm { x, axis, rstd }))
    }

    /// Mean squared error over all elements; returns a scalar.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(mismatch("mse", p.shape(), t.shape()));
        }
        let n = T::from_usize(p.numel().max(1)).expect("count");
        let total: T = p.data().iter().zip(t.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
        Ok(self.push(Tensor::scalar(total / n), &[pred, target], || Op::Mse(pred, target)))
    }

    /// Mean squared error restricted to rows (trailing-axis vectors) whose
    /// `present` flag is set. Evaluates to zero when no row is present.
    pub fn masked_mse(&mut self, pred: Var, target: Var, present: &[bool]) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(mismatch("masked_mse", p.shape(), t.shape()));
        }
        if present.len() != p.rows() {
            return Err(mismatch("masked_mse", p.shape(), &[present.len()]));
        }
        let cols = p.last_dim();
        let mut total = T::zero();
        let mut rows = 0;
        for (r, _) in present.iter().enumerate().filter(|(_, &on)| on) {
            rows += 1;
            for (&a, &b) in p.row(r).iter().zip(t.row(r)) {
                total = total + (a - b) * (a - b);
            }
        }
        let count = rows * cols;
        let value = if count == 0 {
            T::zero()
        } else {
            total / T::from_usize(count).expect("count")
        };
        let present = present.to_vec();
        Ok(self.push(Tensor::scalar(value), &[pred, target], || Op::MaskedMse {
            pred,
            target,
            present,
            count,
        }))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or(KernelError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let base = self.shape(*first).to_vec();
        axis_split("concat", &base, axis)?;
        let mut out_shape = base.clone();
        out_shape[axis] = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(mismatch("concat", &base, s));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(out_shape, data)?;
        let inputs = inputs.to_vec();
        Ok(self.push(value, &inputs.clone(), || Op::Concat { inputs, axis }))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let src = self.value(x);
        let (outer, n, inner) = axis_split("slice", src.shape(), axis)?;
        if start > end || end > n {
            return Err(KernelError::Invalid {
                op: "slice",
                msg: format!("range {start}..{end} out of bounds for axis of length {n}"),
            });
        }
        let mut shape = src.shape().to_vec();
        shape[axis] = end - start;
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            data.extend_from_slice(&src.data()[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, &[x], || Op::Slice { x, axis, start }))
    }

    /// `x * scale + shift`, with `scale` and `shift` either full-shape or
    /// trailing-broadcast.
    pub fn scale_shift(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let value = self
            .value(x)
            .zip_broadcast(self.value(scale), "scale_shift", |v, s| v * s)?
            .zip_broadcast(self.value(shift), "scale_shift", |v, t| v + t)?;
        Ok(self.push(value, &[x, scale, shift], || Op::ScaleShift { x, scale, shift }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(total), &[x], || Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let n = T::from_usize(src.numel().max(1)).expect("count");
        let total: T = src.data().iter().copied().sum();
        self.push(Tensor::scalar(total / n), &[x], || Op::Mean(x))
    }

    /// Replaces every row (trailing-axis vector) whose `present` flag is
    /// cleared with the constant `fallback` row. No gradient reaches
    /// replaced rows.
    pub fn mask_rows(&mut self, x: Var, present: &[bool], fallback: &[T]) -> Result<Var> {
        let src = self.value(x);
        if present.len() != src.rows() || fallback.len() != src.last_dim() {
            return Err(mismatch("mask_rows", src.shape(), &[present.len(), fallback.len()]));
        }
        let mut value = src.clone();
        for (r, _) in present.iter().enumerate().filter(|(_, &on)| !on) {
            value.row_mut(r).copy_from_slice(fallback);
        }
        let present = present.to_vec();
        Ok(self.push(value, &[x], || Op::MaskRows { x, present }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, &[x], || Op::Reshape(x)))
    }

    /// Multi-head attention over `[batch, seq, d]` projections with an
    /// additive `[heads, seq, seq]` logit bias (`-inf` hides a key).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, bias: &Tensor<T>, heads: usize) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        if shape.len() != 3 || self.shape(k) != shape || self.shape(v) != shape {
            return Err(mismatch("attention", &shape, self.shape(k)));
        }
        let (batch, seq, model) = (shape[0], shape[1], shape[2]);
        if heads == 0 || model % heads != 0 {
            return Err(KernelError::Invalid {
                op: "attention",
                msg: format!("model width {model} not divisible into {heads} heads"),
            });
        }
        if bias.shape() != [heads, seq, seq] {
            return Err(mismatch("attention", &[heads, seq, seq], bias.shape()));
        }
        let dims = AttentionDims {
            batch,
            seq,
            model,
            heads,
        };
        let (out, probs) = attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            bias.data(),
            dims,
        );
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, &[q, k, v], || Op::Attention { q, k, v, dims, probs }))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(KernelError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(loss_value.shape().to_vec()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *a = *a + *b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    /// Sums a full-shape gradient down to a trailing-broadcast operand.
    fn reduce_to(&self, g: &[T], target: Var) -> Tensor<T> {
        let shape = self.shape(target).to_vec();
        let period = shape.iter().product::<usize>().max(1);
        let mut out = vec![T::zero(); period];
        for chunk in g.chunks(period) {
            for (o, &v) in out.iter_mut().zip(chunk) {
                *o = *o + v;
            }
        }
        Tensor::new(shape, out).expect("reduced shape")
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (k, n) = (bv.shape()[0], bv.shape()[1]);
                let m = av.rows();
                if self.requires_grad(*a) {
                    let mut da = Tensor::zeros(av.shape().to_vec());
                    T::gemm(m, n, k, g.data(), (n, 1), bv.data(), (1, n), T::zero(), da.data_mut());
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = Tensor::zeros(bv.shape().to_vec());
                    T::gemm(k, m, n, av.data(), (1, k), g.data(), (n, 1), T::zero(), db.data_mut());
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.requires_grad(*b) {
                    let db = self.reduce_to(g.data(), *b);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let period = bv.numel().max(1);
                if self.requires_grad(*a) {
                    let da = g.zip_broadcast(bv, "mul", |x, y| x * y)?;
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let prod: Vec<T> = g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                    debug_assert!(prod.len().is_multiple_of(period));
                    let db = self.reduce_to(&prod, *b);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Affine { x, mul } => {
                let m = *mul;
                self.accumulate(grads, *x, g.map(|v| v * m));
            }
            Op::Tanh(x) => {
                let dx = g.zip_broadcast(y, "tanh", |gv, yv| gv * (T::one() - yv * yv))?;
                self.accumulate(grads, *x, dx);
            }
            Op::Gelu(x) => {
                let c = T::from_f64_lossy(GELU_C);
                let a = T::from_f64_lossy(GELU_A);
                let half = T::from_f64_lossy(0.5);
                let three = T::from_f64_lossy(3.0);
                let dx = g.zip_broadcast(self.value(*x), "gelu", |gv, xv| {
                    let t = tanh_exp(c * (xv + a * xv * xv * xv));
                    let dt = (T::one() - t * t) * c * (T::one() + three * a * xv * xv);
                    gv * (half * (T::one() + t) + half * xv * dt)
                })?;
                self.accumulate(grads, *x, dx);
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_split("softmax", y.shape(), *axis)?;
                let mut dx = Tensor::zeros(y.shape().to_vec());
                let (yd, gd) = (y.data(), g.data());
                let out = dx.data_mut();
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let dot: T = (0..n).map(|j| yd[idx(j)] * gd[idx(j)]).sum();
                        for j in 0..n {
                            out[idx(j)] = yd[idx(j)] * (gd[idx(j)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNorm { x, axis, rstd } => {
                let (outer, n, inner) = axis_split("layer_norm", y.shape(), *axis)?;
                let nf = T::from_usize(n).expect("axis length");
                let mut dx = Tensor::zeros(y.shape().to_vec());
                let (yd, gd) = (y.data(), g.data());
                let out = dx.data_mut();
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let r = rstd[o * inner + i];
                        let mean_g = (0..n).map(|j| gd[idx(j)]).sum::<T>() / nf;
                        let mean_gy = (0..n).map(|j| gd[idx(j)] * yd[idx(j)]).sum::<T>() / nf;
                        for j in 0..n {
                            out[idx(j)] = r * (gd[idx(j)] - mean_g - yd[idx(j)] * mean_gy);
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Mse(p, t) => {
                let (pv, tv) = (self.value(*p), self.value(*t));
                let scale = g.item() * T::from_f64_lossy(2.0) / T::from_usize(pv.numel().max(1)).expect("count");
                let dp = pv.zip_broadcast(tv, "mse", |a, b| (a - b) * scale)?;
                if self.requires_grad(*t) {
                    self.accumulate(grads, *t, dp.map(|v| -v));
                }
                self.accumulate(grads, *p, dp);
            }
            Op::MaskedMse {
                pred,
                target,
                present,
                count,
            } => {
                let (pv, tv) = (self.value(*pred), self.value(*target));
                let mut dp = Tensor::zeros(pv.shape().to_vec());
                if *count > 0 {
                    let scale = g.item() * T::from_f64_lossy(2.0) / T::from_usize(*count).expect("count");
                    for (r, _) in present.iter().enumerate().filter(|(_, &on)| on) {
                        let (pr, tr) = (pv.row(r), tv.row(r));
                        for (c, d) in dp.row_mut(r).iter_mut().enumerate() {
                            *d = (pr[c] - tr[c]) * scale;
                        }
                    }
                }
                if self.requires_grad(*target) {
                    self.accumulate(grads, *target, dp.map(|v| -v));
                }
                self.accumulate(grads, *pred, dp);
            }
            Op::Concat { inputs, axis } => {
                let outer: usize = y.shape()[..*axis].iter().product();
                let inner: usize = y.shape()[axis + 1..].iter().product();
                let total = y.shape()[*axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let shape = self.shape(*v).to_vec();
                    let chunk = shape[*axis] * inner;
                    if self.requires_grad(*v) {
                        let mut data = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            data.extend_from_slice(&g.data()[o * total + offset..o * total + offset + chunk]);
                        }
                        self.accumulate(grads, *v, Tensor::new(shape, data)?);
                    }
                    offset += chunk;
                }
            }
            Op::Slice { x, axis, start } => {
                let shape = self.shape(*x).to_vec();
                let (outer, n, inner) = axis_split("slice", &shape, *axis)?;
                let len = y.shape()[*axis];
                let mut dx = Tensor::zeros(shape);
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    dx.data_mut()[dst..dst + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ScaleShift { x, scale, shift } => {
                let (xv, sv) = (self.value(*x), self.value(*scale));
                if self.requires_grad(*x) {
                    let dx = g.zip_broadcast(sv, "scale_shift", |a, b| a * b)?;
                    self.accumulate(grads, *x, dx);
                }
                if self.requires_grad(*scale) {
                    let prod: Vec<T> = g.data().iter().zip(xv.data()).map(|(&a, &b)| a * b).collect();
                    let ds = self.reduce_to(&prod, *scale);
                    self.accumulate(grads, *scale, ds);
                }
                if self.requires_grad(*shift) {
                    let dt = self.reduce_to(g.data(), *shift);
                    self.accumulate(grads, *shift, dt);
                }
            }
            Op::Sum(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, Tensor::full(shape, g.item()));
            }
            Op::Mean(x) => {
                let shape = self.shape(*x).to_vec();
                let n = T::from_usize(shape.iter().product::<usize>().max(1)).expect("count");
                self.accumulate(grads, *x, Tensor::full(shape, g.item() / n));
            }
            Op::MaskRows { x, present } => {
                let mut dx = g.clone();
                let cols = dx.last_dim();
                for (r, _) in present.iter().enumerate().filter(|(_, &on)| !on) {
                    dx.data_mut()[r * cols..(r + 1) * cols].fill(T::zero());
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, g.clone().reshape(shape)?);
            }
            Op::Attention { q, k, v, dims, probs } => {
                let (dq, dk, dv) = attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    g.data(),
                    *dims,
                );
                let shape = y.shape().to_vec();
                self.accumulate(grads, *q, Tensor::new(shape.clone(), dq)?);
                self.accumulate(grads, *k, Tensor::new(shape.clone(), dk)?);
                self.accumulate(grads, *v, Tensor::new(shape, dv)?);
            }
        }
        Ok(())
    }
}
