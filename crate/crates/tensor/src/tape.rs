//! Reverse-mode gradient tape.
//!
//! A [`Tape`] records every tracked operation of one forward pass. Parameters
//! are borrowed rather than copied, so a tape lives no longer than the
//! parameter store it reads from. Gradients come back as a [`Gradients`]
//! table indexed by [`Var`]; a tape can be differentiated exactly once.

use std::borrow::Cow;

use crate::error::{invalid, Result, TensorError};
use crate::kernels;
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sum(Var),
    Reshape(Var),
    Conv2d { x: Var, kernel: Var, bias: Option<Var> },
    AvgPool(Var, (usize, usize)),
    Resize(Var),
    AdaptivePool(Var),
    Concat(Vec<Var>),
    MatMul(Var, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    MulSpatial(Var, Var),
    SelectMean(Var, Vec<usize>),
    Broadcast(Var),
    Norm(Var),
    Cosine(Var, Var),
    SpaceToDepth(Var, usize),
    SoftmaxCrossEntropy { logits: Var, target: Vec<usize> },
}

#[derive(Debug)]
struct Node<'a, T: Real> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradient table produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Debug)]
pub struct Tape<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
    grad_enabled: bool,
    consumed: bool,
}

impl<T: Real> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Real> Tape<'a, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            consumed: false,
        }
    }

    /// A tape for inference: leaves never require gradients.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
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

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>, requires_grad: bool, name: &'static str) -> Result<Var> {
        value.ensure_finite(name)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn derived(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var], name: &'static str) -> Result<Var> {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), op, rg, name)
    }

    /// Owned leaf; `requires_grad` marks it for differentiation.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push(Cow::Owned(value), Op::Leaf, requires_grad, "leaf")
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Borrowed leaf, used for parameters that outlive the tape.
    pub fn param(&mut self, value: &'a Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push(Cow::Borrowed(value), Op::Leaf, requires_grad, "param")
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return invalid(format!("{op}: shape {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.derived(v, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.derived(v, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.derived(v, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let v = self.value(x).map(|e| e * c);
        self.derived(v, Op::Scale(x, c), &[x], "scale")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|e| e.max(T::zero()));
        self.derived(v, Op::Relu(x), &[x], "relu")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        self.derived(v, Op::Sum(x), &[x], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let s = self.sum(x)?;
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Element-wise mean of equally shaped values.
    pub fn average(&mut self, xs: &[Var]) -> Result<Var> {
        let Some((&first, rest)) = xs.split_first() else {
            return invalid("average of zero values");
        };
        if rest.is_empty() {
            return Ok(first);
        }
        let mut acc = first;
        for &x in rest {
            acc = self.add(acc, x)?;
        }
        self.scale(acc, T::one() / T::of(xs.len() as f64))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        self.derived(v, Op::Reshape(x), &[x], "reshape")
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let v = kernels::conv2d(self.value(x), self.value(kernel), bias.map(|b| self.value(b)))?;
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        self.derived(v, Op::Conv2d { x, kernel, bias }, &inputs, "conv2d")
    }

    pub fn avg_pool(&mut self, x: Var, window: (usize, usize)) -> Result<Var> {
        let v = kernels::avg_pool(self.value(x), window)?;
        self.derived(v, Op::AvgPool(x, window), &[x], "avg_pool")
    }

    pub fn resize(&mut self, x: Var, target: (usize, usize)) -> Result<Var> {
        let v = kernels::bilinear_resize(self.value(x), target)?;
        self.derived(v, Op::Resize(x), &[x], "bilinear_resize")
    }

    pub fn adaptive_pool(&mut self, x: Var, target: (usize, usize)) -> Result<Var> {
        let v = kernels::adaptive_avg_pool(self.value(x), target)?;
        self.derived(v, Op::AdaptivePool(x), &[x], "adaptive_avg_pool")
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = kernels::concat_last(&vals)?;
        self.derived(v, Op::Concat(parts.to_vec()), parts, "concat")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::matmul(self.value(a), self.value(b))?;
        self.derived(v, Op::MatMul(a, b), &[a, b], "matmul")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = kernels::transpose(self.value(x))?;
        self.derived(v, Op::Transpose(x), &[x], "transpose")
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let v = kernels::softmax_rows(self.value(x))?;
        self.derived(v, Op::SoftmaxRows(x), &[x], "softmax")
    }

    /// `H x W x C` map scaled per position by an `H x W` weight map.
    pub fn mul_spatial(&mut self, x: Var, weights: Var) -> Result<Var> {
        let (h, w, c) = self.value(x).hwc()?;
        let (mh, mw, mc) = self.value(weights).hwc()?;
        if (h, w, 1) != (mh, mw, mc) {
            return invalid(format!(
                "mul_spatial: map {:?} vs weights {:?}",
                self.shape(x),
                self.shape(weights)
            ));
        }
        let m = self.value(weights).data();
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(xs.len());
        for (p, row) in xs.chunks(c).enumerate() {
            out.extend(row.iter().map(|&e| e * m[p]));
        }
        let v = Tensor::new(self.shape(x).to_vec(), out)?;
        self.derived(v, Op::MulSpatial(x, weights), &[x, weights], "mul_spatial")
    }

    /// Mean of the feature vectors at the given flat positions of an `H x W x C` map.
    ///
    /// The selection itself is discrete and carries no gradient.
    pub fn select_mean(&mut self, x: Var, positions: &[usize]) -> Result<Var> {
        let (h, w, c) = self.value(x).hwc()?;
        if positions.is_empty() {
            return invalid("select_mean over an empty selection");
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= h * w) {
            return invalid(format!("select_mean position {p} outside {h}x{w}"));
        }
        let xv = self.value(x);
        let mut acc = vec![T::zero(); c];
        for &p in positions {
            for (a, &e) in acc.iter_mut().zip(xv.pixel(p)) {
                *a += e;
            }
        }
        let n = T::of(positions.len() as f64);
        acc.iter_mut().for_each(|a| *a /= n);
        self.derived(Tensor::vector(acc), Op::SelectMean(x, positions.to_vec()), &[x], "select_mean")
    }

    /// Tiles a length-`C` vector over an `H x W` grid.
    pub fn broadcast_spatial(&mut self, v: Var, h: usize, w: usize) -> Result<Var> {
        let vv = self.value(v);
        if vv.rank() != 1 {
            return invalid(format!("broadcast_spatial expects a vector, got {:?}", vv.shape()));
        }
        let c = vv.len();
        let mut out = Vec::with_capacity(h * w * c);
        for _ in 0..h * w {
            out.extend_from_slice(vv.data());
        }
        let t = Tensor::new(vec![h, w, c], out)?;
        self.derived(t, Op::Broadcast(v), &[v], "broadcast_spatial")
    }

    /// Euclidean norm of all elements.
    pub fn norm(&mut self, x: Var) -> Result<Var> {
        let n = kernels::l2_norm(self.value(x).data());
        self.derived(Tensor::scalar(n), Op::Norm(x), &[x], "norm")
    }

    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let c = kernels::cosine(self.value(a).data(), self.value(b).data())?;
        self.derived(Tensor::scalar(c), Op::Cosine(a, b), &[a, b], "cosine")
    }

    pub fn space_to_depth(&mut self, x: Var, factor: usize) -> Result<Var> {
        let v = kernels::space_to_depth(self.value(x), factor)?;
        self.derived(v, Op::SpaceToDepth(x, factor), &[x], "space_to_depth")
    }

    /// Mean cross-entropy of per-row class logits against integer targets.
    ///
    /// `logits` is `... x n_classes`; `target` holds one class index per row.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let k = *lv.shape().last().expect("non-empty shape");
        let rows = lv.len() / k;
        if target.len() != rows {
            return invalid(format!("cross-entropy: {rows} rows but {} targets", target.len()));
        }
        if let Some(&t) = target.iter().find(|&&t| t >= k) {
            return invalid(format!("cross-entropy target {t} outside {k} classes"));
        }
        let mut total = T::zero();
        for (row, &t) in lv.data().chunks(k).zip(target) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<T>().ln();
            total += lse - row[t];
        }
        let loss = total / T::of(rows as f64);
        self.derived(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                target: target.to_vec(),
            },
            &[logits],
            "cross_entropy",
        )
    }

    /// Accumulates `d loss / d v` for every value that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(TensorError::Backward(
                "tape already differentiated; run a fresh forward pass".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(TensorError::Backward(
                "loss does not depend on any value that requires a gradient".into(),
            ));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            for (input, gi) in self.vjp(id, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                gi.ensure_finite("backward")?;
                match &mut grads[input.0] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(gi.data())
                        .for_each(|(a, &b)| *a += b),
                    slot => *slot = Some(gi),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn vjp(&self, id: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let out = &self.nodes[id].value;
        let val = |v: Var| -> &Tensor<T> { &self.nodes[v.0].value };
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        Ok(match &self.nodes[id].op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|e| -e))],
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(val(*b), |x, y| x * y)?),
                (*b, g.zip_map(val(*a), |x, y| x * y)?),
            ],
            Op::Scale(x, c) => {
                let c = *c;
                vec![(*x, g.map(|e| e * c))]
            }
            Op::Relu(x) => vec![(*x, g.zip_map(out, |gi, y| if y > T::zero() { gi } else { T::zero() })?)],
            Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), g.item()))],
            Op::Reshape(x) => vec![(*x, g.clone().reshape(val(*x).shape())?)],
            Op::Conv2d { x, kernel, bias } => {
                let (gx, gw, gb) = kernels::conv2d_backward(val(*x), val(*kernel), g)?;
                let mut v = vec![(*x, gx), (*kernel, gw)];
                if let Some(b) = bias {
                    v.push((*b, gb.reshape(val(*b).shape())?));
                }
                v
            }
            Op::AvgPool(x, window) => vec![(*x, kernels::avg_pool_backward(g, *window)?)],
            Op::Resize(x) => vec![(*x, kernels::bilinear_resize_backward(g, val(*x).shape())?)],
            Op::AdaptivePool(x) => vec![(*x, kernels::adaptive_avg_pool_backward(g, val(*x).shape())?)],
            Op::Concat(parts) => {
                let shapes: Vec<Vec<usize>> = parts.iter().map(|&p| val(p).shape().to_vec()).collect();
                parts.iter().copied().zip(kernels::split_last(g, &shapes)?).collect()
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                let mut v = Vec::new();
                if wants(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g.data(), false, bv.data(), true, T::zero(), &mut ga);
                    v.push((*a, Tensor::new(vec![m, k], ga)?));
                }
                if wants(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(k, m, n, av.data(), true, g.data(), false, T::zero(), &mut gb);
                    v.push((*b, Tensor::new(vec![k, n], gb)?));
                }
                v
            }
            Op::Transpose(x) => vec![(*x, kernels::transpose(g)?)],
            Op::SoftmaxRows(x) => vec![(*x, kernels::softmax_rows_backward(out, g)?)],
            Op::MulSpatial(x, m) => {
                let (xv, mv) = (val(*x), val(*m));
                let c = *xv.shape().last().expect("non-empty shape");
                let mut gx = Vec::with_capacity(xv.len());
                let mut gm = Vec::with_capacity(mv.len());
                for (p, (gr, xr)) in g.data().chunks(c).zip(xv.data().chunks(c)).enumerate() {
                    let mp = mv.data()[p];
                    gx.extend(gr.iter().map(|&e| e * mp));
                    gm.push(kernels::dot(gr, xr));
                }
                vec![
                    (*x, Tensor::new(xv.shape().to_vec(), gx)?),
                    (*m, Tensor::new(mv.shape().to_vec(), gm)?),
                ]
            }
            Op::SelectMean(x, positions) => {
                let xv = val(*x);
                let c = *xv.shape().last().expect("non-empty shape");
                let mut gx = Tensor::zeros(xv.shape());
                let share = T::one() / T::of(positions.len() as f64);
                for &p in positions {
                    for (dst, &e) in gx.data_mut()[p * c..(p + 1) * c].iter_mut().zip(g.data()) {
                        *dst += e * share;
                    }
                }
                vec![(*x, gx)]
            }
            Op::Broadcast(v) => {
                let c = val(*v).len();
                let mut acc = vec![T::zero(); c];
                for row in g.data().chunks(c) {
                    for (a, &e) in acc.iter_mut().zip(row) {
                        *a += e;
                    }
                }
                vec![(*v, Tensor::new(val(*v).shape().to_vec(), acc)?)]
            }
            Op::Norm(x) => {
                let n = out.item();
                let gs = g.item();
                let xv = val(*x);
                if n < T::eps_norm() {
                    vec![(*x, Tensor::zeros(xv.shape()))]
                } else {
                    vec![(*x, xv.map(|e| gs * e / n))]
                }
            }
            Op::Cosine(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let na = kernels::l2_norm(av.data());
                let nb = kernels::l2_norm(bv.data());
                if na < T::eps_norm() || nb < T::eps_norm() {
                    vec![(*a, Tensor::zeros(av.shape())), (*b, Tensor::zeros(bv.shape()))]
                } else {
                    let cos = out.item();
                    let gs = g.item();
                    let inv = T::one() / (na * nb);
                    let ga = av.zip_map(bv, |x, y| gs * (y * inv - cos * x / (na * na)))?;
                    let gb = bv.zip_map(av, |y, x| gs * (x * inv - cos * y / (nb * nb)))?;
                    vec![(*a, ga), (*b, gb)]
                }
            }
            Op::SpaceToDepth(x, f) => {
                let c = val(*x).hwc()?.2;
                vec![(*x, kernels::depth_to_space(g, *f, c)?)]
            }
            Op::SoftmaxCrossEntropy { logits, target } => {
                let lv = val(*logits);
                let k = *lv.shape().last().expect("non-empty shape");
                let scale = g.item() / T::of(target.len() as f64);
                let mut gl = Vec::with_capacity(lv.len());
                for (row, &t) in lv.data().chunks(k).zip(target) {
                    let p = kernels::softmax(row)?;
                    gl.extend(p.iter().enumerate().map(|(j, &pj)| {
                        let onehot = if j == t { T::one() } else { T::zero() };
                        scale * (pj - onehot)
                    }));
                }
                vec![(*logits, Tensor::new(lv.shape().to_vec(), gl)?)]
            }
        })
    }
}
