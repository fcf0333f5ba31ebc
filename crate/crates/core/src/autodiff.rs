//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order, so `backward` is a single reverse sweep. Handles
//! ([`Var`]) are plain indices into the tape. Leaf gradients persist across
//! `backward` calls and accumulate until [`Graph::zero_grad`].

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Deref, DerefMut};

use crate::error::{bail, Result};
use crate::math;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{matmul_raw, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// Elementwise nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Gelu,
    Relu,
    Softplus,
    Log,
    Exp,
    /// `x ln x` with `0 ln 0 = 0`.
    PLogP,
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Gelu => math::gelu(x),
            Unary::Relu => x.max(0.0),
            Unary::Softplus => math::softplus(x),
            Unary::Log => math::ln(x),
            Unary::Exp => math::exp(x),
            Unary::PLogP => math::plogp(x),
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Gelu => math::gelu_grad(x),
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Softplus => math::sigmoid(x),
            Unary::Log => 1.0 / x,
            Unary::Exp => y,
            Unary::PLogP => math::plogp_grad(x),
        }
    }
}

/// How the right operand of a binary op is broadcast over the left.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    /// `[c]` or `[1, c]` against `[r, c]`.
    Row,
    /// `[r, 1]` against `[r, c]`.
    Col,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, f64),
    Unary(Var, Unary),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    Softmax(Var),
    LogSoftmax(Var),
    Pick(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    Column(Var, usize),
    Reshape(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Clone, Default)]
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf; `None` when it was never reached or
    /// does not require a gradient.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    /// Cuts the graph: a constant copy of `v`'s value.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            bail!(Dimension, "matmul {:?} x {:?}", sa, sb);
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::matrix(m, n, data)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    fn bcast(&self, a: Var, b: Var) -> Result<Bcast> {
        let (va, vb) = (self.value(a), self.value(b));
        let (r, c) = va.dims2()?;
        let (br, bc) = vb.dims2()?;
        if va.shape() == vb.shape() || (vb.numel() == va.numel() && (br, bc) == (r, c)) {
            Ok(Bcast::Same)
        } else if (br, bc) == (1, c) {
            Ok(Bcast::Row)
        } else if (br, bc) == (r, 1) {
            Ok(Bcast::Col)
        } else {
            bail!(Dimension, "cannot broadcast {:?} against {:?}", vb.shape(), va.shape())
        }
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, Bcast)> {
        let mode = self.bcast(a, b)?;
        let (_, c) = self.dims(a)?;
        let (va, vb) = (self.value(a), self.value(b));
        let bd = vb.data();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(idx, &x)| {
                let y = match mode {
                    Bcast::Same => bd[idx],
                    Bcast::Row => bd[idx % c],
                    Bcast::Col => bd[idx / c],
                };
                f(x, y)
            })
            .collect();
        Ok((Tensor::new(va.shape().to_vec(), data)?, mode))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, mode) = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b, mode), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, mode) = self.binary(a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b, mode), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, mode) = self.binary(a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b, mode), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x * s).collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Scale(a, s), &[a])
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| f.apply(x)).collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Unary(a, f), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn plogp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::PLogP)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let s = va.data().iter().sum::<f64>() / va.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Sums a matrix over rows (`axis = 0`, giving `[c]`) or columns
    /// (`axis = 1`, giving `[r]`).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        let d = self.value(a).data();
        let data: Vec<f64> = match axis {
            0 => (0..c).map(|j| (0..r).map(|i| d[i * c + j]).sum()).collect(),
            1 => (0..r).map(|i| d[i * c..(i + 1) * c].iter().sum()).collect(),
            _ => bail!(Dimension, "axis {} out of range", axis),
        };
        Ok(self.push(Tensor::vector(data), Op::SumAxis(a, axis), &[a]))
    }

    /// Row-wise softmax. With a mask, only `true` entries take part and the
    /// others are exactly zero; every row needs one retained entry.
    pub fn softmax(&mut self, a: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        if let Some(m) = &mask {
            if m.len() != r * c {
                bail!(Dimension, "mask has {} entries for {}x{}", m.len(), r, c);
            }
        }
        let va = self.value(a);
        let x = va.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let keep = |j: usize| mask.as_ref().is_none_or(|m| m[i * c + j]);
            let mut max = f64::NEG_INFINITY;
            for j in (0..c).filter(|&j| keep(j)) {
                max = max.max(x[i * c + j]);
            }
            if max == f64::NEG_INFINITY {
                bail!(InvalidMask, "row {} has no retained entry", i);
            }
            let mut z = 0.0;
            for j in (0..c).filter(|&j| keep(j)) {
                let e = math::exp(x[i * c + j] - max);
                out[i * c + j] = e;
                z += e;
            }
            for j in (0..c).filter(|&j| keep(j)) {
                out[i * c + j] /= z;
            }
        }
        let value = Tensor::new(va.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Softmax(a), &[a]))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        let va = self.value(a);
        let x = va.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + math::ln(row.iter().map(|v| math::exp(v - max)).sum::<f64>());
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
            }
        }
        let value = Tensor::new(va.shape().to_vec(), out)?;
        Ok(self.push(value, Op::LogSoftmax(a), &[a]))
    }

    /// `out[i] = a[i, idx[i]]`.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        if idx.len() != r || idx.iter().any(|&j| j >= c) {
            bail!(Dimension, "pick indices {:?} for {}x{}", idx, r, c);
        }
        let d = self.value(a).data();
        let data = idx.iter().enumerate().map(|(i, &j)| d[i * c + j]).collect();
        Ok(self.push(Tensor::vector(data), Op::Pick(a, idx.to_vec()), &[a]))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        if idx.iter().any(|&i| i >= r) {
            bail!(Dimension, "row index out of range for {} rows", r);
        }
        let d = self.value(a).data();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&d[i * c..(i + 1) * c]);
        }
        let value = Tensor::matrix(idx.len(), c, data)?;
        Ok(self.push(value, Op::GatherRows(a, idx.to_vec()), &[a]))
    }

    /// Stacks matrices (or row vectors) vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            bail!(Dimension, "concat of nothing");
        }
        let (_, c) = self.dims(parts[0])?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pr, pc) = self.dims(p)?;
            if pc != c {
                bail!(Dimension, "concat width {} vs {}", pc, c);
            }
            rows += pr;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::matrix(rows, c, data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Column `j` as an `[r, 1]` matrix.
    pub fn column(&mut self, a: Var, j: usize) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        if j >= c {
            bail!(Dimension, "column {} of {}", j, c);
        }
        let d = self.value(a).data();
        let data = (0..r).map(|i| d[i * c + j]).collect();
        let value = Tensor::matrix(r, 1, data)?;
        Ok(self.push(value, Op::Column(a, j), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// Row-wise argmax, lowest index on ties. Not differentiable.
    pub fn argmax_rows(&self, a: Var) -> Result<Vec<usize>> {
        let (r, c) = self.dims(a)?;
        let d = self.value(a).data();
        Ok((0..r).map(|i| math::argmax(&d[i * c..(i + 1) * c])).collect())
    }

    /// Shannon entropy per probability row, `[r]`. Rows must be
    /// nonnegative and sum to one within `1e-6`.
    pub fn entropy_rows(&mut self, p: Var) -> Result<Var> {
        let (r, c) = self.dims(p)?;
        let d = self.value(p).data();
        for i in 0..r {
            let row = &d[i * c..(i + 1) * c];
            if let Some(x) = row.iter().find(|x| !(**x >= 0.0)) {
                bail!(Domain, "negative or NaN probability {} in row {}", x, i);
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                bail!(Domain, "row {} sums to {}", i, s);
            }
        }
        let pl = self.plogp(p);
        let s = self.sum_axis(pl, 1)?;
        Ok(self.scale(s, -1.0))
    }

    /// Entropy of a single probability vector as a scalar.
    pub fn entropy(&mut self, p: Var) -> Result<Var> {
        let h = self.entropy_rows(p)?;
        if self.value(h).numel() != 1 {
            bail!(Dimension, "entropy expects one probability vector");
        }
        self.reshape(h, &[])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            bail!(Contract, "backward needs a scalar loss, got shape {:?}", self.value(loss).shape());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let nodes = &self.nodes;

        let acc = |grads: &mut Vec<Option<Vec<f64>>>, v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let node = &nodes[v.0];
            if !node.requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]);
            f(slot);
        };

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                    acc(&mut grads, *a, &mut |ga| {
                        // g[m x n] * b^T[n x k]
                        let bd = vb.data();
                        for r in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for q in 0..n {
                                    s += g[r * n + q] * bd[p * n + q];
                                }
                                ga[r * k + p] += s;
                            }
                        }
                    });
                    acc(&mut grads, *b, &mut |gb| {
                        // a^T[k x m] * g[m x n]
                        let ad = va.data();
                        for r in 0..m {
                            for p in 0..k {
                                let av = ad[r * k + p];
                                for q in 0..n {
                                    gb[p * n + q] += av * g[r * n + q];
                                }
                            }
                        }
                    });
                }
                Op::Add(a, b, mode) | Op::Sub(a, b, mode) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    let c = node.value.dims2()?.1;
                    acc(&mut grads, *a, &mut |ga| ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                    acc(&mut grads, *b, &mut |gb| {
                        for (idx, &y) in g.iter().enumerate() {
                            gb[bidx(*mode, idx, c)] += sign * y;
                        }
                    });
                }
                Op::Mul(a, b, mode) => {
                    let c = node.value.dims2()?.1;
                    let (ad, bd) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    acc(&mut grads, *a, &mut |ga| {
                        for (idx, &y) in g.iter().enumerate() {
                            ga[idx] += y * bd[bidx(*mode, idx, c)];
                        }
                    });
                    acc(&mut grads, *b, &mut |gb| {
                        for (idx, &y) in g.iter().enumerate() {
                            gb[bidx(*mode, idx, c)] += y * ad[idx];
                        }
                    });
                }
                Op::Scale(a, s) => {
                    acc(&mut grads, *a, &mut |ga| ga.iter_mut().zip(&g).for_each(|(x, y)| *x += s * y));
                }
                Op::Unary(a, f) => {
                    let x = nodes[a.0].value.data();
                    let y = node.value.data();
                    acc(&mut grads, *a, &mut |ga| {
                        for idx in 0..ga.len() {
                            ga[idx] += g[idx] * f.derivative(x[idx], y[idx]);
                        }
                    });
                }
                Op::Sum(a) => {
                    acc(&mut grads, *a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0]));
                }
                Op::Mean(a) => {
                    let n = nodes[a.0].value.numel() as f64;
                    acc(&mut grads, *a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0] / n));
                }
                Op::SumAxis(a, axis) => {
                    let (r, c) = nodes[a.0].value.dims2()?;
                    acc(&mut grads, *a, &mut |ga| {
                        for i in 0..r {
                            for j in 0..c {
                                ga[i * c + j] += if *axis == 0 { g[j] } else { g[i] };
                            }
                        }
                    });
                }
                Op::Softmax(a) => {
                    let (r, c) = node.value.dims2()?;
                    let y = node.value.data();
                    acc(&mut grads, *a, &mut |ga| {
                        for i in 0..r {
                            let row = i * c..(i + 1) * c;
                            // masked outputs are exactly zero, so they drop out of the dot
                            let dot: f64 = y[row.clone()]
                                .iter()
                                .zip(&g[row.clone()])
                                .filter(|(yv, _)| **yv != 0.0)
                                .map(|(yv, gv)| yv * gv)
                                .sum();
                            for j in row {
                                if y[j] != 0.0 {
                                    ga[j] += y[j] * (g[j] - dot);
                                }
                            }
                        }
                    });
                }
                Op::LogSoftmax(a) => {
                    let (r, c) = node.value.dims2()?;
                    let y = node.value.data();
                    acc(&mut grads, *a, &mut |ga| {
                        for i in 0..r {
                            let gs: f64 = g[i * c..(i + 1) * c].iter().sum();
                            for j in i * c..(i + 1) * c {
                                ga[j] += g[j] - math::exp(y[j]) * gs;
                            }
                        }
                    });
                }
                Op::Pick(a, idx) => {
                    let c = nodes[a.0].value.dims2()?.1;
                    acc(&mut grads, *a, &mut |ga| {
                        for (i, &j) in idx.iter().enumerate() {
                            ga[i * c + j] += g[i];
                        }
                    });
                }
                Op::GatherRows(a, idx) => {
                    let c = nodes[a.0].value.dims2()?.1;
                    acc(&mut grads, *a, &mut |ga| {
                        for (k, &i) in idx.iter().enumerate() {
                            for j in 0..c {
                                ga[i * c + j] += g[k * c + j];
                            }
                        }
                    });
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = nodes[p.0].value.numel();
                        acc(&mut grads, p, &mut |gp| {
                            gp.iter_mut().zip(&g[off..off + n]).for_each(|(x, y)| *x += y)
                        });
                        off += n;
                    }
                }
                Op::Column(a, j) => {
                    let (r, c) = nodes[a.0].value.dims2()?;
                    acc(&mut grads, *a, &mut |ga| {
                        for i in 0..r {
                            ga[i * c + j] += g[i];
                        }
                    });
                }
                Op::Reshape(a) => {
                    acc(&mut grads, *a, &mut |ga| ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                }
            }
            // non-leaf gradients are transient
            let _ = g;
        }

        for (i, g) in grads.into_iter().enumerate() {
            let node = &mut self.nodes[i];
            if let (Op::Leaf, true, Some(g)) = (&node.op, node.requires_grad, g) {
                match &mut node.grad {
                    Some(existing) => existing.iter_mut().zip(&g).for_each(|(x, y)| *x += y),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }
}

#[inline]
fn bidx(mode: Bcast, idx: usize, c: usize) -> usize {
    match mode {
        Bcast::Same => idx,
        Bcast::Row => idx % c,
        Bcast::Col => idx / c,
    }
}

/// A graph bound to a [`ParamStore`]. Parameters enter the graph on first
/// use; trainable ones become gradient-tracking leaves, frozen ones become
/// constants.
pub struct Session<'a> {
    graph: Graph,
    store: &'a ParamStore,
    bound: BTreeMap<ParamId, Var>,
    track: bool,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self { graph: Graph::new(), store, bound: BTreeMap::new(), track: true }
    }

    /// No parameter tracks gradients.
    pub fn inference(store: &'a ParamStore) -> Self {
        Self { track: false, ..Self::new(store) }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let requires = self.track && self.store.is_trainable(id);
        let v = self.graph.leaf(self.store.get(id).clone(), requires);
        self.bound.insert(id, v);
        v
    }

    /// Parameters that entered the graph during this session.
    pub fn bound(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.bound.keys().copied()
    }

    /// Gradients of every bound parameter that received one.
    pub fn grads(&self) -> Vec<(ParamId, Vec<f64>)> {
        self.bound
            .iter()
            .filter_map(|(&id, &v)| self.graph.grad(v).map(|g| (id, g.to_vec())))
            .collect()
    }
}

impl Deref for Session<'_> {
    type Target = Graph;
    fn deref(&self) -> &Graph {
        &self.graph
    }
}

impl DerefMut for Session<'_> {
    fn deref_mut(&mut self) -> &mut Graph {
        &mut self.graph
    }
}
