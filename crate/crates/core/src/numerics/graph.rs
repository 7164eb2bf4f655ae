//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation in execution order, so node indices
//! are already a topological order. [`Graph::backward`] walks the tape once
//! in reverse and accumulates vector-Jacobian products into each leaf that
//! was created with `requires_grad`.
//!
//! Leaves may borrow their value (model parameters are bound without a copy),
//! which is why the graph carries a lifetime.

use std::borrow::Cow;

use super::rng::Rng;
use super::tensor::{gemm, gemm_nt, gemm_tn, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add { a: Var, b: Var, broadcast: bool },
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    RowMax(Var, Vec<usize>),
    Maximum(Var, Var),
    Sum(Var),
    Mean(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    RepeatRows(Var, usize),
    Interleave(Vec<Var>),
    Reshape(Var),
    AttentionPool { alpha: Var, ann: Var },
    Dropout(Var, Vec<f64>),
    CrossEntropy {
        logits: Var,
        gold: Vec<usize>,
        eps: f64,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    MarginRank { scores: Var, sets: Vec<Vec<usize>> },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// The tape.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients of a scalar with respect to every leaf that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when the leaf was not reached.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient for `var`, zero-filled when unreachable.
    pub fn get_or_zeros(&self, var: Var, shape: [usize; 2]) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape[0], shape[1]))
    }
}

fn mismatch(kind: &'static str, left: [usize; 2], right: [usize; 2]) -> Error {
    Error::ShapeMismatch { kind, left, right }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(Cow::Owned(value), false)
    }

    /// Differentiable leaf.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(Cow::Owned(value), true)
    }

    /// Leaf that borrows its value, e.g. a model parameter.
    pub fn borrowed(&mut self, value: &'a Tensor, requires_grad: bool) -> Var {
        self.leaf(Cow::Borrowed(value), requires_grad)
    }

    fn leaf(&mut self, value: Cow<'a, Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    #[inline]
    pub fn shape(&self, var: Var) -> [usize; 2] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(x.rows(), x.cols(), data).expect("shape preserved");
        self.push(out, op, &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.cols() != y.rows() {
            return Err(mismatch("matmul", x.shape(), y.shape()));
        }
        let (m, k, n) = (x.rows(), x.cols(), y.cols());
        let mut out = Tensor::zeros(m, n);
        gemm(m, k, n, x.data(), y.data(), out.data_mut(), false);
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Elementwise sum. `b` may also be a single row broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let broadcast = if x.shape() == y.shape() {
            false
        } else if y.rows() == 1 && y.cols() == x.cols() {
            true
        } else {
            return Err(mismatch("add", x.shape(), y.shape()));
        };
        let mut out = x.clone();
        if broadcast {
            for r in 0..out.rows() {
                for (o, v) in out.row_slice_mut(r).iter_mut().zip(y.data()) {
                    *o += v;
                }
            }
        } else {
            out.add_assign(y);
        }
        Ok(self.push(out, Op::Add { a, b, broadcast }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(mismatch("sub", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let out = Tensor::new(x.rows(), x.cols(), data)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(mismatch("elementwise-mul", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.rows(), x.cols(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.map(a, Op::Scale(a, factor), |v| v * factor)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    /// Row-wise softmax (over the last axis), computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if !x.is_finite() {
            return Err(Error::NonFinite { kind: "softmax" });
        }
        let mut out = x.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_slice_mut(r));
        }
        Ok(self.push(out, Op::Softmax(a), &[a]))
    }

    /// Maximum of each row, as a column. Ties resolve to the first index.
    pub fn row_max(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.cols() == 0 {
            return Err(Error::invalid("row-max of a matrix without columns"));
        }
        let mut arg = Vec::with_capacity(x.rows());
        let mut out = Tensor::zeros(x.rows(), 1);
        for r in 0..x.rows() {
            let row = x.row_slice(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            arg.push(best);
            out.data_mut()[r] = row[best];
        }
        Ok(self.push(out, Op::RowMax(a, arg), &[a]))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(mismatch("maximum", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p.max(*q)).collect();
        let out = Tensor::new(x.rows(), x.cols(), data)?;
        Ok(self.push(out, Op::Maximum(a, b), &[a, b]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let m = x.sum() / x.len() as f64;
        Ok(self.push(Tensor::scalar(m), Op::Mean(a), &[a]))
    }

    /// Concatenate along the feature axis; all parts share the row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        if parts.len() == 1 {
            return Ok(first);
        }
        let rows = self.value(first).rows();
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[0] != rows {
                return Err(mismatch("concat-cols", self.shape(first), s));
            }
            cols += s[1];
        }
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            let dst = out.row_slice_mut(r);
            for &p in parts {
                let src = self.nodes[p.0].value.row_slice(r);
                dst[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Stack along the row axis; all parts share the column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let x = self.value(p);
            if x.cols() != cols {
                return Err(mismatch("concat-rows", self.shape(first), x.shape()));
            }
            rows += x.rows();
            data.extend_from_slice(x.data());
        }
        let out = Tensor::new(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let x = self.value(a);
        if start + width > x.cols() {
            return Err(mismatch("slice-cols", x.shape(), [x.rows(), start + width]));
        }
        let mut out = Tensor::zeros(x.rows(), width);
        for r in 0..x.rows() {
            out.row_slice_mut(r)
                .copy_from_slice(&x.row_slice(r)[start..start + width]);
        }
        Ok(self.push(out, Op::SliceCols(a, start), &[a]))
    }

    /// Row `r` of the output is row `indices[r]` of `a` (embedding lookup).
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let mut out = Tensor::zeros(indices.len(), x.cols());
        for (r, &i) in indices.iter().enumerate() {
            if i >= x.rows() {
                return Err(Error::invalid(format!(
                    "gather-rows: index {i} out of range for {} rows",
                    x.rows()
                )));
            }
            out.row_slice_mut(r).copy_from_slice(x.row_slice(i));
        }
        Ok(self.push(out, Op::GatherRows(a, indices.to_vec()), &[a]))
    }

    /// Each row repeated `times` times consecutively.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        if times == 0 {
            return Err(Error::invalid("repeat-rows: zero repetitions"));
        }
        if times == 1 {
            return Ok(a);
        }
        let x = self.value(a);
        let mut out = Tensor::zeros(x.rows() * times, x.cols());
        for r in 0..x.rows() {
            for i in 0..times {
                out.row_slice_mut(r * times + i).copy_from_slice(x.row_slice(r));
            }
        }
        Ok(self.push(out, Op::RepeatRows(a, times), &[a]))
    }

    /// Interleave `T` tensors of shape `B × d` into `(B·T) × d`, with output
    /// row `b·T + t` taken from row `b` of part `t`.
    pub fn interleave_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("interleave of nothing"))?;
        let shape = self.shape(first);
        for &p in parts {
            if self.shape(p) != shape {
                return Err(mismatch("interleave-rows", shape, self.shape(p)));
            }
        }
        let t = parts.len();
        let mut out = Tensor::zeros(shape[0] * t, shape[1]);
        for (i, &p) in parts.iter().enumerate() {
            let x = &self.nodes[p.0].value;
            for b in 0..shape[0] {
                out.row_slice_mut(b * t + i).copy_from_slice(x.row_slice(b));
            }
        }
        Ok(self.push(out, Op::Interleave(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let x = self.value(a);
        if rows * cols != x.len() {
            return Err(mismatch("reshape", x.shape(), [rows, cols]));
        }
        let out = Tensor::new(rows, cols, x.data().to_vec())?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Weighted sum of annotation groups: `alpha` is `B × k`, `ann` is
    /// `(B·k) × d`, output row `b` is `Σᵢ alpha[b,i] · ann[b·k+i]`.
    pub fn attention_pool(&mut self, alpha: Var, ann: Var) -> Result<Var> {
        let (w, x) = (self.value(alpha), self.value(ann));
        let (b, k) = (w.rows(), w.cols());
        if x.rows() != b * k {
            return Err(mismatch("attention-pool", w.shape(), x.shape()));
        }
        let d = x.cols();
        let mut out = Tensor::zeros(b, d);
        for r in 0..b {
            let dst = out.row_slice_mut(r);
            for i in 0..k {
                let a = w.get(r, i);
                for (o, v) in dst.iter_mut().zip(x.row_slice(r * k + i)) {
                    *o += a * v;
                }
            }
        }
        Ok(self.push(out, Op::AttentionPool { alpha, ann }, &[alpha, ann]))
    }

    /// Multiply by a fixed mask (already scaled by the keep probability).
    pub(crate) fn apply_mask(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        let x = self.value(a);
        if mask.len() != x.len() {
            return Err(mismatch("dropout", x.shape(), [1, mask.len()]));
        }
        let data = x.data().iter().zip(&mask).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.rows(), x.cols(), data)?;
        Ok(self.push(out, Op::Dropout(a, mask), &[a]))
    }

    /// Per-row cross-entropy against label-smoothed targets
    /// `(1 − eps)·onehot(gold) + eps/V`, each row scaled by `weights[r]`.
    /// Returns a `B × 1` column.
    pub fn cross_entropy(&mut self, logits: Var, gold: &[usize], eps: f64, weights: &[f64]) -> Result<Var> {
        let x = self.value(logits);
        let (rows, v) = (x.rows(), x.cols());
        if gold.len() != rows || weights.len() != rows {
            return Err(mismatch("cross-entropy", x.shape(), [gold.len(), weights.len()]));
        }
        if !x.is_finite() {
            return Err(Error::NonFinite { kind: "cross-entropy" });
        }
        if !(0.0..=1.0).contains(&eps) {
            return Err(Error::invalid(format!("label smoothing {eps} outside [0, 1]")));
        }
        let mut probs = x.data().to_vec();
        let mut out = Tensor::zeros(rows, 1);
        for r in 0..rows {
            if gold[r] >= v {
                return Err(Error::invalid(format!("target id {} out of range {v}", gold[r])));
            }
            let row = x.row_slice(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
            let sum_logp: f64 = row.iter().map(|&z| z - lse).sum();
            let loss = -(1.0 - eps) * (row[gold[r]] - lse) - eps / v as f64 * sum_logp;
            out.data_mut()[r] = weights[r] * loss;
            for p in &mut probs[r * v..(r + 1) * v] {
                *p = (*p - lse).exp();
            }
        }
        let op = Op::CrossEntropy {
            logits,
            gold: gold.to_vec(),
            eps,
            weights: weights.to_vec(),
            probs,
        };
        Ok(self.push(out, op, &[logits]))
    }

    /// Per-row multi-label margin loss
    /// `Σ_{j∈W} Σ_{i∉W} max(0, 1 − (s_j − s_i))`, returned as a `B × 1` column.
    pub fn margin_rank(&mut self, scores: Var, sets: &[Vec<usize>]) -> Result<Var> {
        let x = self.value(scores);
        if sets.len() != x.rows() {
            return Err(mismatch("margin-rank", x.shape(), [sets.len(), 0]));
        }
        let n = x.cols();
        let mut out = Tensor::zeros(x.rows(), 1);
        let mut normalized = Vec::with_capacity(sets.len());
        for (r, set) in sets.iter().enumerate() {
            let mut member = vec![false; n];
            for &j in set {
                if j >= n {
                    return Err(Error::invalid(format!("margin-rank: index {j} out of range {n}")));
                }
                member[j] = true;
            }
            let s = x.row_slice(r);
            let mut total = 0.0;
            for j in (0..n).filter(|&j| member[j]) {
                for i in (0..n).filter(|&i| !member[i]) {
                    total += (1.0 - (s[j] - s[i])).max(0.0);
                }
            }
            out.data_mut()[r] = total;
            normalized.push((0..n).filter(|&j| member[j]).collect());
        }
        let op = Op::MarginRank {
            scores,
            sets: normalized,
        };
        Ok(self.push(out, op, &[scores]))
    }

    /// Gradients of the scalar `loss` with respect to all differentiable leaves.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        let shape = self.shape(loss);
        if shape != [1, 1] {
            return Err(Error::NonScalarLoss(shape));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        let mut leaves: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let out = &node.value;
            let mut acc = |var: Var, f: &mut dyn FnMut(&mut [f64])| {
                let target = &self.nodes[var.0];
                if !target.requires_grad {
                    return;
                }
                let slot = grads[var.0].get_or_insert_with(|| vec![0.0; target.value.len()]);
                f(slot);
            };
            match &node.op {
                Op::Leaf => {
                    leaves[idx] = Some(Tensor::new(out.rows(), out.cols(), g)?);
                }
                Op::MatMul(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let (m, k, nn) = (x.rows(), x.cols(), y.cols());
                    acc(*a, &mut |da| gemm_nt(m, nn, k, &g, y.data(), da, true));
                    acc(*b, &mut |db| gemm_tn(k, m, nn, x.data(), &g, db, true));
                }
                Op::Add { a, b, broadcast } => {
                    acc(*a, &mut |da| add_into(da, &g));
                    if *broadcast {
                        let cols = out.cols();
                        acc(*b, &mut |db| {
                            for row in g.chunks(cols) {
                                add_into(db, row);
                            }
                        });
                    } else {
                        acc(*b, &mut |db| add_into(db, &g));
                    }
                }
                Op::Sub(a, b) => {
                    acc(*a, &mut |da| add_into(da, &g));
                    acc(*b, &mut |db| {
                        for (d, v) in db.iter_mut().zip(&g) {
                            *d -= v;
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let (x, y) = (self.value(*a).data(), self.value(*b).data());
                    acc(*a, &mut |da| {
                        for ((d, gv), yv) in da.iter_mut().zip(&g).zip(y) {
                            *d += gv * yv;
                        }
                    });
                    acc(*b, &mut |db| {
                        for ((d, gv), xv) in db.iter_mut().zip(&g).zip(x) {
                            *d += gv * xv;
                        }
                    });
                }
                Op::Scale(a, f) => acc(*a, &mut |da| {
                    for (d, gv) in da.iter_mut().zip(&g) {
                        *d += f * gv;
                    }
                }),
                Op::Sigmoid(a) => acc(*a, &mut |da| {
                    for ((d, gv), y) in da.iter_mut().zip(&g).zip(out.data()) {
                        *d += gv * y * (1.0 - y);
                    }
                }),
                Op::Tanh(a) => acc(*a, &mut |da| {
                    for ((d, gv), y) in da.iter_mut().zip(&g).zip(out.data()) {
                        *d += gv * (1.0 - y * y);
                    }
                }),
                Op::Softmax(a) => {
                    let cols = out.cols();
                    acc(*a, &mut |da| {
                        for r in 0..out.rows() {
                            let y = out.row_slice(r);
                            let gr = &g[r * cols..(r + 1) * cols];
                            let dot: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                            for ((d, yv), gv) in da[r * cols..(r + 1) * cols].iter_mut().zip(y).zip(gr) {
                                *d += yv * (gv - dot);
                            }
                        }
                    });
                }
                Op::RowMax(a, arg) => {
                    let cols = self.value(*a).cols();
                    acc(*a, &mut |da| {
                        for (r, &j) in arg.iter().enumerate() {
                            da[r * cols + j] += g[r];
                        }
                    });
                }
                Op::Maximum(a, b) => {
                    let (x, y) = (self.value(*a).data(), self.value(*b).data());
                    acc(*a, &mut |da| {
                        for i in 0..da.len() {
                            if x[i] >= y[i] {
                                da[i] += g[i];
                            }
                        }
                    });
                    acc(*b, &mut |db| {
                        for i in 0..db.len() {
                            if x[i] < y[i] {
                                db[i] += g[i];
                            }
                        }
                    });
                }
                Op::Sum(a) => acc(*a, &mut |da| da.iter_mut().for_each(|d| *d += g[0])),
                Op::Mean(a) => {
                    let scale = g[0] / self.value(*a).len() as f64;
                    acc(*a, &mut |da| da.iter_mut().for_each(|d| *d += scale));
                }
                Op::ConcatCols(parts) => {
                    let cols = out.cols();
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        acc(p, &mut |dp| {
                            for r in 0..out.rows() {
                                add_into(&mut dp[r * w..(r + 1) * w], &g[r * cols + off..r * cols + off + w]);
                            }
                        });
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        acc(p, &mut |dp| add_into(dp, &g[off..off + len]));
                        off += len;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (w, cols) = (out.cols(), self.value(*a).cols());
                    acc(*a, &mut |da| {
                        for r in 0..out.rows() {
                            add_into(&mut da[r * cols + start..r * cols + start + w], &g[r * w..(r + 1) * w]);
                        }
                    });
                }
                Op::GatherRows(a, indices) => {
                    let cols = out.cols();
                    acc(*a, &mut |da| {
                        for (r, &i) in indices.iter().enumerate() {
                            add_into(&mut da[i * cols..(i + 1) * cols], &g[r * cols..(r + 1) * cols]);
                        }
                    });
                }
                Op::RepeatRows(a, times) => {
                    let cols = out.cols();
                    acc(*a, &mut |da| {
                        for (r, row) in g.chunks(cols).enumerate() {
                            let src = r / times;
                            add_into(&mut da[src * cols..(src + 1) * cols], row);
                        }
                    });
                }
                Op::Interleave(parts) => {
                    let t = parts.len();
                    let cols = out.cols();
                    for (i, &p) in parts.iter().enumerate() {
                        acc(p, &mut |dp| {
                            for b in 0..dp.len() / cols.max(1) {
                                let row = b * t + i;
                                add_into(&mut dp[b * cols..(b + 1) * cols], &g[row * cols..(row + 1) * cols]);
                            }
                        });
                    }
                }
                Op::Reshape(a) => acc(*a, &mut |da| add_into(da, &g)),
                Op::AttentionPool { alpha, ann } => {
                    let (w, x) = (self.value(*alpha), self.value(*ann));
                    let (b, k, d) = (w.rows(), w.cols(), x.cols());
                    acc(*alpha, &mut |dw| {
                        for r in 0..b {
                            let gr = &g[r * d..(r + 1) * d];
                            for i in 0..k {
                                dw[r * k + i] += dot(gr, x.row_slice(r * k + i));
                            }
                        }
                    });
                    acc(*ann, &mut |dx| {
                        for r in 0..b {
                            let gr = &g[r * d..(r + 1) * d];
                            for i in 0..k {
                                let a = w.get(r, i);
                                let row = r * k + i;
                                for (dv, gv) in dx[row * d..(row + 1) * d].iter_mut().zip(gr) {
                                    *dv += a * gv;
                                }
                            }
                        }
                    });
                }
                Op::Dropout(a, mask) => acc(*a, &mut |da| {
                    for ((d, gv), m) in da.iter_mut().zip(&g).zip(mask) {
                        *d += gv * m;
                    }
                }),
                Op::CrossEntropy {
                    logits,
                    gold,
                    eps,
                    weights,
                    probs,
                } => {
                    let v = self.value(*logits).cols();
                    let uniform = eps / v as f64;
                    acc(*logits, &mut |dl| {
                        for r in 0..gold.len() {
                            let scale = g[r] * weights[r];
                            if scale == 0.0 {
                                continue;
                            }
                            for j in 0..v {
                                let mut target = uniform;
                                if j == gold[r] {
                                    target += 1.0 - eps;
                                }
                                dl[r * v + j] += scale * (probs[r * v + j] - target);
                            }
                        }
                    });
                }
                Op::MarginRank { scores, sets } => {
                    let x = self.value(*scores);
                    let n = x.cols();
                    acc(*scores, &mut |ds| {
                        for (r, set) in sets.iter().enumerate() {
                            let s = x.row_slice(r);
                            let mut member = vec![false; n];
                            for &j in set {
                                member[j] = true;
                            }
                            for &j in set {
                                for i in (0..n).filter(|&i| !member[i]) {
                                    if 1.0 - (s[j] - s[i]) > 0.0 {
                                        ds[r * n + j] -= g[r];
                                        ds[r * n + i] += g[r];
                                    }
                                }
                            }
                        }
                    });
                }
            }
        }
        Ok(Gradients { grads: leaves })
    }
}

/// Inverted dropout: zero each entry with probability `p` and scale
/// survivors by `1/(1−p)`. Identity when not training or when `p == 0`.
pub fn dropout(g: &mut Graph<'_>, x: Var, p: f64, training: bool, rng: &mut Rng) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!("dropout probability {p} outside [0, 1)")));
    }
    if !training || p == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - p);
    let mask = (0..g.value(x).len())
        .map(|_| if rng.uniform() < p { 0.0 } else { keep })
        .collect();
    g.apply_mask(x, mask)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Row log-softmax, values only.
pub(crate) fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    row.iter().map(|&z| z - lse).collect()
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&[0.0, 0.0]));
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let x = g.constant(Tensor::row(&[3f64.ln(), 0.0]));
        let y = g.softmax(x).unwrap();
        assert!((g.value(y).data()[0] - 0.75).abs() < 1e-15);
        assert!((g.value(y).data()[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_non_finite_before_recording() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&[f64::NAN, 0.0]));
        let before = g.len();
        assert!(matches!(g.softmax(x), Err(Error::NonFinite { .. })));
        assert_eq!(g.len(), before);
    }

    #[test]
    fn row_max_example() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 3.0], vec![2.0, 0.0]]).unwrap());
        let m = g.row_max(x).unwrap();
        assert_eq!(g.value(m).data(), &[3.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_names_kind_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(2, 3));
        let b = g.constant(Tensor::zeros(2, 3));
        match g.matmul(a, b) {
            Err(Error::ShapeMismatch { kind, left, right }) => {
                assert_eq!(kind, "matmul");
                assert_eq!(left, [2, 3]);
                assert_eq!(right, [2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn softmax_first_output_gradient() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::row(&[0.0, 0.0]));
        let y = g.softmax(x).unwrap();
        let first = g.slice_cols(y, 0, 1).unwrap();
        let grads = g.backward(first).unwrap();
        let d = grads.get(x).unwrap().data();
        assert!((d[0] - 0.25).abs() < 1e-15);
        assert!((d[1] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn unused_leaf_gets_no_gradient() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(2.0));
        let unused = g.variable(Tensor::row(&[1.0, 2.0]));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.get_or_zeros(unused, [1, 2]).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_errors() {
        let g = Graph::new();
        assert!(matches!(g.backward(Var(0)), Err(Error::EmptyTape)));
        let mut g = Graph::new();
        let x = g.variable(Tensor::row(&[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss([1, 2]))));
    }

    #[test]
    fn dropout_contract() {
        let mut rng = Rng::new(7);
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(1, 8, 2.0));
        assert_eq!(dropout(&mut g, x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(dropout(&mut g, x, 0.3, false, &mut rng).unwrap(), x);
        assert!(dropout(&mut g, x, 1.0, true, &mut rng).is_err());

        let big = g.constant(Tensor::filled(1, 100_000, 1.0));
        let y = dropout(&mut g, big, 0.3, true, &mut rng).unwrap();
        let zeros = g.value(y).data().iter().filter(|&&v| v == 0.0).count();
        let frac = zeros as f64 / 100_000.0;
        assert!((frac - 0.3).abs() < 0.01, "zeroed fraction {frac}");
        let kept = g.value(y).data().iter().find(|&&v| v != 0.0).unwrap();
        assert!((kept - 1.0 / 0.7).abs() < 1e-12);
    }

    #[test]
    fn margin_rank_examples() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::row(&[2.5, 0.3]));
        let l = g.margin_rank(s, &[vec![0]]).unwrap();
        assert_eq!(g.value(l).data(), &[0.0]);

        let s = g.constant(Tensor::row(&[0.5, 0.3, 0.9]));
        let l = g.margin_rank(s, &[vec![0]]).unwrap();
        assert!((g.value(l).data()[0] - 2.2).abs() < 1e-12);

        let l = g.margin_rank(s, &[vec![0, 1, 2]]).unwrap();
        assert_eq!(g.value(l).data(), &[0.0]);
        let l = g.margin_rank(s, &[vec![]]).unwrap();
        assert_eq!(g.value(l).data(), &[0.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_vocab() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(1, 2));
        let l = g.cross_entropy(x, &[1], 0.0, &[1.0]).unwrap();
        assert!((g.value(l).data()[0] - 2f64.ln()).abs() < 1e-15);
    }
}
