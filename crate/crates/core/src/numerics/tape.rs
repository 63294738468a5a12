//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation in creation order, which is already a
//! topological order: parents always precede children. `backward` walks the
//! records in reverse exactly once. Constants (frozen weights, shared
//! prompts) are borrowed rather than copied and never receive a gradient
//! buffer.

use alloc::borrow::Cow;
use alloc::vec;
use alloc::vec::Vec;

use super::tensor::{gemm, gemm_new, matmul_dims};
use super::{DropoutMask, NumericsError, Tensor};

/// Additive value used for masked attention logits.
pub const MASK_VALUE: f64 = -1e9;

/// Entries of an additive mask at or below this value count as masked.
const MASKED_THRESHOLD: f64 = MASK_VALUE / 2.0;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch structure for [`Tape::attention`].
///
/// Rows of the query/key/value inputs are grouped as `batch` sequences of
/// `seq` positions. `key_mask[b * seq + j]` is `false` for padded positions,
/// which may never be attended to. Prefix positions are always attendable.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayout {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub key_mask: Vec<bool>,
}

impl AttentionLayout {
    pub fn unmasked(batch: usize, seq: usize, heads: usize) -> Self {
        Self { batch, seq, heads, key_mask: vec![true; batch * seq] }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { src: Var, axis: usize, start: usize },
    Mean { src: Var, axis: usize },
    Sum(Var),
    /// Stores `gelu'(x)` when the input needs a gradient.
    Gelu { src: Var, deriv: Vec<f64> },
    Dropout { src: Var, factors: Vec<f64> },
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Cosine { a: Var, b: Var, dot: f64, norm_a: f64, norm_b: f64 },
    SumSquares(Var),
    Gather { table: Var, ids: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, prefix: Option<(Var, Var)>, layout: AttentionLayout, probs: Vec<f64> },
    MaskedMeanPool { src: Var, mask: Vec<bool>, batch: usize },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Operation recorder for one forward pass.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients of leaf values produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, or `None` when `var` is
    /// not trainable (or the loss does not depend on it).
    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Number of materialized gradient buffers.
    pub fn materialized(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records an owned leaf; trainable iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        self.push_raw(Cow::Owned(tensor), Op::Leaf, needs_grad)
    }

    /// Records an owned trainable leaf regardless of its flag.
    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.push_raw(Cow::Owned(tensor), Op::Leaf, true)
    }

    /// Records a borrowed, non-trainable leaf.
    pub fn constant(&mut self, tensor: &'a Tensor) -> Var {
        self.push_raw(Cow::Borrowed(tensor), Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Cow<'a, Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        if cfg!(debug_assertions) && !value.all_finite() {
            let inputs_finite = parents.iter().all(|p| self.nodes[p.0].value.all_finite());
            debug_assert!(!inputs_finite, "non-finite output from finite inputs");
        }
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push_raw(Cow::Owned(value), op, needs_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumericsError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(NumericsError::ShapeMismatch { op, left: sa.to_vec(), right: sb.to_vec() });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, k, n) = matmul_dims(self.shape(a), self.shape(b))?;
        let out = gemm_new(m, k, n, self.value(a).data(), false, self.value(b).data(), false);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    /// Adds a `[D]` bias to every row of a `[.., D]` value.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, NumericsError> {
        let d = self.value(a).last_dim();
        if self.shape(bias) != [d] {
            return Err(NumericsError::ShapeMismatch {
                op: "add_bias",
                left: self.shape(a).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data();
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_exact_mut(d) {
            row.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        out.set_requires_grad(false);
        Ok(self.push(out, Op::AddBias(a, bias), &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|x| *x *= factor);
        out.set_requires_grad(false);
        self.push(out, Op::Scale(a, factor), &[a])
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, a: Var, shift: f64) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|x| *x += shift);
        out.set_requires_grad(false);
        self.push(out, Op::Offset(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let mut out = self.value(a).clone().reshape(shape)?;
        out.set_requires_grad(false);
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, NumericsError> {
        let first = *parts.first().ok_or(NumericsError::InvalidShape {
            op: "concat",
            shape: Vec::new(),
            reason: "no inputs",
        })?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(NumericsError::InvalidShape { op: "concat", shape: base, reason: "axis out of range" });
        }
        let mut axis_total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(NumericsError::ShapeMismatch { op: "concat", left: base, right: s.to_vec() });
            }
            axis_total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * axis_total * inner);
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = axis_total;
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Concat { parts: parts.to_vec(), axis }, parts))
    }

    pub fn slice(&mut self, src: Var, axis: usize, start: usize, len: usize) -> Result<Var, NumericsError> {
        let shape = self.shape(src).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(NumericsError::InvalidShape { op: "slice", shape, reason: "range out of bounds" });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src_chunk = shape[axis] * inner;
        let mut data = Vec::with_capacity(outer * len * inner);
        let x = self.value(src).data();
        for o in 0..outer {
            let begin = o * src_chunk + start * inner;
            data.extend_from_slice(&x[begin..begin + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let t = Tensor::new(out_shape, data)?;
        Ok(self.push(t, Op::Slice { src, axis, start }, &[src]))
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean(&mut self, src: Var, axis: usize) -> Result<Var, NumericsError> {
        let shape = self.shape(src).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(NumericsError::InvalidShape { op: "mean", shape, reason: "axis out of range or empty" });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let n = shape[axis];
        let x = self.value(src).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..n {
                let row = &x[(o * n + a) * inner..(o * n + a + 1) * inner];
                out[o * inner..(o + 1) * inner].iter_mut().zip(row).for_each(|(y, v)| *y += v);
            }
        }
        let inv = 1.0 / n as f64;
        out.iter_mut().for_each(|y| *y *= inv);
        let mut out_shape = shape;
        out_shape.remove(axis);
        let t = Tensor::new(out_shape, out)?;
        Ok(self.push(t, Op::Mean { src, axis }, &[src]))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, src: Var) -> Var {
        let s = self.value(src).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(src), &[src])
    }

    /// Exact GELU, `x · Φ(x)`.
    pub fn gelu(&mut self, src: Var) -> Var {
        let x = self.value(src);
        let mut out = Tensor::zeros(x.shape());
        let mut deriv = Vec::new();
        if self.nodes[src.0].needs_grad {
            deriv.reserve(x.len());
            for (o, &v) in out.data_mut().iter_mut().zip(x.data()) {
                let cdf = 0.5 * (1.0 + libm::erf(v * INV_SQRT_2));
                *o = v * cdf;
                deriv.push(cdf + v * INV_SQRT_2PI * libm::exp(-0.5 * v * v));
            }
        } else {
            out.data_mut().iter_mut().zip(x.data()).for_each(|(o, &v)| *o = gelu(v));
        }
        self.push(out, Op::Gelu { src, deriv }, &[src])
    }

    /// Applies a pre-sampled inverted-dropout mask.
    pub fn dropout(&mut self, src: Var, mask: &DropoutMask) -> Result<Var, NumericsError> {
        let factors = mask.factors();
        if factors.len() != self.value(src).len() {
            return Err(NumericsError::ShapeMismatch {
                op: "dropout",
                left: self.shape(src).to_vec(),
                right: vec![factors.len()],
            });
        }
        let mut out = self.value(src).clone();
        out.data_mut().iter_mut().zip(factors).for_each(|(x, f)| *x *= f);
        out.set_requires_grad(false);
        Ok(self.push(out, Op::Dropout { src, factors: factors.to_vec() }, &[src]))
    }

    /// Softmax over the last axis with an optional additive mask.
    ///
    /// The mask has either the full shape of `src` or the shape of one row,
    /// in which case it is applied to every row. A row whose entries are all
    /// masked is an error.
    pub fn softmax_lastdim(&mut self, src: Var, mask: Option<&Tensor>) -> Result<Var, NumericsError> {
        let x = self.value(src);
        let d = x.last_dim();
        if let Some(m) = mask {
            if m.shape() != x.shape() && m.shape() != [d] {
                return Err(NumericsError::ShapeMismatch {
                    op: "softmax_lastdim",
                    left: x.shape().to_vec(),
                    right: m.shape().to_vec(),
                });
            }
        }
        let mut out = x.clone();
        out.set_requires_grad(false);
        for (r, row) in out.data_mut().chunks_exact_mut(d).enumerate() {
            if let Some(m) = mask {
                let mrow = if m.len() == d { m.data() } else { &m.data()[r * d..(r + 1) * d] };
                if mrow.iter().all(|&v| v <= MASKED_THRESHOLD) {
                    return Err(NumericsError::FullyMasked { op: "softmax_lastdim", row: r });
                }
                row.iter_mut().zip(mrow).for_each(|(x, m)| *x += m);
            }
            softmax_in_place(row);
        }
        Ok(self.push(out, Op::Softmax(src), &[src]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, NumericsError> {
        let d = self.value(x).last_dim();
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(NumericsError::ShapeMismatch {
                    op: "layer_norm",
                    left: self.shape(x).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let xv = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let rs = 1.0 / libm::sqrt(var + eps);
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mu) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta]))
    }

    /// Cosine similarity of two flattened values; 0 when either is all-zero.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        if self.value(a).len() != self.value(b).len() {
            return Err(NumericsError::ShapeMismatch {
                op: "cosine_similarity",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let (dot, norm_a, norm_b) = dot_and_norms(self.value(a).data(), self.value(b).data());
        let cs = if norm_a == 0.0 || norm_b == 0.0 { 0.0 } else { dot / (norm_a * norm_b) };
        Ok(self.push(Tensor::scalar(cs), Op::Cosine { a, b, dot, norm_a, norm_b }, &[a, b]))
    }

    /// Sum of squared elements.
    pub fn l2_norm_squared(&mut self, src: Var) -> Var {
        let s = self.value(src).data().iter().map(|x| x * x).sum();
        self.push(Tensor::scalar(s), Op::SumSquares(src), &[src])
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(NumericsError::InvalidShape { op: "gather_rows", shape: t.shape().to_vec(), reason: "table must be 2-D" });
        }
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(NumericsError::IndexOutOfRange { op: "gather_rows", index: id, len: rows });
            }
            data.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(out, Op::Gather { table, ids: ids.to_vec() }, &[table]))
    }

    /// Multi-head scaled dot-product attention with an optional key/value
    /// prefix shared by every sequence in the batch.
    ///
    /// `q`, `k`, `v` are `[batch·seq, D]` (already projected); the prefix
    /// pair is `[P, D]` each. Output is `[batch·seq, D]` with heads
    /// concatenated along the feature axis. Queries come from real positions
    /// only, so the output has one row per input row.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        prefix: Option<(Var, Var)>,
        layout: AttentionLayout,
    ) -> Result<Var, NumericsError> {
        let rows = layout.batch * layout.seq;
        let qs = self.shape(q).to_vec();
        if qs.len() != 2 || qs[0] != rows {
            return Err(NumericsError::InvalidShape { op: "attention", shape: qs, reason: "query rows must equal batch*seq" });
        }
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let d = qs[1];
        if layout.heads == 0 || d % layout.heads != 0 {
            return Err(NumericsError::InvalidShape { op: "attention", shape: qs, reason: "head count must divide width" });
        }
        if layout.key_mask.len() != rows {
            return Err(NumericsError::ShapeMismatch { op: "attention", left: qs, right: vec![layout.key_mask.len()] });
        }
        let p = match prefix {
            Some((pk, pv)) => {
                self.same_shape("attention", pk, pv)?;
                let ps = self.shape(pk);
                if ps.len() != 2 || ps[1] != d {
                    return Err(NumericsError::ShapeMismatch { op: "attention", left: qs, right: ps.to_vec() });
                }
                ps[0]
            }
            None => 0,
        };
        let (seq, heads) = (layout.seq, layout.heads);
        let dh = d / heads;
        let keys = p + seq;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let empty: &[f64] = &[];
        let (pkd, pvd) = match prefix {
            Some((pk, pv)) => (self.value(pk).data(), self.value(pv).data()),
            None => (empty, empty),
        };
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; layout.batch * heads * seq * keys];
        let mut out = vec![0.0; rows * d];
        let mut scores = vec![0.0; keys];
        for b in 0..layout.batch {
            let mask = &layout.key_mask[b * seq..(b + 1) * seq];
            if p == 0 && !mask.iter().any(|&m| m) {
                return Err(NumericsError::FullyMasked { op: "attention", row: b });
            }
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..seq {
                    let qi = &qd[(b * seq + i) * d..][cols.clone()];
                    for j in 0..keys {
                        scores[j] = if j < p {
                            dot(qi, &pkd[j * d..][cols.clone()]) * scale
                        } else if mask[j - p] {
                            dot(qi, &kd[(b * seq + j - p) * d..][cols.clone()]) * scale
                        } else {
                            f64::NEG_INFINITY
                        };
                    }
                    softmax_in_place(&mut scores);
                    let base = ((b * heads + h) * seq + i) * keys;
                    probs[base..base + keys].copy_from_slice(&scores);
                    let oi = &mut out[(b * seq + i) * d..][cols.clone()];
                    for (j, &w) in scores.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let vj = if j < p { &pvd[j * d..][cols.clone()] } else { &vd[(b * seq + j - p) * d..][cols.clone()] };
                        oi.iter_mut().zip(vj).for_each(|(o, x)| *o += w * x);
                    }
                }
            }
        }
        let t = Tensor::new(vec![rows, d], out)?;
        let mut parents = vec![q, k, v];
        if let Some((pk, pv)) = prefix {
            parents.extend([pk, pv]);
        }
        Ok(self.push(t, Op::Attention { q, k, v, prefix, layout, probs }, &parents))
    }

    /// Mean over the valid positions of each sequence: `[batch·seq, D]` to
    /// `[batch, D]`.
    pub fn masked_mean_pool(&mut self, src: Var, mask: &[bool], batch: usize) -> Result<Var, NumericsError> {
        let x = self.value(src);
        let rows = x.rows();
        if x.rank() != 2 || mask.len() != rows || batch == 0 || rows % batch != 0 {
            return Err(NumericsError::ShapeMismatch { op: "masked_mean_pool", left: x.shape().to_vec(), right: vec![mask.len()] });
        }
        let seq = rows / batch;
        let d = x.last_dim();
        let mut out = vec![0.0; batch * d];
        for b in 0..batch {
            let count = mask[b * seq..(b + 1) * seq].iter().filter(|&&m| m).count();
            if count == 0 {
                return Err(NumericsError::FullyMasked { op: "masked_mean_pool", row: b });
            }
            let o = &mut out[b * d..(b + 1) * d];
            for s in 0..seq {
                if mask[b * seq + s] {
                    let r = &x.data()[(b * seq + s) * d..(b * seq + s + 1) * d];
                    o.iter_mut().zip(r).for_each(|(y, v)| *y += v);
                }
            }
            let inv = 1.0 / count as f64;
            o.iter_mut().for_each(|y| *y *= inv);
        }
        let t = Tensor::new(vec![batch, d], out)?;
        Ok(self.push(t, Op::MaskedMeanPool { src, mask: mask.to_vec(), batch }, &[src]))
    }

    /// Mean cross-entropy of `[B, A]` logits against `B` labels, via
    /// log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, NumericsError> {
        let x = self.value(logits);
        let a = x.last_dim();
        if x.rows() != labels.len() || labels.is_empty() {
            return Err(NumericsError::ShapeMismatch { op: "cross_entropy", left: x.shape().to_vec(), right: vec![labels.len()] });
        }
        let mut probs = x.data().to_vec();
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            if label >= a {
                return Err(NumericsError::IndexOutOfRange { op: "cross_entropy", index: label, len: a });
            }
            let row = &mut probs[r * a..(r + 1) * a];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + libm::log(row.iter().map(|v| libm::exp(v - max)).sum::<f64>());
            total += lse - row[label];
            row.iter_mut().for_each(|v| *v = libm::exp(*v - lse));
        }
        let loss = total / labels.len() as f64;
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, &[logits]))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let ls = self.value(loss);
        if ls.len() != 1 {
            return Err(NumericsError::NonScalarLoss(ls.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<'a>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        // Accumulates into a parent's gradient buffer when the parent needs one.
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = &nodes[v.0];
            if !n.needs_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]);
            f(buf);
        };
        // Same, but a fresh buffer starts as a copy of `g`.
        let pass = |grads: &mut [Option<Vec<f64>>], v: Var| {
            if nodes[v.0].needs_grad {
                match &mut grads[v.0] {
                    Some(buf) => add_into(buf, g),
                    slot @ None => *slot = Some(g.to_vec()),
                }
            }
        };
        // Elementwise `g ⊙ f` into a parent's gradient.
        let scaled = |grads: &mut [Option<Vec<f64>>], v: Var, f: &[f64]| {
            if nodes[v.0].needs_grad {
                match &mut grads[v.0] {
                    Some(buf) => buf.iter_mut().zip(g).zip(f).for_each(|((x, y), s)| *x += y * s),
                    slot @ None => *slot = Some(g.iter().zip(f).map(|(y, s)| y * s).collect()),
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if nodes[a.0].needs_grad {
                    match &mut grads[a.0] {
                        Some(da) => gemm(m, n, k, g, false, bv.data(), true, da, 1.0),
                        slot @ None => *slot = Some(gemm_new(m, n, k, g, false, bv.data(), true)),
                    }
                }
                if nodes[b.0].needs_grad {
                    match &mut grads[b.0] {
                        Some(db) => gemm(k, m, n, av.data(), true, g, false, db, 1.0),
                        slot @ None => *slot = Some(gemm_new(k, m, n, av.data(), true, g, false)),
                    }
                }
            }
            Op::Add(a, b) => {
                pass(grads, *a);
                pass(grads, *b);
            }
            Op::AddBias(a, bias) => {
                pass(grads, *a);
                acc(grads, *bias, &mut |db| {
                    let n = db.len();
                    for row in g.chunks_exact(n) {
                        add_into(db, row);
                    }
                });
            }
            Op::Scale(a, c) => acc(grads, *a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)),
            Op::Offset(a) | Op::Reshape(a) => pass(grads, *a),
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let chunk = nodes[p.0].value.shape()[*axis] * inner;
                    acc(grads, *p, &mut |d| {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            add_into(&mut d[o * chunk..(o + 1) * chunk], src);
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Slice { src, axis, start } => {
                let src_shape = nodes[src.0].value.shape();
                let len = node.value.shape()[*axis];
                let outer: usize = src_shape[..*axis].iter().product();
                let inner: usize = src_shape[axis + 1..].iter().product();
                let src_chunk = src_shape[*axis] * inner;
                acc(grads, *src, &mut |d| {
                    for o in 0..outer {
                        let begin = o * src_chunk + start * inner;
                        add_into(&mut d[begin..begin + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                    }
                });
            }
            Op::Mean { src, axis } => {
                let shape = nodes[src.0].value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let n = shape[*axis];
                let inv = 1.0 / n as f64;
                acc(grads, *src, &mut |d| {
                    for o in 0..outer {
                        for a in 0..n {
                            let dst = &mut d[(o * n + a) * inner..(o * n + a + 1) * inner];
                            dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]).for_each(|(x, y)| *x += y * inv);
                        }
                    }
                });
            }
            Op::Sum(src) => acc(grads, *src, &mut |d| d.iter_mut().for_each(|x| *x += g[0])),
            Op::Gelu { src, deriv } => scaled(grads, *src, deriv),
            Op::Dropout { src, factors } => scaled(grads, *src, factors),
            Op::Softmax(src) => {
                let y = node.value.data();
                let n = node.value.last_dim();
                acc(grads, *src, &mut |d| {
                    for ((dr, yr), gr) in d.chunks_exact_mut(n).zip(y.chunks_exact(n)).zip(g.chunks_exact(n)) {
                        let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dr[j] += yr[j] * (gr[j] - s);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = node.value.last_dim();
                let gam = nodes[gamma.0].value.data();
                acc(grads, *x, &mut |dx| {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            dx[r * d + j] += rs * (gr[j] * gam[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                });
                acc(grads, *gamma, &mut |dg| {
                    for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        dg.iter_mut().zip(gr.iter().zip(hr)).for_each(|(o, (a, b))| *o += a * b);
                    }
                });
                acc(grads, *beta, &mut |db| {
                    for gr in g.chunks_exact(d) {
                        add_into(db, gr);
                    }
                });
            }
            Op::Cosine { a, b, dot, norm_a, norm_b } => {
                if *norm_a == 0.0 || *norm_b == 0.0 {
                    return;
                }
                let cs = dot / (norm_a * norm_b);
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let gs = g[0];
                acc(grads, *a, &mut |d| {
                    for ((o, &x), &y) in d.iter_mut().zip(av).zip(bv) {
                        *o += gs * (y / (norm_a * norm_b) - cs * x / (norm_a * norm_a));
                    }
                });
                acc(grads, *b, &mut |d| {
                    for ((o, &x), &y) in d.iter_mut().zip(av).zip(bv) {
                        *o += gs * (x / (norm_a * norm_b) - cs * y / (norm_b * norm_b));
                    }
                });
            }
            Op::SumSquares(src) => {
                let x = nodes[src.0].value.data();
                acc(grads, *src, &mut |d| d.iter_mut().zip(x).for_each(|(o, v)| *o += 2.0 * v * g[0]));
            }
            Op::Gather { table, ids } => {
                let d = node.value.last_dim();
                acc(grads, *table, &mut |dt| {
                    for (i, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * d..(id + 1) * d], &g[i * d..(i + 1) * d]);
                    }
                });
            }
            Op::Attention { q, k, v, prefix, layout, probs } => {
                self.attention_backward(g, *q, *k, *v, *prefix, layout, probs, grads);
            }
            Op::MaskedMeanPool { src, mask, batch } => {
                let d = node.value.last_dim();
                let seq = mask.len() / batch;
                acc(grads, *src, &mut |dx| {
                    for b in 0..*batch {
                        let count = mask[b * seq..(b + 1) * seq].iter().filter(|&&m| m).count() as f64;
                        for s in 0..seq {
                            if mask[b * seq + s] {
                                let dst = &mut dx[(b * seq + s) * d..(b * seq + s + 1) * d];
                                dst.iter_mut().zip(&g[b * d..(b + 1) * d]).for_each(|(o, y)| *o += y / count);
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let a = nodes[logits.0].value.last_dim();
                let scale = g[0] / labels.len() as f64;
                acc(grads, *logits, &mut |d| {
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..a {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            d[r * a + j] += scale * (probs[r * a + j] - onehot);
                        }
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[f64],
        q: Var,
        k: Var,
        v: Var,
        prefix: Option<(Var, Var)>,
        layout: &AttentionLayout,
        probs: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let nodes = &self.nodes;
        let d = nodes[q.0].value.last_dim();
        let (seq, heads) = (layout.seq, layout.heads);
        let dh = d / heads;
        let p = prefix.map_or(0, |(pk, _)| nodes[pk.0].value.rows());
        let keys = p + seq;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let empty: &[f64] = &[];
        let (pkd, pvd) = match prefix {
            Some((pk, pv)) => (nodes[pk.0].value.data(), nodes[pv.0].value.data()),
            None => (empty, empty),
        };
        let (qd, kd, vd) = (nodes[q.0].value.data(), nodes[k.0].value.data(), nodes[v.0].value.data());
        let need = |x: Var| nodes[x.0].needs_grad;
        let want_prefix = prefix.map_or((false, false), |(pk, pv)| (need(pk), need(pv)));
        let mut dq = need(q).then(|| vec![0.0; qd.len()]);
        let mut dk = need(k).then(|| vec![0.0; kd.len()]);
        let mut dv = need(v).then(|| vec![0.0; vd.len()]);
        let mut dpk = want_prefix.0.then(|| vec![0.0; pkd.len()]);
        let mut dpv = want_prefix.1.then(|| vec![0.0; pvd.len()]);
        let mut dscore = vec![0.0; keys];
        for b in 0..layout.batch {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..seq {
                    let row = b * seq + i;
                    let base = ((b * heads + h) * seq + i) * keys;
                    let pr = &probs[base..base + keys];
                    let go = &g[row * d..][cols.clone()];
                    let key_row = |j: usize| if j < p { j * d } else { (b * seq + j - p) * d };
                    // dP_ij = dO_i · v_j, then the softmax Jacobian.
                    let mut weighted = 0.0;
                    for j in 0..keys {
                        if pr[j] == 0.0 {
                            dscore[j] = 0.0;
                            continue;
                        }
                        let vj = if j < p { &pvd[key_row(j)..][cols.clone()] } else { &vd[key_row(j)..][cols.clone()] };
                        dscore[j] = dot(go, vj);
                        weighted += pr[j] * dscore[j];
                    }
                    for j in 0..keys {
                        dscore[j] = pr[j] * (dscore[j] - weighted) * scale;
                    }
                    let qi = &qd[row * d..][cols.clone()];
                    for j in 0..keys {
                        if pr[j] == 0.0 {
                            continue;
                        }
                        let off = key_row(j);
                        let (kbuf, vbuf, kdat) = if j < p {
                            (dpk.as_deref_mut(), dpv.as_deref_mut(), pkd)
                        } else {
                            (dk.as_deref_mut(), dv.as_deref_mut(), kd)
                        };
                        if let Some(dq) = dq.as_deref_mut() {
                            let kj = &kdat[off..][cols.clone()];
                            dq[row * d..][cols.clone()].iter_mut().zip(kj).for_each(|(o, x)| *o += dscore[j] * x);
                        }
                        if let Some(dkb) = kbuf {
                            dkb[off..][cols.clone()].iter_mut().zip(qi).for_each(|(o, x)| *o += dscore[j] * x);
                        }
                        if let Some(dvb) = vbuf {
                            dvb[off..][cols.clone()].iter_mut().zip(go).for_each(|(o, x)| *o += pr[j] * x);
                        }
                    }
                }
            }
        }
        let mut merge = |var: Var, buf: Option<Vec<f64>>| {
            if let Some(buf) = buf {
                match &mut grads[var.0] {
                    Some(existing) => add_into(existing, &buf),
                    slot @ None => *slot = Some(buf),
                }
            }
        };
        merge(q, dq);
        merge(k, dk);
        merge(v, dv);
        if let Some((pk, pv)) = prefix {
            merge(pk, dpk);
            merge(pv, dpv);
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn dot_and_norms(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    (ab, libm::sqrt(aa), libm::sqrt(bb))
}

/// Max-subtracted softmax; `-inf` entries get exactly zero weight.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = libm::exp(*x - max);
        sum += *x;
    }
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|x| *x *= inv);
}

const INV_SQRT_2: f64 = core::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

