//! Tape-based reverse-mode automatic differentiation.
//!
//! Every forward operation appends a node holding its value and enough
//! context to run its vector-Jacobian product. [`Tape::backward`] walks the
//! nodes in reverse and accumulates gradients into leaves created with
//! `requires_grad`. Leaf gradients persist across `backward` calls until
//! [`Tape::zero_grad`].

use alloc::format;
use alloc::string::ToString;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{dims_mismatch, dot, matmul_kernel, matmul_nt_acc, matmul_tn_acc, FlopCounter, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_COEFF: f64 = 0.044715;
// sqrt(2 / pi)
const GELU_SCALE: f64 = 0.797_884_560_802_865_4;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Abs(Var),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    MaskedSoftmax { x: Var },
    MaskedMean { x: Var, mask: Arc<[bool]>, counts: Vec<usize> },
    Gather { x: Var, rows_in: usize, index: Arc<[Option<usize>]> },
    Concat(Var, Var),
    Reshape(Var),
    Attention { q: Var, k: Var, v: Var, mask: Arc<[bool]>, heads: usize, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// FLOP totals split by kernel family.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlopReport {
    /// Score (`QKᵀ`) and mixing (`PV`) products inside attention.
    pub attention: FlopCounter,
    /// Dense matrix products (projections, FFN, fusion, embedding, head).
    pub matmul: FlopCounter,
}

impl FlopReport {
    pub fn total(&self) -> u64 {
        self.attention.total() + self.matmul.total()
    }
}

/// Recording context for one forward/backward pass.
pub struct Tape {
    nodes: Vec<Node>,
    flops: FlopReport,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape with FLOP counting off and finiteness checks on.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), flops: FlopReport::default(), check_finite: true }
    }

    /// A tape that counts FLOPs and skips finiteness checks.
    pub fn instrumented() -> Self {
        let mut tape = Self::new();
        tape.flops.attention.enabled = true;
        tape.flops.matmul.enabled = true;
        tape.check_finite = false;
        tape
    }

    pub fn set_flop_counting(&mut self, enabled: bool) {
        self.flops.attention.enabled = enabled;
        self.flops.matmul.enabled = enabled;
    }

    pub fn set_check_finite(&mut self, enabled: bool) {
        self.check_finite = enabled;
    }

    pub fn flops(&self) -> FlopReport {
        self.flops
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Gradients are accumulated for it when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if `backward` has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Attention probabilities `[groups, heads, m, m]` stored by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `a · b` where `a: [..., k]` is treated as a stack of rows and `b: [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(dims_mismatch("matmul", sa, sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).numel() / k.max(1);
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let data = matmul_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        let (m, n, k) = (m as u64, n as u64, k as u64);
        self.flops.matmul.record(m * n * k, m * n * k.saturating_sub(1));
        let value = Tensor::new(&shape, data)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// Elementwise sum; `b` may broadcast when its shape is a suffix of `a`'s.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(dims_mismatch("add", sa, sb));
        }
        let bd = self.value(b).data();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_exact_mut(bd.len().max(1)) {
            for (o, &x) in chunk.iter_mut().zip(bd) {
                *o += x;
            }
        }
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise (Hadamard) product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dims_mismatch(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.map(a, |x| x * factor);
        self.push("scale", out, Op::Scale(a, factor), &[a])
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::new(t.shape(), t.data().iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(shape_err("mean", "mean of an empty tensor".to_string()));
        }
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, f64::abs);
        self.push("abs", out, Op::Abs(a), &[a])
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, gelu);
        self.push("gelu", out, Op::Gelu(a), &[a])
    }

    /// Normalizes over the last axis, then applies `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let d = t.last_dim();
        if d == 0 || !(eps > 0.0) {
            return Err(Error::Contract(format!("layer_norm needs D >= 1 and eps > 0 (D={d}, eps={eps})")));
        }
        self.value(gamma).ensure_shape("layer_norm", &[d])?;
        self.value(beta).ensure_shape("layer_norm", &[d])?;
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = t.numel() / d;
        let mut xhat = vec![0.0; t.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; t.numel()];
        for r in 0..rows {
            let row = &t.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / libm::sqrt(var + eps);
            rstd[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let value = Tensor::new(t.shape(), out)?;
        self.push("layer_norm", value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    /// Softmax over the last axis restricted to positions where `mask` is true.
    ///
    /// `mask` has one entry per position of the last axis and applies to every
    /// row. Masked outputs are exactly zero.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let t = self.value(x);
        let n = t.last_dim();
        if mask.len() != n {
            return Err(shape_err("masked_softmax", format!("mask of length {} for rows of length {n}", mask.len())));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::DegenerateRow { op: "masked_softmax" });
        }
        let mut out = t.data().to_vec();
        for row in out.chunks_exact_mut(n) {
            softmax_in_place(row, |j| mask[j]);
        }
        let value = Tensor::new(t.shape(), out)?;
        self.push("masked_softmax", value, Op::MaskedSoftmax { x }, &[x])
    }

    /// Mean over the rows of `x: [M×D]` (or each group of `x: [G×M×D]`) whose mask entry is true.
    pub fn masked_mean(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let t = self.value(x);
        let (groups, m, d, out_shape) = match *t.shape() {
            [m, d] => (1, m, d, vec![d]),
            [g, m, d] => (g, m, d, vec![g, d]),
            _ => return Err(shape_err("masked_mean", format!("expected rank 2 or 3, got {:?}", t.shape()))),
        };
        if mask.len() != groups * m {
            return Err(shape_err("masked_mean", format!("mask of length {} for {groups}x{m} rows", mask.len())));
        }
        let mut out = vec![0.0; groups * d];
        let mut counts = vec![0usize; groups];
        for gi in 0..groups {
            let acc = &mut out[gi * d..(gi + 1) * d];
            for r in 0..m {
                if !mask[gi * m + r] {
                    continue;
                }
                counts[gi] += 1;
                let row = &t.data()[(gi * m + r) * d..(gi * m + r + 1) * d];
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
            if counts[gi] == 0 {
                return Err(Error::DegenerateSubgraph { op: "masked_mean" });
            }
            let inv = 1.0 / counts[gi] as f64;
            acc.iter_mut().for_each(|a| *a *= inv);
        }
        let value = Tensor::new(&out_shape, out)?;
        let mask: Arc<[bool]> = mask.into();
        self.push("masked_mean", value, Op::MaskedMean { x, mask, counts }, &[x])
    }

    /// Row gather over a `[B, rows_in, D]` view of `x`, producing `[B, index.len(), D]`.
    ///
    /// `None` entries produce zero rows. Gradients scatter-add back.
    pub fn gather_rows(&mut self, x: Var, rows_in: usize, index: Arc<[Option<usize>]>) -> Result<Var> {
        let t = self.value(x);
        let d = t.last_dim();
        if rows_in == 0 || !t.numel().is_multiple_of(rows_in * d) {
            return Err(shape_err("gather_rows", format!("{:?} is not a stack of {rows_in}-row blocks", t.shape())));
        }
        if let Some(bad) = index.iter().flatten().find(|&&i| i >= rows_in) {
            return Err(shape_err("gather_rows", format!("row index {bad} out of range for {rows_in} rows")));
        }
        let batch = t.numel() / (rows_in * d);
        let rows_out = index.len();
        let mut out = vec![0.0; batch * rows_out * d];
        for b in 0..batch {
            for (r, src) in index.iter().enumerate() {
                if let Some(src) = *src {
                    let from = (b * rows_in + src) * d;
                    let to = (b * rows_out + r) * d;
                    out[to..to + d].copy_from_slice(&t.data()[from..from + d]);
                }
            }
        }
        let value = Tensor::new(&[batch, rows_out, d], out)?;
        self.push("gather_rows", value, Op::Gather { x, rows_in, index }, &[x])
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(dims_mismatch("concat", sa, sb));
        }
        let (da, db) = (ta.last_dim(), tb.last_dim());
        let rows = ta.numel() / da.max(1);
        let mut out = Vec::with_capacity(ta.numel() + tb.numel());
        for r in 0..rows {
            out.extend_from_slice(&ta.data()[r * da..(r + 1) * da]);
            out.extend_from_slice(&tb.data()[r * db..(r + 1) * db]);
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().expect("rank >= 1") = da + db;
        let value = Tensor::new(&shape, out)?;
        self.push("concat", value, Op::Concat(a, b), &[a, b])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(a), &[a])
    }

    /// Grouped multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `[G, M, D]`; `mask` has `G·M` entries marking valid
    /// tokens. Each head attends with `softmax(q kᵀ / √(D/heads))` over valid
    /// keys of its own group. Rows of invalid queries are zero.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: &[bool], heads: usize) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        let [groups, m, d] = shape[..] else {
            return Err(shape_err("attention", format!("expected [G, M, D], got {:?}", shape)));
        };
        if self.shape(k) != shape.as_slice() || self.shape(v) != shape.as_slice() {
            return Err(dims_mismatch("attention", self.shape(k), self.shape(v)));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Contract(format!("model width {d} is not divisible by {heads} heads")));
        }
        if mask.len() != groups * m {
            return Err(shape_err("attention", format!("mask of length {} for {groups}x{m} tokens", mask.len())));
        }
        let dh = d / heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; groups * heads * m * m];
        let mut out = vec![0.0; groups * m * d];
        for g in 0..groups {
            let valid = &mask[g * m..(g + 1) * m];
            if !valid.iter().any(|&x| x) {
                return Err(Error::DegenerateSubgraph { op: "attention" });
            }
            for h in 0..heads {
                let col = h * dh;
                for i in 0..m {
                    if !valid[i] {
                        continue;
                    }
                    let qi = &qd[(g * m + i) * d + col..][..dh];
                    let prow = &mut probs[((g * heads + h) * m + i) * m..][..m];
                    for j in 0..m {
                        if valid[j] {
                            prow[j] = scale * dot(qi, &kd[(g * m + j) * d + col..][..dh]);
                        }
                    }
                    softmax_in_place(prow, |j| valid[j]);
                    let oi = &mut out[(g * m + i) * d + col..][..dh];
                    for j in 0..m {
                        if valid[j] {
                            let p = prow[j];
                            for (o, &x) in oi.iter_mut().zip(&vd[(g * m + j) * d + col..][..dh]) {
                                *o += p * x;
                            }
                        }
                    }
                }
            }
        }
        // Cost of the padded layout: per group and head, an M×M score product and an M×M·dh mix.
        let (gh, m, dh) = ((groups * heads) as u64, m as u64, dh as u64);
        self.flops.attention.record(gh * 2 * m * m * dh, gh * (m * m * (dh - 1) + m * dh * (m.saturating_sub(1))));
        let value = Tensor::new(&shape, out)?;
        let mask: Arc<[bool]> = mask.into();
        self.push("attention", value, Op::Attention { q, k, v, mask, heads, probs }, &[q, k, v])
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                adj[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        for (i, g) in adj.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(Tensor::new(node.value.shape(), g)?),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let needs = |v: Var| nodes[v.0].requires_grad;
        let out = nodes[i].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let sb = nodes[b.0].value.shape();
                let (k, n) = (sb[0], sb[1]);
                let m = nodes[a.0].value.numel() / k.max(1);
                if needs(*a) {
                    matmul_nt_acc(g, val(*b), slot(adj, nodes, *a), m, k, n);
                }
                if needs(*b) {
                    matmul_tn_acc(val(*a), g, slot(adj, nodes, *b), m, k, n);
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    slot(adj, nodes, *a).iter_mut().zip(g).for_each(|(s, x)| *s += x);
                }
                if needs(*b) {
                    let sb = slot(adj, nodes, *b);
                    let len = sb.len().max(1);
                    for chunk in g.chunks_exact(len) {
                        sb.iter_mut().zip(chunk).for_each(|(s, x)| *s += x);
                    }
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    slot(adj, nodes, *a).iter_mut().zip(g).for_each(|(s, x)| *s += x);
                }
                if needs(*b) {
                    slot(adj, nodes, *b).iter_mut().zip(g).for_each(|(s, x)| *s -= x);
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let vb = val(*b);
                    slot(adj, nodes, *a).iter_mut().zip(g.iter().zip(vb)).for_each(|(s, (x, y))| *s += x * y);
                }
                if needs(*b) {
                    let va = val(*a);
                    slot(adj, nodes, *b).iter_mut().zip(g.iter().zip(va)).for_each(|(s, (x, y))| *s += x * y);
                }
            }
            Op::Scale(a, f) => {
                slot(adj, nodes, *a).iter_mut().zip(g).for_each(|(s, x)| *s += f * x);
            }
            Op::Sum(a) => {
                slot(adj, nodes, *a).iter_mut().for_each(|s| *s += g[0]);
            }
            Op::Mean(a) => {
                let s = slot(adj, nodes, *a);
                let gi = g[0] / s.len() as f64;
                s.iter_mut().for_each(|x| *x += gi);
            }
            Op::Abs(a) => {
                let va = val(*a);
                slot(adj, nodes, *a).iter_mut().zip(g.iter().zip(va)).for_each(|(s, (x, y))| {
                    if *y > 0.0 {
                        *s += x;
                    } else if *y < 0.0 {
                        *s -= x;
                    }
                });
            }
            Op::Gelu(a) => {
                let va = val(*a);
                slot(adj, nodes, *a).iter_mut().zip(g.iter().zip(va)).for_each(|(s, (x, y))| *s += x * gelu_grad(*y));
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = nodes[gamma.0].value.numel();
                let gam = val(*gamma);
                if needs(*gamma) {
                    let sg = slot(adj, nodes, *gamma);
                    for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        sg.iter_mut().zip(gr.iter().zip(hr)).for_each(|(s, (a, b))| *s += a * b);
                    }
                }
                if needs(*beta) {
                    let sb = slot(adj, nodes, *beta);
                    for gr in g.chunks_exact(d) {
                        sb.iter_mut().zip(gr).for_each(|(s, a)| *s += a);
                    }
                }
                if needs(*x) {
                    let sx = slot(adj, nodes, *x);
                    let mut dxhat = vec![0.0; d];
                    for (r, (gr, hr)) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                        for j in 0..d {
                            dxhat[j] = gr[j] * gam[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dh = dot(&dxhat, hr) / d as f64;
                        let sr = &mut sx[r * d..(r + 1) * d];
                        for j in 0..d {
                            sr[j] += rstd[r] * (dxhat[j] - mean_d - hr[j] * mean_dh);
                        }
                    }
                }
            }
            Op::MaskedSoftmax { x } => {
                let n = nodes[i].value.last_dim();
                let sx = slot(adj, nodes, *x);
                for ((sr, gr), yr) in sx.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(out.chunks_exact(n)) {
                    let inner = dot(gr, yr);
                    for j in 0..n {
                        sr[j] += yr[j] * (gr[j] - inner);
                    }
                }
            }
            Op::MaskedMean { x, mask, counts } => {
                let d = nodes[i].value.last_dim();
                let m = mask.len() / counts.len();
                let sx = slot(adj, nodes, *x);
                for (gi, &count) in counts.iter().enumerate() {
                    let inv = 1.0 / count as f64;
                    let gr = &g[gi * d..(gi + 1) * d];
                    for r in 0..m {
                        if mask[gi * m + r] {
                            let row = &mut sx[(gi * m + r) * d..][..d];
                            row.iter_mut().zip(gr).for_each(|(s, a)| *s += a * inv);
                        }
                    }
                }
            }
            Op::Gather { x, rows_in, index } => {
                let d = nodes[i].value.last_dim();
                let rows_out = index.len();
                let batch = out.len() / (rows_out * d).max(1);
                let sx = slot(adj, nodes, *x);
                for b in 0..batch {
                    for (r, src) in index.iter().enumerate() {
                        if let Some(src) = *src {
                            let to = &mut sx[(b * rows_in + src) * d..][..d];
                            let from = &g[(b * rows_out + r) * d..][..d];
                            to.iter_mut().zip(from).for_each(|(s, a)| *s += a);
                        }
                    }
                }
            }
            Op::Concat(a, b) => {
                let da = nodes[a.0].value.last_dim();
                let db = nodes[b.0].value.last_dim();
                let rows = g.len() / (da + db).max(1);
                if needs(*a) {
                    let sa = slot(adj, nodes, *a);
                    for r in 0..rows {
                        let from = &g[r * (da + db)..][..da];
                        sa[r * da..(r + 1) * da].iter_mut().zip(from).for_each(|(s, x)| *s += x);
                    }
                }
                if needs(*b) {
                    let sb = slot(adj, nodes, *b);
                    for r in 0..rows {
                        let from = &g[r * (da + db) + da..][..db];
                        sb[r * db..(r + 1) * db].iter_mut().zip(from).for_each(|(s, x)| *s += x);
                    }
                }
            }
            Op::Reshape(a) => {
                slot(adj, nodes, *a).iter_mut().zip(g).for_each(|(s, x)| *s += x);
            }
            Op::Attention { q, k, v, mask, heads, probs } => {
                let shape = nodes[i].value.shape();
                let (groups, m, d) = (shape[0], shape[1], shape[2]);
                let dh = d / heads;
                let scale = 1.0 / libm::sqrt(dh as f64);
                let (qd, kd, vd) = (val(*q), val(*k), val(*v));
                let mut dq = vec![0.0; qd.len()];
                let mut dk = vec![0.0; kd.len()];
                let mut dv = vec![0.0; vd.len()];
                let mut ds = vec![0.0; m];
                for gi in 0..groups {
                    let valid = &mask[gi * m..(gi + 1) * m];
                    for h in 0..*heads {
                        let col = h * dh;
                        for qi in 0..m {
                            if !valid[qi] {
                                continue;
                            }
                            let prow = &probs[((gi * heads + h) * m + qi) * m..][..m];
                            let go = &g[(gi * m + qi) * d + col..][..dh];
                            let mut inner = 0.0;
                            for j in 0..m {
                                if valid[j] {
                                    let dp = dot(go, &vd[(gi * m + j) * d + col..][..dh]);
                                    ds[j] = dp;
                                    inner += prow[j] * dp;
                                    let dvj = &mut dv[(gi * m + j) * d + col..][..dh];
                                    dvj.iter_mut().zip(go).for_each(|(s, x)| *s += prow[j] * x);
                                }
                            }
                            let qrow = &qd[(gi * m + qi) * d + col..][..dh];
                            for j in 0..m {
                                if !valid[j] {
                                    continue;
                                }
                                let s = scale * prow[j] * (ds[j] - inner);
                                if s == 0.0 {
                                    continue;
                                }
                                let krow = &kd[(gi * m + j) * d + col..][..dh];
                                let dqi = &mut dq[(gi * m + qi) * d + col..][..dh];
                                dqi.iter_mut().zip(krow).for_each(|(a, b)| *a += s * b);
                                let dkj = &mut dk[(gi * m + j) * d + col..][..dh];
                                dkj.iter_mut().zip(qrow).for_each(|(a, b)| *a += s * b);
                            }
                        }
                    }
                }
                for (var, local) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if needs(var) {
                        slot(adj, nodes, var).iter_mut().zip(&local).for_each(|(s, x)| *s += x);
                    }
                }
            }
        }
    }
}

fn slot<'a>(adj: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
    adj[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()])
}

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::tanh(GELU_SCALE * (x + GELU_COEFF * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let t = libm::tanh(GELU_SCALE * (x + GELU_COEFF * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_SCALE * (1.0 + 3.0 * GELU_COEFF * x * x)
}

/// Stable softmax over entries selected by `valid`; the rest are set to zero.
pub(crate) fn softmax_in_place(row: &mut [f64], valid: impl Fn(usize) -> bool) {
    let mut max = f64::NEG_INFINITY;
    for (j, &x) in row.iter().enumerate() {
        if valid(j) && x > max {
            max = x;
        }
    }
    let mut total = 0.0;
    for (j, x) in row.iter_mut().enumerate() {
        if valid(j) {
            *x = libm::exp(*x - max);
            total += *x;
        } else {
            *x = 0.0;
        }
    }
    let inv = 1.0 / total;
    row.iter_mut().for_each(|x| *x *= inv);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut tape = Tape::new();
        let b = tape.constant(t(&[&[5.0, 6.0], &[7.0, 8.0]]));
        let eye = tape.constant(Tensor::eye(2));
        let c = tape.matmul(eye, b).unwrap();
        assert_eq!(tape.value(c), tape.value(b));

        let z = tape.constant(Tensor::zeros(&[2, 3]));
        let any = tape.constant(Tensor::new(&[3, 4], (0..12).map(f64::from).collect()).unwrap());
        let c = tape.matmul(z, any).unwrap();
        assert_eq!(tape.value(c), &Tensor::zeros(&[2, 4]));
    }

    #[test]
    fn matmul_reports_both_shapes_on_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let msg = format!("{}", tape.matmul(a, b).unwrap_err());
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_counts_flops() {
        let mut tape = Tape::instrumented();
        let a = tape.constant(Tensor::ones(&[3, 5]));
        let b = tape.constant(Tensor::ones(&[5, 7]));
        tape.matmul(a, b).unwrap();
        let f = tape.flops().matmul;
        assert_eq!(f.mults, 3 * 7 * 5);
        assert_eq!(f.adds, 3 * 7 * 4);
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2], vec![0.0, 0.0]).unwrap());
        let y = tape.masked_softmax(x, &[true, true]).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x = tape.constant(Tensor::new(&[3], vec![1.0, 1.0, 123.0]).unwrap());
        let y = tape.masked_softmax(x, &[true, true, false]).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5, 0.0]);

        let x = tape.constant(Tensor::new(&[2], vec![0.0, libm::log(3.0)]).unwrap());
        let y = tape.masked_softmax(x, &[true, true]).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 0.25).abs() < 1e-15 && (d[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_fully_masked_row() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2]));
        assert_eq!(tape.masked_softmax(x, &[false, false]).unwrap_err(), Error::DegenerateRow { op: "masked_softmax" });
    }

    #[test]
    fn masked_mean_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[&[2.0, 4.0], &[6.0, 8.0]]));
        let y = tape.masked_mean(x, &[true, true]).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0, 6.0]);

        let x = tape.constant(t(&[&[2.0, 4.0], &[999.0, 999.0]]));
        let y = tape.masked_mean(x, &[true, false]).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 4.0]);

        let x = tape.constant(t(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]));
        let y = tape.masked_mean(x, &[true, true, false]).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x = tape.constant(t(&[&[1.0, 0.0]]));
        assert!(matches!(tape.masked_mean(x, &[false]), Err(Error::DegenerateSubgraph { .. })));
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let gamma = tape.constant(Tensor::ones(&[3]));
        let beta = tape.constant(Tensor::zeros(&[3]));
        let x = tape.constant(Tensor::full(&[3], 7.0));
        let y = tape.layer_norm(x, gamma, beta, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);

        let x = tape.constant(Tensor::new(&[3], vec![0.0, 2.0, 4.0]).unwrap());
        let y = tape.layer_norm(x, gamma, beta, 1e-5).unwrap();
        // Scalar evaluation: variance 8/3, x̂ = ±2/√(8/3 + 1e-5).
        let expected = 2.0 / libm::sqrt(8.0 / 3.0 + 1e-5);
        let d = tape.value(y).data();
        assert!((d[0] + expected).abs() < 1e-14 && d[1].abs() < 1e-14 && (d[2] - expected).abs() < 1e-14);
        assert!((d[2] - 1.2247).abs() < 1e-4);

        let g2 = tape.constant(Tensor::ones(&[2]));
        let b2 = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(Tensor::new(&[2], vec![-1.0, 1.0]).unwrap());
        let y = tape.layer_norm(x, g2, b2, 1e-12).unwrap();
        assert!(tape.value(y).max_abs_diff(tape.value(x)) < 1e-11);
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.8412).abs() < 1e-3);
        assert!((gelu(10.0) - 10.0).abs() < 1e-9);
        assert!(gelu(-10.0).abs() < 1e-9);
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[&[1.0, -2.0], &[3.0, 0.5]]));
        let s = tape.sum(w).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &Tensor::ones(&[2, 2]));

        let mut tape = Tape::new();
        let w = tape.param(t(&[&[1.0, -2.0], &[3.0, 0.5]]));
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum(sq).unwrap();
        let half = tape.scale(s, 0.5).unwrap();
        tape.backward(half).unwrap();
        assert_eq!(tape.grad(w).unwrap(), tape.value(w));
    }

    #[test]
    fn backward_accumulates_until_reset() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::ones(&[2]));
        let s = tape.sum(w).unwrap();
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[2.0, 2.0]);
        tape.zero_grad();
        assert!(tape.grad(w).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::ones(&[2]));
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(&[1], vec![f64::MAX]).unwrap());
        assert_eq!(tape.scale(a, 10.0).unwrap_err(), Error::NonFinite { op: "scale" });
        tape.set_check_finite(false);
        assert!(tape.scale(a, 10.0).is_ok());
    }
}
