//! Reverse-mode tape.
//!
//! Nodes are appended in evaluation order, so every node only refers to
//! earlier nodes and a reverse sweep over the node list is a valid reverse
//! topological order.

use std::borrow::Cow;

use crate::error::{shape_err, Result, TensorError};
use crate::kernels::{rope_in_place, softmax_row_into};
use crate::scalar::{matmul_into, Layout};
use crate::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Half-open interval of key rows `[start, end)` visible to one query row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RowSpan {
    pub start: usize,
    pub end: usize,
}

impl RowSpan {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

#[derive(Debug)]
struct AttnSaved<T> {
    q: Var,
    k: Var,
    v: Var,
    spans: Vec<RowSpan>,
    /// Start of each row's block in `probs` (block = heads × span len).
    offsets: Vec<usize>,
    probs: Vec<T>,
    heads: usize,
    kv_heads: usize,
    head_dim: usize,
    scale: f64,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, b_layout: Layout, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f64> },
    SiluMul(Var, Var),
    Embedding { table: Var, ids: Vec<usize> },
    Rope { x: Var, positions: Vec<usize>, heads: usize, head_dim: usize, theta: f64 },
    Attention(Box<AttnSaved<T>>),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    PoolGroups { x: Var, kv_heads: usize, group: usize, head_dim: usize },
    Softmax(Var),
    LogSoftmax(Var),
    LogSumExp(Var),
    GatherElems { x: Var, idx: Vec<usize> },
    Sum(Var),
    DotConst { x: Var, w: Vec<T> },
    CrossEntropy { x: Var, targets: Vec<usize>, rows: Vec<usize> },
}

#[derive(Debug)]
struct Node<'a, T: Scalar> {
    value: Cow<'a, [T]>,
    shape: Vec<usize>,
    op: Op<T>,
    needs_grad: bool,
}

impl<T: Scalar> Node<'_, T> {
    fn rows(&self) -> usize {
        match self.shape.as_slice() {
            [] | [_] => 1,
            s => s[..s.len() - 1].iter().product(),
        }
    }

    fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }
}

/// Recording of forward operations plus the gradients produced by
/// [`Tape::backward`].
///
/// Leaves created with [`Tape::param`] borrow their data, so building a tape
/// over a parameter set does not copy the weights.
#[derive(Debug)]
pub struct Tape<'a, T: Scalar = f32> {
    nodes: Vec<Node<'a, T>>,
    grad_enabled: bool,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<'a, T: Scalar> Default for Tape<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grad_enabled: true, grads: Vec::new(), backward_done: false }
    }

    /// A tape that records values only; no node will ever need a gradient.
    pub fn inference() -> Self {
        Self { grad_enabled: false, ..Self::new() }
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

    // ---- leaves ---------------------------------------------------------

    /// Borrowed leaf. Tracks gradients when the tensor has `requires_grad`.
    pub fn param(&mut self, t: &'a Tensor<T>) -> Var {
        let needs = self.grad_enabled && t.requires_grad;
        self.push_raw(Cow::Borrowed(t.data()), t.shape().to_vec(), Op::Leaf, needs)
    }

    /// Owned leaf.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let needs = self.grad_enabled && t.requires_grad;
        let shape = t.shape().to_vec();
        self.push_raw(Cow::Owned(t.into_data()), shape, Op::Leaf, needs)
    }

    /// Owned leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push_raw(Cow::Owned(t.into_data()), shape, Op::Leaf, false)
    }

    /// Copy of `v` cut off from the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.tensor(v);
        self.constant(t)
    }

    // ---- access ---------------------------------------------------------

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].rows()
    }

    pub fn cols(&self, v: Var) -> usize {
        self.nodes[v.0].cols()
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("node shape is consistent")
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push_raw(&mut self, value: Cow<'a, [T]>, shape: Vec<usize>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, shape, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Vec<T>, shape: Vec<usize>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.iter().all(|x| x.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        let needs = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push_raw(Cow::Owned(value), shape, op, needs))
    }

    // ---- linear algebra -------------------------------------------------

    /// `a [m,k] · b [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, Layout::Normal)
    }

    /// `a [m,k] · bᵀ` with `b` stored as `[n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, Layout::Transposed)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_layout: Layout) -> Result<Var> {
        let (m, k) = (self.rows(a), self.cols(a));
        let (br, bc) = (self.rows(b), self.cols(b));
        let (kb, n) = match b_layout {
            Layout::Normal => (br, bc),
            Layout::Transposed => (bc, br),
        };
        if k != kb {
            return shape_err("matmul", format!("{:?} x {:?} ({b_layout:?})", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(self.value(a), Layout::Normal, self.value(b), b_layout, &mut out, m, k, n, false);
        self.push("matmul", out, vec![m, n], Op::MatMul { a, b, b_layout, m, k, n }, &[a, b])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.nodes[a.0].value.len() != self.nodes[b.0].value.len() {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x + *y).collect();
        self.push("add", out, self.shape(a).to_vec(), Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x - *y).collect();
        self.push("sub", out, self.shape(a).to_vec(), Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x * *y).collect();
        self.push("mul", out, self.shape(a).to_vec(), Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let st = T::from_f64(s);
        let out = self.value(a).iter().map(|x| *x * st).collect();
        self.push("scale", out, self.shape(a).to_vec(), Op::Scale(a, s), &[a])
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        let ct = T::from_f64(c);
        let out = self.value(a).iter().map(|x| *x + ct).collect();
        self.push("offset", out, self.shape(a).to_vec(), Op::Offset(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).iter().map(|x| x.as_f64()).sum();
        self.push("sum", vec![T::from_f64(s)], vec![1], Op::Sum(a), &[a])
    }

    /// `Σ xᵢ·wᵢ` with constant weights.
    pub fn dot_const(&mut self, x: Var, w: Vec<T>) -> Result<Var> {
        if w.len() != self.value(x).len() {
            return shape_err("dot_const", format!("{} weights for {:?}", w.len(), self.shape(x)));
        }
        let s: f64 = self.value(x).iter().zip(&w).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
        self.push("dot_const", vec![T::from_f64(s)], vec![1], Op::DotConst { x, w }, &[x])
    }

    // ---- transformer pieces ---------------------------------------------

    /// RMS normalisation over the last axis followed by a learned gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (rows, d) = (self.rows(x), self.cols(x));
        if self.value(gain).len() != d {
            return shape_err("rms_norm", format!("gain {:?} for width {d}", self.shape(gain)));
        }
        let xv = self.value(x);
        let gv = self.value(gain);
        let mut out = vec![T::zero(); rows * d];
        let mut inv_rms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let ms: f64 = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>() / d as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms.push(inv);
            let invt = T::from_f64(inv);
            for j in 0..d {
                out[r * d + j] = row[j] * invt * gv[j];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push("rms_norm", out, shape, Op::RmsNorm { x, gain, inv_rms }, &[x, gain])
    }

    /// `silu(a) ⊙ b` (the SwiGLU gate).
    pub fn silu_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("silu_mul", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| {
                let xf = x.as_f64();
                T::from_f64(xf / (1.0 + (-xf).exp())) * *y
            })
            .collect();
        self.push("silu_mul", out, self.shape(a).to_vec(), Op::SiluMul(a, b), &[a, b])
    }

    /// Rows of `table [vocab, d]` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = (self.rows(table), self.cols(table));
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::OutOfRange { op: "embedding", index: id, len: vocab });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        self.push("embedding", out, vec![ids.len(), d], Op::Embedding { table, ids: ids.to_vec() }, &[table])
    }

    /// Rotary embedding on `x [tokens, heads·head_dim]`.
    pub fn rope(&mut self, x: Var, positions: &[usize], heads: usize, head_dim: usize, theta: f64) -> Result<Var> {
        if head_dim % 2 != 0 {
            return Err(TensorError::OddHeadDim(head_dim));
        }
        if self.cols(x) != heads * head_dim || self.rows(x) != positions.len() {
            return shape_err("rope", format!("{:?} with {} positions, {heads}x{head_dim}", self.shape(x), positions.len()));
        }
        let mut out = self.value(x).to_vec();
        rope_in_place(&mut out, positions, heads, head_dim, theta, false);
        let shape = self.shape(x).to_vec();
        let op = Op::Rope { x, positions: positions.to_vec(), heads, head_dim, theta };
        self.push("rope", out, shape, op, &[x])
    }

    /// Scaled dot-product attention with grouped key/value heads.
    ///
    /// `q` is `[rows, heads·head_dim]`; `k` and `v` are
    /// `[keys, kv_heads·head_dim]`. Query row `i` attends to key rows
    /// `spans[i]`; query head `h` reads key/value head `h / (heads / kv_heads)`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        spans: Vec<RowSpan>,
        heads: usize,
        kv_heads: usize,
        head_dim: usize,
    ) -> Result<Var> {
        if kv_heads == 0 || heads % kv_heads != 0 {
            return shape_err("attention", format!("{heads} heads over {kv_heads} kv heads"));
        }
        let rows = self.rows(q);
        let keys = self.rows(k);
        if self.cols(q) != heads * head_dim
            || self.cols(k) != kv_heads * head_dim
            || self.cols(v) != kv_heads * head_dim
            || self.rows(v) != keys
            || spans.len() != rows
        {
            return shape_err(
                "attention",
                format!("q {:?} k {:?} v {:?} spans {}", self.shape(q), self.shape(k), self.shape(v), spans.len()),
            );
        }
        let group = heads / kv_heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let qv = self.value(q);
        let kvals = self.value(k);
        let vvals = self.value(v);
        let qw = heads * head_dim;
        let kw = kv_heads * head_dim;
        let mut offsets = Vec::with_capacity(rows);
        let mut total = 0;
        for s in &spans {
            if s.is_empty() {
                return Err(TensorError::EmptyRow);
            }
            if s.end > keys {
                return Err(TensorError::OutOfRange { op: "attention", index: s.end, len: keys });
            }
            offsets.push(total);
            total += heads * s.len();
        }
        let mut probs = vec![T::zero(); total];
        let mut out = vec![T::zero(); rows * qw];
        let mut scores = Vec::new();
        let mut acc = vec![0.0f64; head_dim];
        for (i, span) in spans.iter().enumerate() {
            for h in 0..heads {
                let kh = h / group;
                let qrow = &qv[i * qw + h * head_dim..i * qw + (h + 1) * head_dim];
                scores.clear();
                let mut max = f64::NEG_INFINITY;
                for j in span.start..span.end {
                    let krow = &kvals[j * kw + kh * head_dim..j * kw + (kh + 1) * head_dim];
                    let s: f64 = qrow.iter().zip(krow).map(|(a, b)| a.as_f64() * b.as_f64()).sum::<f64>() * scale;
                    max = max.max(s);
                    scores.push(s);
                }
                let mut denom = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    denom += *s;
                }
                acc.iter_mut().for_each(|a| *a = 0.0);
                let base = offsets[i] + h * span.len();
                for (jj, j) in (span.start..span.end).enumerate() {
                    let p = scores[jj] / denom;
                    probs[base + jj] = T::from_f64(p);
                    let vrow = &vvals[j * kw + kh * head_dim..j * kw + (kh + 1) * head_dim];
                    for (a, x) in acc.iter_mut().zip(vrow) {
                        *a += p * x.as_f64();
                    }
                }
                for (d, a) in acc.iter().enumerate() {
                    out[i * qw + h * head_dim + d] = T::from_f64(*a);
                }
            }
        }
        let saved = AttnSaved { q, k, v, spans, offsets, probs, heads, kv_heads, head_dim, scale };
        self.push("attention", out, vec![rows, qw], Op::Attention(Box::new(saved)), &[q, k, v])
    }

    /// Attention probability mass received by every key row of an attention
    /// node, summed over query rows and heads.
    pub fn attention_key_mass(&self, attn: Var) -> Option<Vec<f64>> {
        let Op::Attention(saved) = &self.nodes[attn.0].op else {
            return None;
        };
        let keys = self.rows(saved.k);
        let mut mass = vec![0.0; keys];
        for (i, span) in saved.spans.iter().enumerate() {
            for h in 0..saved.heads {
                let base = saved.offsets[i] + h * span.len();
                for (jj, j) in (span.start..span.end).enumerate() {
                    mass[j] += saved.probs[base + jj].as_f64();
                }
            }
        }
        Some(mass)
    }

    /// Probabilities of query row `row`, head `head` over its visible span.
    pub fn attention_row(&self, attn: Var, row: usize, head: usize) -> Option<(RowSpan, Vec<T>)> {
        let Op::Attention(saved) = &self.nodes[attn.0].op else {
            return None;
        };
        let span = *saved.spans.get(row)?;
        if head >= saved.heads {
            return None;
        }
        let base = saved.offsets[row] + head * span.len();
        Some((span, saved.probs[base..base + span.len()].to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat_rows", "no parts");
        };
        let cols = self.cols(first);
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            if self.cols(p) != cols {
                return shape_err("concat_rows", format!("{:?} vs width {cols}", self.shape(p)));
            }
            rows += self.rows(p);
            out.extend_from_slice(self.value(p));
        }
        self.push("concat_rows", out, vec![rows, cols], Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = (self.rows(x), self.cols(x));
        if start > end || end > rows {
            return shape_err("slice_rows", format!("{start}..{end} of {rows}"));
        }
        let out = self.value(x)[start * cols..end * cols].to_vec();
        self.push("slice_rows", out, vec![end - start, cols], Op::SliceRows { x, start }, &[x])
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = (self.rows(x), self.cols(x));
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(TensorError::OutOfRange { op: "gather_rows", index: i, len: rows });
            }
            out.extend_from_slice(&xv[i * cols..(i + 1) * cols]);
        }
        self.push("gather_rows", out, vec![idx.len(), cols], Op::GatherRows { x, idx: idx.to_vec() }, &[x])
    }

    /// Average each group of `group` consecutive query heads:
    /// `[rows, kv_heads·group·head_dim] -> [rows, kv_heads·head_dim]`.
    pub fn pool_groups(&mut self, x: Var, kv_heads: usize, group: usize, head_dim: usize) -> Result<Var> {
        let (rows, cols) = (self.rows(x), self.cols(x));
        if cols != kv_heads * group * head_dim || group == 0 {
            return shape_err("pool_groups", format!("{:?} vs {kv_heads}x{group}x{head_dim}", self.shape(x)));
        }
        let xv = self.value(x);
        let ow = kv_heads * head_dim;
        let mut out = vec![T::zero(); rows * ow];
        for r in 0..rows {
            for kh in 0..kv_heads {
                for d in 0..head_dim {
                    let mut s = 0.0f64;
                    for j in 0..group {
                        s += xv[r * cols + (kh * group + j) * head_dim + d].as_f64();
                    }
                    out[r * ow + kh * head_dim + d] = T::from_f64(s / group as f64);
                }
            }
        }
        self.push("pool_groups", out, vec![rows, ow], Op::PoolGroups { x, kv_heads, group, head_dim }, &[x])
    }

    // ---- normalisers and losses -------------------------------------------

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = (self.rows(x), self.cols(x));
        let xv = self.value(x);
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            softmax_row_into(&xv[r * cols..(r + 1) * cols], None, &mut out[r * cols..(r + 1) * cols])?;
        }
        self.push("softmax_rows", out, self.shape(x).to_vec(), Op::Softmax(x), &[x])
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = (self.rows(x), self.cols(x));
        let xv = self.value(x);
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let lse = logsumexp(row);
            for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = T::from_f64(v.as_f64() - lse);
            }
        }
        self.push("log_softmax_rows", out, self.shape(x).to_vec(), Op::LogSoftmax(x), &[x])
    }

    /// `[rows, cols] -> [rows, 1]`.
    pub fn logsumexp_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = (self.rows(x), self.cols(x));
        let xv = self.value(x);
        let out = (0..rows).map(|r| T::from_f64(logsumexp(&xv[r * cols..(r + 1) * cols]))).collect();
        self.push("logsumexp_rows", out, vec![rows, 1], Op::LogSumExp(x), &[x])
    }

    /// Pick flat elements of `x` by index into a new tensor of `shape`.
    pub fn gather_elems(&mut self, x: Var, idx: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != idx.len() {
            return shape_err("gather_elems", format!("{} indices for {shape:?}", idx.len()));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len());
        for &i in &idx {
            let Some(v) = xv.get(i) else {
                return Err(TensorError::OutOfRange { op: "gather_elems", index: i, len: xv.len() });
            };
            out.push(*v);
        }
        self.push("gather_elems", out, shape, Op::GatherElems { x, idx }, &[x])
    }

    /// Mean negative log-likelihood of `targets` over rows where `mask` is set.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (rows, cols) = (self.rows(logits), self.cols(logits));
        if targets.len() != rows || mask.len() != rows {
            return shape_err("cross_entropy", format!("{rows} rows, {} targets, {} mask", targets.len(), mask.len()));
        }
        let sel: Vec<usize> = (0..rows).filter(|&r| mask[r]).collect();
        if sel.is_empty() {
            return Err(TensorError::EmptySelection("cross_entropy"));
        }
        let xv = self.value(logits);
        let mut total = 0.0;
        for &r in &sel {
            let t = targets[r];
            if t >= cols {
                return Err(TensorError::OutOfRange { op: "cross_entropy", index: t, len: cols });
            }
            let row = &xv[r * cols..(r + 1) * cols];
            total += logsumexp(row) - row[t].as_f64();
        }
        let loss = total / sel.len() as f64;
        let op = Op::CrossEntropy { x: logits, targets: targets.to_vec(), rows: sel };
        self.push("cross_entropy", vec![T::from_f64(loss)], vec![1], op, &[logits])
    }

    // ---- backward -------------------------------------------------------

    /// Gradient of `loss` with respect to every node that needs one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let ln = &self.nodes[loss.0];
        if ln.value.len() != 1 {
            return Err(TensorError::NotScalar(ln.shape.clone()));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.backward_done = true;
        if !ln.needs_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gout) = self.grads[i].take() else { continue };
            self.backprop_node(i, &gout);
            self.grads[i] = Some(gout);
        }
        Ok(())
    }

    /// Clear gradients so that [`Tape::backward`] may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        self.grad(v).map(|g| Tensor::new(self.shape(v).to_vec(), g.to_vec()).expect("grad has node shape"))
    }

    fn backprop_node(&mut self, i: usize, g: &[T]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, b_layout, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                if let Some(da) = slot(nodes, grads, *a) {
                    match b_layout {
                        Layout::Normal => matmul_into(g, Layout::Normal, bv, Layout::Transposed, da, m, n, k, true),
                        Layout::Transposed => matmul_into(g, Layout::Normal, bv, Layout::Normal, da, m, n, k, true),
                    }
                }
                if let Some(db) = slot(nodes, grads, *b) {
                    match b_layout {
                        Layout::Normal => matmul_into(av, Layout::Transposed, g, Layout::Normal, db, k, m, n, true),
                        Layout::Transposed => matmul_into(g, Layout::Transposed, av, Layout::Normal, db, n, m, k, true),
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = slot(nodes, grads, v) {
                        d.iter_mut().zip(g).for_each(|(x, y)| *x += *y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = slot(nodes, grads, *a) {
                    d.iter_mut().zip(g).for_each(|(x, y)| *x += *y);
                }
                if let Some(d) = slot(nodes, grads, *b) {
                    d.iter_mut().zip(g).for_each(|(x, y)| *x -= *y);
                }
            }
            Op::Mul(a, b) => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                if let Some(d) = slot(nodes, grads, *a) {
                    for ((x, y), w) in d.iter_mut().zip(g).zip(bv.iter()) {
                        *x += *y * *w;
                    }
                }
                if let Some(d) = slot(nodes, grads, *b) {
                    for ((x, y), w) in d.iter_mut().zip(g).zip(av.iter()) {
                        *x += *y * *w;
                    }
                }
            }
            Op::Scale(a, s) => {
                let st = T::from_f64(*s);
                if let Some(d) = slot(nodes, grads, *a) {
                    d.iter_mut().zip(g).for_each(|(x, y)| *x += *y * st);
                }
            }
            Op::Offset(a) => {
                if let Some(d) = slot(nodes, grads, *a) {
                    d.iter_mut().zip(g).for_each(|(x, y)| *x += *y);
                }
            }
            Op::Sum(a) => {
                if let Some(d) = slot(nodes, grads, *a) {
                    d.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::DotConst { x, w } => {
                if let Some(d) = slot(nodes, grads, *x) {
                    d.iter_mut().zip(w).for_each(|(a, b)| *a += g[0] * *b);
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = &nodes[x.0].value;
                let gv = &nodes[gain.0].value;
                let d = gv.len();
                if let Some(dg) = slot(nodes, grads, *gain) {
                    for (r, inv) in inv_rms.iter().enumerate() {
                        for j in 0..d {
                            dg[j] += T::from_f64(g[r * d + j].as_f64() * xv[r * d + j].as_f64() * inv);
                        }
                    }
                }
                if let Some(dx) = slot(nodes, grads, *x) {
                    for (r, inv) in inv_rms.iter().enumerate() {
                        let row = r * d..(r + 1) * d;
                        let s: f64 = g[row.clone()]
                            .iter()
                            .zip(gv.iter())
                            .zip(&xv[row])
                            .map(|((dy, gk), xk)| dy.as_f64() * gk.as_f64() * xk.as_f64())
                            .sum();
                        let c = inv * inv * inv * s / d as f64;
                        for j in 0..d {
                            let val = inv * gv[j].as_f64() * g[r * d + j].as_f64() - xv[r * d + j].as_f64() * c;
                            dx[r * d + j] += T::from_f64(val);
                        }
                    }
                }
            }
            Op::SiluMul(a, b) => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                if let Some(da) = slot(nodes, grads, *a) {
                    for idx in 0..g.len() {
                        let x = av[idx].as_f64();
                        let sig = 1.0 / (1.0 + (-x).exp());
                        let dsilu = sig * (1.0 + x * (1.0 - sig));
                        da[idx] += T::from_f64(g[idx].as_f64() * bv[idx].as_f64() * dsilu);
                    }
                }
                if let Some(db) = slot(nodes, grads, *b) {
                    for idx in 0..g.len() {
                        let x = av[idx].as_f64();
                        db[idx] += T::from_f64(g[idx].as_f64() * x / (1.0 + (-x).exp()));
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = nodes[table.0].cols();
                if let Some(dt) = slot(nodes, grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::Rope { x, positions, heads, head_dim, theta } => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    let mut tmp = g.to_vec();
                    rope_in_place(&mut tmp, positions, *heads, *head_dim, *theta, true);
                    dx.iter_mut().zip(tmp).for_each(|(a, b)| *a += b);
                }
            }
            Op::Attention(s) => backprop_attention(s, nodes, grads, g),
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p.0].value.len();
                    if let Some(d) = slot(nodes, grads, p) {
                        d.iter_mut().zip(&g[off..off + len]).for_each(|(a, b)| *a += *b);
                    }
                    off += len;
                }
            }
            Op::SliceRows { x, start } => {
                let cols = nodes[x.0].cols();
                if let Some(d) = slot(nodes, grads, *x) {
                    d[start * cols..start * cols + g.len()].iter_mut().zip(g).for_each(|(a, b)| *a += *b);
                }
            }
            Op::GatherRows { x, idx } => {
                let cols = nodes[x.0].cols();
                if let Some(d) = slot(nodes, grads, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..cols {
                            d[i * cols + j] += g[r * cols + j];
                        }
                    }
                }
            }
            Op::PoolGroups { x, kv_heads, group, head_dim } => {
                let (kv_heads, group, head_dim) = (*kv_heads, *group, *head_dim);
                let cols = kv_heads * group * head_dim;
                let ow = kv_heads * head_dim;
                let inv = T::from_f64(1.0 / group as f64);
                if let Some(d) = slot(nodes, grads, *x) {
                    let rows = g.len() / ow;
                    for r in 0..rows {
                        for kh in 0..kv_heads {
                            for j in 0..group {
                                for e in 0..head_dim {
                                    d[r * cols + (kh * group + j) * head_dim + e] += g[r * ow + kh * head_dim + e] * inv;
                                }
                            }
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let cols = node.cols();
                if let Some(d) = slot(nodes, grads, *x) {
                    for r in 0..node.rows() {
                        let rg = r * cols..(r + 1) * cols;
                        let dot: f64 = y[rg.clone()].iter().zip(&g[rg.clone()]).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                        for j in rg {
                            d[j] += T::from_f64(y[j].as_f64() * (g[j].as_f64() - dot));
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let y = &node.value;
                let cols = node.cols();
                if let Some(d) = slot(nodes, grads, *x) {
                    for r in 0..node.rows() {
                        let rg = r * cols..(r + 1) * cols;
                        let gs: f64 = g[rg.clone()].iter().map(|v| v.as_f64()).sum();
                        for j in rg {
                            d[j] += T::from_f64(g[j].as_f64() - y[j].as_f64().exp() * gs);
                        }
                    }
                }
            }
            Op::LogSumExp(x) => {
                let xv = &nodes[x.0].value;
                let cols = nodes[x.0].cols();
                if let Some(d) = slot(nodes, grads, *x) {
                    for (r, lse) in node.value.iter().enumerate() {
                        for j in r * cols..(r + 1) * cols {
                            d[j] += T::from_f64(g[r].as_f64() * (xv[j].as_f64() - lse.as_f64()).exp());
                        }
                    }
                }
            }
            Op::GatherElems { x, idx } => {
                if let Some(d) = slot(nodes, grads, *x) {
                    for (o, &i) in idx.iter().enumerate() {
                        d[i] += g[o];
                    }
                }
            }
            Op::CrossEntropy { x, targets, rows } => {
                let xv = &nodes[x.0].value;
                let cols = nodes[x.0].cols();
                let scale = g[0].as_f64() / rows.len() as f64;
                if let Some(d) = slot(nodes, grads, *x) {
                    for &r in rows {
                        let row = &xv[r * cols..(r + 1) * cols];
                        let lse = logsumexp(row);
                        for j in 0..cols {
                            let mut p = (row[j].as_f64() - lse).exp();
                            if j == targets[r] {
                                p -= 1.0;
                            }
                            d[r * cols + j] += T::from_f64(p * scale);
                        }
                    }
                }
            }
        }
    }
}

fn backprop_attention<T: Scalar>(s: &AttnSaved<T>, nodes: &[Node<'_, T>], grads: &mut [Option<Vec<T>>], g: &[T]) {
    let qv = &nodes[s.q.0].value;
    let kvals = &nodes[s.k.0].value;
    let vvals = &nodes[s.v.0].value;
    let (heads, head_dim) = (s.heads, s.head_dim);
    let group = heads / s.kv_heads;
    let qw = heads * head_dim;
    let kw = s.kv_heads * head_dim;
    let need = |v: Var| nodes[v.0].needs_grad;
    let mut dq = need(s.q).then(|| vec![0.0f64; qv.len()]);
    let mut dk = need(s.k).then(|| vec![0.0f64; kvals.len()]);
    let mut dv = need(s.v).then(|| vec![0.0f64; vvals.len()]);
    let mut dp = Vec::new();
    for (i, span) in s.spans.iter().enumerate() {
        for h in 0..heads {
            let kh = h / group;
            let base = s.offsets[i] + h * span.len();
            let probs = &s.probs[base..base + span.len()];
            let go = &g[i * qw + h * head_dim..i * qw + (h + 1) * head_dim];
            dp.clear();
            let mut dot = 0.0;
            for (jj, j) in (span.start..span.end).enumerate() {
                let vrow = &vvals[j * kw + kh * head_dim..j * kw + (kh + 1) * head_dim];
                let d: f64 = go.iter().zip(vrow).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                dot += probs[jj].as_f64() * d;
                dp.push(d);
            }
            let qrow = i * qw + h * head_dim;
            for (jj, j) in (span.start..span.end).enumerate() {
                let p = probs[jj].as_f64();
                let ds = p * (dp[jj] - dot) * s.scale;
                let krow = j * kw + kh * head_dim;
                if let Some(dq) = dq.as_mut() {
                    for e in 0..head_dim {
                        dq[qrow + e] += ds * kvals[krow + e].as_f64();
                    }
                }
                if let Some(dk) = dk.as_mut() {
                    for e in 0..head_dim {
                        dk[krow + e] += ds * qv[qrow + e].as_f64();
                    }
                }
                if let Some(dv) = dv.as_mut() {
                    for e in 0..head_dim {
                        dv[krow + e] += p * go[e].as_f64();
                    }
                }
            }
        }
    }
    for (var, acc) in [(s.q, dq), (s.k, dk), (s.v, dv)] {
        if let Some(acc) = acc {
            let len = nodes[var.0].value.len();
            let slot = grads[var.0].get_or_insert_with(|| vec![T::zero(); len]);
            slot.iter_mut().zip(acc).for_each(|(a, b)| *a += T::from_f64(b));
        }
    }
}

fn slot<'g, T: Scalar>(nodes: &[Node<'_, T>], grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

/// Stable `ln Σ exp(xᵢ)` in `f64`.
pub(crate) fn logsumexp<T: Scalar>(row: &[T]) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln()
}
