//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node in creation order, which is
//! a valid topological order by construction. [`Graph::backward`] walks the
//! tape once in reverse and accumulates gradients into the leaves that were
//! registered with `requires_grad`.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract, Error, Result};
use crate::kernels;
use crate::mask::AttentionMask;
use crate::real::Real;
use crate::tensor::{numel, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One independent attention problem inside a stacked [`Graph::attention`] call.
///
/// Queries are rows `[q_start, q_start + q_len)` of the query matrix and keys
/// are rows `[k_start, k_start + k_len)` of the key/value matrices. Query `i`
/// uses mask row `mask_row_offset + i`; the mask must have `k_len` columns.
#[derive(Debug, Clone)]
pub struct AttnSegment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
    pub mask: Arc<AttentionMask>,
    pub mask_row_offset: usize,
}

impl AttnSegment {
    /// Square self-attention over `len` rows starting at `start`.
    pub fn square(start: usize, mask: Arc<AttentionMask>) -> Self {
        let len = mask.dim();
        AttnSegment {
            q_start: start,
            q_len: len,
            k_start: start,
            k_len: len,
            mask,
            mask_row_offset: 0,
        }
    }
}

#[derive(Debug)]
enum Op<T: Real> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool, m: usize, k: usize, n: usize },
    BatchMatMul { a: Var, b: Var, trans_b: bool, batch: usize, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    RmsNorm { x: Var, gain: Var, cols: usize, inv_rms: Vec<T> },
    Gelu(Var),
    Embedding { table: Var, ids: Vec<usize>, cols: usize },
    GatherRows { x: Var, rows: Vec<usize>, cols: usize },
    ConcatRows(Var, Var),
    Rope { x: Var, cos: Vec<T>, sin: Vec<T>, head_dim: usize },
    MaskedSoftmax { x: Var, dim: usize },
    Attention { q: Var, k: Var, v: Var, segs: Vec<AttnSegment>, heads: usize, scale: T, probs: Vec<Vec<T>> },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<T>, probs: Vec<T> },
    Entropy { logits: Var, rows: Vec<usize>, scale: T, probs: Vec<T> },
    LogSigmoid(Var),
}

#[derive(Debug)]
struct Node<T: Real> {
    value: Vec<T>,
    shape: Vec<usize>,
    op: Op<T>,
    needs_grad: bool,
}

/// Reverse-mode tape. Single owner; not shared across threads while recording.
#[derive(Debug)]
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
    freed: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            freed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        self.nodes.push(Node {
            value,
            shape,
            op,
            needs_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn check_live(&self) -> Result<()> {
        if self.freed {
            Err(Error::GraphFreed)
        } else {
            Ok(())
        }
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Registers a tensor as a leaf. Gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        let rg = t.requires_grad();
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf, rg)
    }

    /// Registers a constant (never differentiated).
    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(shape_err("constant", shape, &[data.len()]));
        }
        Ok(self.push(data, shape.to_vec(), Op::Leaf, false))
    }

    pub fn scalar(&mut self, x: T) -> Var {
        self.push(vec![x], vec![1], Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v), self.value(v).to_vec()).expect("node invariant")
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// Drops all saved values. Any later backward call fails.
    pub fn free(&mut self) {
        self.nodes.clear();
        self.freed = true;
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    /// `a[m x k] . b[k x n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, vec![m, n], Op::MatMul { a, b, trans_b: false, m, k, n }, ng))
    }

    /// `a[m x k] . b[n x k]^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(shape_err("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_nt(self.value(a), self.value(b), &mut out, m, k, n, false);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, vec![m, n], Op::MatMul { a, b, trans_b: true, m, k, n }, ng))
    }

    /// Batched `a[h x m x k] . b[h x k x n]`, or `b[h x n x k]^T` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        self.check_live()?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([h, m, k], [h2, x, y]) if h == h2 => {
                let (kb, n) = if trans_b { (*y, *x) } else { (*x, *y) };
                if kb != *k {
                    return Err(shape_err("bmm", &sa, &sb));
                }
                (*h, *m, *k, n)
            }
            _ => return Err(shape_err("bmm", &sa, &sb)),
        };
        let mut out = vec![T::zero(); batch * m * n];
        let (av, bv) = (self.value(a), self.value(b));
        for h in 0..batch {
            let ab = &av[h * m * k..(h + 1) * m * k];
            let bb = &bv[h * k * n..(h + 1) * k * n];
            let ob = &mut out[h * m * n..(h + 1) * m * n];
            if trans_b {
                kernels::matmul_nt(ab, bb, ob, m, k, n, false);
            } else {
                kernels::matmul(ab, bb, ob, m, k, n);
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, vec![batch, m, n], Op::BatchMatMul { a, b, trans_b, batch, m, k, n }, ng))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        self.same_shape(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, self.shape(a).to_vec(), Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x - y).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, self.shape(a).to_vec(), Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, self.shape(a).to_vec(), Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.check_live()?;
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let ng = self.ng(a);
        Ok(self.push(out, self.shape(a).to_vec(), Op::Scale(a, c), ng))
    }

    /// Sum of all elements, as a `[1]` scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check_live()?;
        let s = self.value(a).iter().fold(T::zero(), |acc, &x| acc + x);
        let ng = self.ng(a);
        Ok(self.push(vec![s], vec![1], Op::Sum(a), ng))
    }

    /// Row-wise RMS normalization of `x[rows x d]` scaled by `gain[d]`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: T) -> Result<Var> {
        self.check_live()?;
        let (rows, cols) = self.dims2(x, "rms_norm")?;
        if self.shape(gain) != [cols] {
            return Err(shape_err("rms_norm", self.shape(x), self.shape(gain)));
        }
        let (xv, gv) = (self.value(x), self.value(gain));
        let mut out = vec![T::zero(); rows * cols];
        let mut inv_rms = Vec::with_capacity(rows);
        let inv_n = T::one() / T::from_usize(cols);
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let ms = kernels::dot(row, row) * inv_n;
            let ir = T::one() / (ms + eps).sqrt();
            inv_rms.push(ir);
            for ((o, &xi), &g) in out[r * cols..(r + 1) * cols].iter_mut().zip(row).zip(gv) {
                *o = xi * ir * g;
            }
        }
        let ng = self.ng(x) || self.ng(gain);
        Ok(self.push(out, vec![rows, cols], Op::RmsNorm { x, gain, cols, inv_rms }, ng))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let out = self.value(x).iter().map(|&v| gelu_fwd(v)).collect();
        let ng = self.ng(x);
        Ok(self.push(out, self.shape(x).to_vec(), Op::Gelu(x), ng))
    }

    /// Gathers rows `ids` of `table[V x d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.check_live()?;
        let (vocab, cols) = self.dims2(table, "embedding")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(contract(alloc::format!("token id {bad} outside vocabulary of {vocab}")));
        }
        if ids.is_empty() {
            return Err(contract("embedding lookup of zero ids"));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(&tv[i * cols..(i + 1) * cols]);
        }
        let ng = self.ng(table);
        Ok(self.push(out, vec![ids.len(), cols], Op::Embedding { table, ids: ids.to_vec(), cols }, ng))
    }

    /// Selects rows of `x[N x d]`. Rows may repeat.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        self.check_live()?;
        let (n, cols) = self.dims2(x, "gather_rows")?;
        if rows.is_empty() {
            return Err(contract("gather of zero rows"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(contract(alloc::format!("row {bad} out of range for {n} rows")));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            out.extend_from_slice(&xv[r * cols..(r + 1) * cols]);
        }
        let ng = self.ng(x);
        Ok(self.push(out, vec![rows.len(), cols], Op::GatherRows { x, rows: rows.to_vec(), cols }, ng))
    }

    /// Stacks `b` below `a`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        let (ra, ca) = self.dims2(a, "concat_rows")?;
        let (rb, cb) = self.dims2(b, "concat_rows")?;
        if ca != cb {
            return Err(shape_err("concat_rows", self.shape(a), self.shape(b)));
        }
        let mut out = self.value(a).to_vec();
        out.extend_from_slice(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, vec![ra + rb, ca], Op::ConcatRows(a, b), ng))
    }

    /// Rotary position encoding on `x[N x d]`, heads laid out in contiguous
    /// column groups of `d / heads`. Row `r` is rotated by `positions[r]`.
    pub fn rope(&mut self, x: Var, positions: &[usize], heads: usize, base: f64) -> Result<Var> {
        self.check_live()?;
        let (rows, cols) = self.dims2(x, "rope")?;
        if positions.len() != rows {
            return Err(shape_err("rope", self.shape(x), &[positions.len()]));
        }
        if heads == 0 || cols % heads != 0 || (cols / heads) % 2 != 0 {
            return Err(contract(alloc::format!("rope needs an even head dim; d={cols}, heads={heads}")));
        }
        let head_dim = cols / heads;
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(rows * half);
        let mut sin = Vec::with_capacity(rows * half);
        for &p in positions {
            for i in 0..half {
                let freq = num_traits::Float::powf(base, -(2.0 * i as f64) / head_dim as f64);
                let angle = p as f64 * freq;
                cos.push(T::lit(num_traits::Float::cos(angle)));
                sin.push(T::lit(num_traits::Float::sin(angle)));
            }
        }
        let xv = self.value(x);
        let mut out = vec![T::zero(); rows * cols];
        rope_apply(xv, &mut out, &cos, &sin, rows, cols, head_dim, false);
        let ng = self.ng(x);
        Ok(self.push(out, vec![rows, cols], Op::Rope { x, cos, sin, head_dim }, ng))
    }

    /// Softmax over the last axis of `scores[.. x L x L]`, restricted to the
    /// entries the mask allows. Disallowed entries come out exactly zero.
    pub fn masked_softmax(&mut self, scores: Var, mask: &AttentionMask) -> Result<Var> {
        self.check_live()?;
        let shape = self.shape(scores).to_vec();
        let dim = mask.dim();
        if shape.len() < 2 || shape[shape.len() - 1] != dim || shape[shape.len() - 2] != dim {
            return Err(shape_err("masked_softmax", &shape, &[dim, dim]));
        }
        if let Some(row) = (0..dim).find(|&i| mask.runs(i).is_empty()) {
            return Err(Error::DegenerateRow { row });
        }
        let sv = self.value(scores);
        let mut out = vec![T::zero(); sv.len()];
        for (mat_in, mat_out) in sv.chunks_exact(dim * dim).zip(out.chunks_exact_mut(dim * dim)) {
            for i in 0..dim {
                kernels::masked_softmax_row(&mat_in[i * dim..(i + 1) * dim], mask.runs(i), &mut mat_out[i * dim..(i + 1) * dim]);
            }
        }
        let ng = self.ng(scores);
        Ok(self.push(out, shape, Op::MaskedSoftmax { x: scores, dim }, ng))
    }

    /// Multi-head scaled dot-product attention with per-segment masks.
    ///
    /// `q[Nq x d]`, `k[Nk x d]`, `v[Nk x d]`; heads are contiguous column
    /// groups. Query rows not covered by any segment produce zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, segs: Vec<AttnSegment>, heads: usize) -> Result<Var> {
        self.check_live()?;
        let (nq, d) = self.dims2(q, "attention")?;
        let (nk, dk) = self.dims2(k, "attention")?;
        if dk != d || self.shape(v) != self.shape(k) {
            return Err(shape_err("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || d % heads != 0 {
            return Err(contract(alloc::format!("d={d} not divisible into {heads} heads")));
        }
        for s in &segs {
            if s.q_start + s.q_len > nq
                || s.k_start + s.k_len > nk
                || s.mask.dim() != s.k_len
                || s.mask_row_offset + s.q_len > s.mask.dim()
            {
                return Err(contract("attention segment out of range"));
            }
            if let Some(i) = (0..s.q_len).find(|&i| s.mask.runs(s.mask_row_offset + i).is_empty()) {
                return Err(Error::DegenerateRow { row: s.mask_row_offset + i });
            }
        }
        let hd = d / heads;
        let scale = T::one() / T::from_usize(hd).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![T::zero(); nq * d];
        let mut probs = Vec::with_capacity(segs.len());
        let mut scores = Vec::new();
        for s in &segs {
            let mut p = vec![T::zero(); heads * s.q_len * s.k_len];
            scores.resize(s.k_len, T::zero());
            for h in 0..heads {
                let c0 = h * hd;
                for i in 0..s.q_len {
                    let qi = &qv[(s.q_start + i) * d + c0..(s.q_start + i) * d + c0 + hd];
                    let runs = s.mask.runs(s.mask_row_offset + i);
                    for &(a, b) in runs {
                        for j in a..b {
                            let kj = &kv[(s.k_start + j) * d + c0..(s.k_start + j) * d + c0 + hd];
                            scores[j] = kernels::dot(qi, kj) * scale;
                        }
                    }
                    let prow = &mut p[(h * s.q_len + i) * s.k_len..(h * s.q_len + i + 1) * s.k_len];
                    kernels::masked_softmax_row(&scores, runs, prow);
                    let orow = &mut out[(s.q_start + i) * d + c0..(s.q_start + i) * d + c0 + hd];
                    for &(a, b) in runs {
                        for j in a..b {
                            let vj = &vv[(s.k_start + j) * d + c0..(s.k_start + j) * d + c0 + hd];
                            kernels::axpy(orow, prow[j], vj);
                        }
                    }
                }
            }
            probs.push(p);
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(out, vec![nq, d], Op::Attention { q, k, v, segs, heads, scale, probs }, ng))
    }

    /// `sum_i w_i * (-log softmax(logits_i)[targets_i])`, a `[1]` scalar.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Result<Var> {
        self.check_live()?;
        let (n, vocab) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != n || weights.len() != n {
            return Err(shape_err("cross_entropy", self.shape(logits), &[targets.len(), weights.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(contract(alloc::format!("target {bad} outside vocabulary of {vocab}")));
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); n * vocab];
        let mut total = T::zero();
        for i in 0..n {
            let row = &lv[i * vocab..(i + 1) * vocab];
            let lse = kernels::softmax_row(row, &mut probs[i * vocab..(i + 1) * vocab]);
            total += weights[i] * (lse - row[targets[i]]);
        }
        let ng = self.ng(logits);
        Ok(self.push(
            vec![total],
            vec![1],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// `scale * sum_{r in rows} H(softmax(logits_r))` in nats.
    pub fn entropy(&mut self, logits: Var, rows: &[usize], scale: T) -> Result<Var> {
        self.check_live()?;
        let (n, vocab) = self.dims2(logits, "entropy")?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(contract(alloc::format!("row {bad} out of range for {n} rows")));
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); rows.len() * vocab];
        let mut total = T::zero();
        for (slot, &r) in rows.iter().enumerate() {
            let row = &lv[r * vocab..(r + 1) * vocab];
            let p = &mut probs[slot * vocab..(slot + 1) * vocab];
            let lse = kernels::softmax_row(row, p);
            total += lse - kernels::dot(p, row);
        }
        let ng = self.ng(logits);
        Ok(self.push(
            vec![total * scale],
            vec![1],
            Op::Entropy {
                logits,
                rows: rows.to_vec(),
                scale,
                probs,
            },
            ng,
        ))
    }

    /// Elementwise `log(sigmoid(x))`, computed without overflow.
    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let out = self.value(x).iter().map(|&v| log_sigmoid(v)).collect();
        let ng = self.ng(x);
        Ok(self.push(out, self.shape(x).to_vec(), Op::LogSigmoid(x), ng))
    }

    /// Reverse pass from a scalar `loss`, accumulating into leaf gradients.
    ///
    /// Calling it again without [`Graph::zero_grads`] adds to the previous result.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check_live()?;
        if loss.0 >= self.nodes.len() {
            return Err(contract("loss node does not belong to this graph"));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(contract(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = adj[id].take() else { continue };
            self.backprop_node(id, &g, &mut adj);
            if matches!(self.nodes[id].op, Op::Leaf) {
                match &mut self.leaf_grads[id] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn backprop_node(&self, id: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let node = &nodes[id];
        // Runs `f` on the adjoint buffer of `v` when it needs a gradient.
        let mut with = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let buf = adj[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, trans_b, m, k, n } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if trans_b {
                    // c = a . b^T, b is [n x k]
                    with(a, &mut |da| kernels::matmul_acc(g, bv, da, m, n, k));
                    with(b, &mut |db| kernels::matmul_tn_acc(g, av, db, m, n, k));
                } else {
                    with(a, &mut |da| kernels::matmul_nt(g, bv, da, m, n, k, true));
                    with(b, &mut |db| kernels::matmul_tn_acc(av, g, db, m, k, n));
                }
            }
            &Op::BatchMatMul { a, b, trans_b, batch, m, k, n } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (sa, sb, sc) = (m * k, k * n, m * n);
                with(a, &mut |da| {
                    for h in 0..batch {
                        let (gb, bb, dab) = (&g[h * sc..(h + 1) * sc], &bv[h * sb..(h + 1) * sb], &mut da[h * sa..(h + 1) * sa]);
                        if trans_b {
                            kernels::matmul_acc(gb, bb, dab, m, n, k);
                        } else {
                            kernels::matmul_nt(gb, bb, dab, m, n, k, true);
                        }
                    }
                });
                with(b, &mut |db| {
                    for h in 0..batch {
                        let (gb, ab, dbb) = (&g[h * sc..(h + 1) * sc], &av[h * sa..(h + 1) * sa], &mut db[h * sb..(h + 1) * sb]);
                        if trans_b {
                            kernels::matmul_tn_acc(gb, ab, dbb, m, n, k);
                        } else {
                            kernels::matmul_tn_acc(ab, gb, dbb, m, k, n);
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                with(a, &mut |da| da.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                with(b, &mut |db| db.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
            }
            &Op::Sub(a, b) => {
                with(a, &mut |da| da.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                with(b, &mut |db| db.iter_mut().zip(g).for_each(|(x, &y)| *x -= y));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                with(a, &mut |da| {
                    for ((x, &gi), &bi) in da.iter_mut().zip(g).zip(bv.iter()) {
                        *x += gi * bi;
                    }
                });
                with(b, &mut |db| {
                    for ((x, &gi), &ai) in db.iter_mut().zip(g).zip(av.iter()) {
                        *x += gi * ai;
                    }
                });
            }
            &Op::Scale(a, c) => with(a, &mut |da| da.iter_mut().zip(g).for_each(|(x, &y)| *x += y * c)),
            &Op::Sum(a) => with(a, &mut |da| da.iter_mut().for_each(|x| *x += g[0])),
            Op::RmsNorm { x, gain, cols, inv_rms } => {
                let (x, gain, cols) = (*x, *gain, *cols);
                let (xv, gv) = (&nodes[x.0].value, &nodes[gain.0].value);
                let rows = inv_rms.len();
                with(gain, &mut |dg| {
                    for r in 0..rows {
                        let ir = inv_rms[r];
                        for c in 0..cols {
                            dg[c] += g[r * cols + c] * xv[r * cols + c] * ir;
                        }
                    }
                });
                with(x, &mut |dx| {
                    let inv_n = T::one() / T::from_usize(cols);
                    for r in 0..rows {
                        let ir = inv_rms[r];
                        let xr = &xv[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        // mean(dxhat * xhat)
                        let mut m = T::zero();
                        for c in 0..cols {
                            m += gr[c] * gv[c] * xr[c] * ir;
                        }
                        m *= inv_n;
                        for c in 0..cols {
                            dx[r * cols + c] += ir * (gr[c] * gv[c] - xr[c] * ir * m);
                        }
                    }
                });
            }
            &Op::Gelu(x) => {
                let xv = &nodes[x.0].value;
                with(x, &mut |dx| {
                    for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(xv.iter()) {
                        *d += gi * gelu_grad(xi);
                    }
                });
            }
            Op::Embedding { table, ids, cols } => {
                let cols = *cols;
                with(*table, &mut |dt| {
                    for (r, &i) in ids.iter().enumerate() {
                        kernels::axpy(&mut dt[i * cols..(i + 1) * cols], T::one(), &g[r * cols..(r + 1) * cols]);
                    }
                });
            }
            Op::GatherRows { x, rows, cols } => {
                let cols = *cols;
                with(*x, &mut |dx| {
                    for (r, &i) in rows.iter().enumerate() {
                        kernels::axpy(&mut dx[i * cols..(i + 1) * cols], T::one(), &g[r * cols..(r + 1) * cols]);
                    }
                });
            }
            &Op::ConcatRows(a, b) => {
                let na = nodes[a.0].value.len();
                with(a, &mut |da| da.iter_mut().zip(&g[..na]).for_each(|(x, &y)| *x += y));
                with(b, &mut |db| db.iter_mut().zip(&g[na..]).for_each(|(x, &y)| *x += y));
            }
            Op::Rope { x, cos, sin, head_dim } => {
                let (rows, cols) = (node.shape[0], node.shape[1]);
                with(*x, &mut |dx| {
                    let mut tmp = vec![T::zero(); rows * cols];
                    rope_apply(g, &mut tmp, cos, sin, rows, cols, *head_dim, true);
                    dx.iter_mut().zip(&tmp).for_each(|(a, &b)| *a += b);
                });
            }
            &Op::MaskedSoftmax { x, dim } => {
                let p = &node.value;
                with(x, &mut |dx| {
                    for (r, (pr, gr)) in p.chunks_exact(dim).zip(g.chunks_exact(dim)).enumerate() {
                        let s = kernels::dot(pr, gr);
                        for c in 0..dim {
                            dx[r * dim + c] += pr[c] * (gr[c] - s);
                        }
                    }
                });
            }
            Op::Attention { q, k, v, segs, heads, scale, probs } => {
                self.attention_backward(*q, *k, *v, segs, *heads, *scale, probs, g, adj);
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let vocab = node_cols(&nodes[logits.0]);
                with(*logits, &mut |dl| {
                    for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        let scale = g[0] * w;
                        let pr = &probs[i * vocab..(i + 1) * vocab];
                        let dr = &mut dl[i * vocab..(i + 1) * vocab];
                        kernels::axpy(dr, scale, pr);
                        dr[t] -= scale;
                    }
                });
            }
            Op::Entropy { logits, rows, scale, probs } => {
                let vocab = node_cols(&nodes[logits.0]);
                let lv = &nodes[logits.0].value;
                with(*logits, &mut |dl| {
                    for (slot, &r) in rows.iter().enumerate() {
                        let p = &probs[slot * vocab..(slot + 1) * vocab];
                        let z = &lv[r * vocab..(r + 1) * vocab];
                        let ez = kernels::dot(p, z);
                        let s = g[0] * *scale;
                        for c in 0..vocab {
                            dl[r * vocab + c] -= s * p[c] * (z[c] - ez);
                        }
                    }
                });
            }
            &Op::LogSigmoid(x) => {
                let xv = &nodes[x.0].value;
                with(x, &mut |dx| {
                    for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(xv.iter()) {
                        // d/dx log sigmoid(x) = sigmoid(-x)
                        *d += gi * sigmoid(-xi);
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        segs: &[AttnSegment],
        heads: usize,
        scale: T,
        probs: &[Vec<T>],
        g: &[T],
        adj: &mut [Option<Vec<T>>],
    ) {
        let nodes = &self.nodes;
        let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
        let d = nodes[q.0].shape[1];
        let hd = d / heads;
        let mut dq = nodes[q.0].needs_grad.then(|| vec![T::zero(); qv.len()]);
        let mut dk = nodes[k.0].needs_grad.then(|| vec![T::zero(); kv.len()]);
        let mut dv = nodes[v.0].needs_grad.then(|| vec![T::zero(); vv.len()]);
        let mut ds = Vec::new();
        for (s, p) in segs.iter().zip(probs) {
            ds.resize(s.k_len, T::zero());
            for h in 0..heads {
                let c0 = h * hd;
                for i in 0..s.q_len {
                    let runs = s.mask.runs(s.mask_row_offset + i);
                    let prow = &p[(h * s.q_len + i) * s.k_len..(h * s.q_len + i + 1) * s.k_len];
                    let qrow = (s.q_start + i) * d + c0;
                    let gi = &g[qrow..qrow + hd];
                    let mut rowdot = T::zero();
                    for &(a, b) in runs {
                        for j in a..b {
                            let vj = &vv[(s.k_start + j) * d + c0..(s.k_start + j) * d + c0 + hd];
                            let dp = kernels::dot(gi, vj);
                            ds[j] = dp;
                            rowdot += prow[j] * dp;
                        }
                    }
                    for &(a, b) in runs {
                        for j in a..b {
                            ds[j] = prow[j] * (ds[j] - rowdot) * scale;
                        }
                    }
                    for &(a, b) in runs {
                        for j in a..b {
                            let krow = (s.k_start + j) * d + c0;
                            if let Some(dq) = dq.as_mut() {
                                kernels::axpy(&mut dq[qrow..qrow + hd], ds[j], &kv[krow..krow + hd]);
                            }
                            if let Some(dk) = dk.as_mut() {
                                kernels::axpy(&mut dk[krow..krow + hd], ds[j], &qv[qrow..qrow + hd]);
                            }
                            if let Some(dv) = dv.as_mut() {
                                kernels::axpy(&mut dv[krow..krow + hd], prow[j], gi);
                            }
                        }
                    }
                }
            }
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(buf) = buf {
                let slot = adj[var.0].get_or_insert_with(|| vec![T::zero(); buf.len()]);
                slot.iter_mut().zip(&buf).for_each(|(a, &b)| *a += b);
            }
        }
    }
}

fn node_cols<T: Real>(n: &Node<T>) -> usize {
    n.shape[n.shape.len() - 1]
}

#[allow(clippy::too_many_arguments)]
fn rope_apply<T: Real>(x: &[T], out: &mut [T], cos: &[T], sin: &[T], rows: usize, cols: usize, head_dim: usize, inverse: bool) {
    let half = head_dim / 2;
    for r in 0..rows {
        for h in 0..cols / head_dim {
            let base = r * cols + h * head_dim;
            for i in 0..half {
                let (c, mut s) = (cos[r * half + i], sin[r * half + i]);
                if inverse {
                    s = -s;
                }
                let (a, b) = (x[base + 2 * i], x[base + 2 * i + 1]);
                out[base + 2 * i] = a * c - b * s;
                out[base + 2 * i + 1] = a * s + b * c;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_fwd<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn log_sigmoid<T: Real>(x: T) -> T {
    // log sigmoid(x) = -softplus(-x) = min(x, 0) - log1p(exp(-|x|))
    x.min(T::zero()) - (-x.abs()).exp().ln_1p()
}
