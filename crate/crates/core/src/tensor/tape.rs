use std::sync::Arc;

use super::kernels::{axpy, dot, matmul_acc, matmul_nt_acc, matmul_tn_acc};
use super::Tensor;
use crate::error::{CcfError, Result};

/// Layer-normalization variance epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Lower clamp applied to `log` arguments.
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Scalar,
    Row,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize, Bcast),
    Mul(usize, usize, Bcast),
    Affine(usize, f64),
    Gather(usize, Vec<usize>),
    Softmax(usize),
    CausalSoftmax(usize),
    Sigmoid(usize),
    Relu(usize),
    Tanh(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    ConcatRows(Vec<usize>),
    SliceRows(usize, usize),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
    Sum(usize),
    Mean(usize),
    SumLast(usize),
    Log(usize),
    EdgeAggregate(usize, Arc<[Edge]>),
}

/// Weighted directed edge used by [`Tape::edge_aggregate`]: row `dst` of the
/// output receives `weight * x[src]`.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Edge {
    pub dst: usize,
    pub src: usize,
    pub weight: f64,
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    /// Registers a leaf without copying its storage.
    pub fn leaf_shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, parents: &[usize]) -> Result<Var> {
        if !value.is_finite() {
            return Err(CcfError::NonFinite { op: op_name });
        }
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    fn require_matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let t = self.val(v.0);
        match t.shape() {
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            s => Err(CcfError::invalid(op, format!("expected rank 1 or 2, got {s:?}"))),
        }
    }

    // ---- linear algebra -------------------------------------------------

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.require_matrix("matmul", a)?;
        let (k2, n) = self.require_matrix("matmul", b)?;
        if k != k2 {
            return Err(CcfError::shape("matmul", self.val(a.0).shape(), self.val(b.0).shape()));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(&mut out, self.val(a.0).data(), self.val(b.0).data(), m, k, n);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a.0, b.0), &[a.0, b.0])
    }

    /// `a[m×k] · b[n×k]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.require_matrix("matmul_nt", a)?;
        let (n, k2) = self.require_matrix("matmul_nt", b)?;
        if k != k2 {
            return Err(CcfError::shape("matmul_nt", self.val(a.0).shape(), self.val(b.0).shape()));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(&mut out, self.val(a.0).data(), self.val(b.0).data(), m, k, n);
        self.push("matmul_nt", Tensor::from_parts(vec![m, n], out), Op::MatMulNt(a.0, b.0), &[a.0, b.0])
    }

    // ---- elementwise ----------------------------------------------------

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize, Bcast)> {
        let (sa, sb) = (self.val(a.0).shape(), self.val(b.0).shape());
        let classify = |big: &Tensor, small: &Tensor| -> Option<Bcast> {
            if big.shape() == small.shape() {
                Some(Bcast::Same)
            } else if small.len() == 1 {
                Some(Bcast::Scalar)
            } else if big.rank() == 2
                && small.len() == big.cols()
                && (small.rank() == 1 || small.shape() == [1, big.cols()])
            {
                Some(Bcast::Row)
            } else {
                None
            }
        };
        if let Some(kind) = classify(self.val(a.0), self.val(b.0)) {
            return Ok((a.0, b.0, kind));
        }
        if let Some(kind) = classify(self.val(b.0), self.val(a.0)) {
            return Ok((b.0, a.0, kind));
        }
        Err(CcfError::shape(op, sa, sb))
    }

    fn zip_broadcast(&self, big: usize, small: usize, kind: Bcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let bt = self.val(big);
        let st = self.val(small).data();
        let data: Vec<f64> = match kind {
            Bcast::Same => bt.data().iter().zip(st).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Scalar => bt.data().iter().map(|&x| f(x, st[0])).collect(),
            Bcast::Row => {
                let c = bt.cols();
                bt.data().iter().enumerate().map(|(i, &x)| f(x, st[i % c])).collect()
            }
        };
        Tensor::from_parts(bt.shape().to_vec(), data)
    }

    /// Elementwise sum. One operand may be a scalar or a row broadcast over
    /// the rows of the other.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (big, small, kind) = self.broadcast("add", a, b)?;
        let out = self.zip_broadcast(big, small, kind, |x, y| x + y);
        self.push("add", out, Op::Add(big, small, kind), &[big, small])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    /// Elementwise product, same broadcasting rules as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (big, small, kind) = self.broadcast("mul", a, b)?;
        let out = self.zip_broadcast(big, small, kind, |x, y| x * y);
        self.push("mul", out, Op::Mul(big, small, kind), &[big, small])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.affine(a, factor, 0.0)
    }

    /// `factor * a + shift`
    pub fn affine(&mut self, a: Var, factor: f64, shift: f64) -> Result<Var> {
        let t = self.val(a.0);
        let out = Tensor::from_parts(
            t.shape().to_vec(),
            t.data().iter().map(|&x| factor * x + shift).collect(),
        );
        self.push("scale", out, Op::Affine(a.0, factor), &[a.0])
    }

    fn map(&mut self, name: &'static str, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.val(a.0);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect());
        self.push(name, out, op, &[a.0])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map("sigmoid", a, Op::Sigmoid(a.0), sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map("relu", a, Op::Relu(a.0), |x| x.max(0.0))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map("tanh", a, Op::Tanh(a.0), f64::tanh)
    }

    /// Natural log with the argument clamped to at least [`LOG_FLOOR`].
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.map("log", a, Op::Log(a.0), |x| x.max(LOG_FLOOR).ln())
    }

    // ---- indexing & structure --------------------------------------------

    /// Gathers rows of a `[n×c]` table (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (n, c) = self.require_matrix("gather", table)?;
        if ids.is_empty() {
            return Err(CcfError::invalid("gather", "empty index list"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(CcfError::invalid("gather", format!("row {bad} out of range for {n} rows")));
        }
        let src = self.val(table.0).data();
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        self.push(
            "gather",
            Tensor::from_parts(vec![ids.len(), c], out),
            Op::Gather(table.0, ids.to_vec()),
            &[table.0],
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| CcfError::invalid("concat", "no inputs"))?;
        let c = self.require_matrix("concat", first)?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, pc) = self.require_matrix("concat", p)?;
            if pc != c {
                return Err(CcfError::shape("concat", self.val(first.0).shape(), self.val(p.0).shape()));
            }
            rows += r;
            out.extend_from_slice(self.val(p.0).data());
        }
        let ids: Vec<usize> = parts.iter().map(|v| v.0).collect();
        self.push("concat", Tensor::from_parts(vec![rows, c], out), Op::ConcatRows(ids.clone()), &ids)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.require_matrix("slice", a)?;
        if len == 0 || start + len > r {
            return Err(CcfError::invalid("slice", format!("rows {start}..{} of {r}", start + len)));
        }
        let data = self.val(a.0).data()[start * c..(start + len) * c].to_vec();
        self.push("slice", Tensor::from_parts(vec![len, c], data), Op::SliceRows(a.0, start), &[a.0])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| CcfError::invalid("concat", "no inputs"))?;
        let r = self.require_matrix("concat", first)?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.require_matrix("concat", p)?;
            if pr != r {
                return Err(CcfError::shape("concat", self.val(first.0).shape(), self.val(p.0).shape()));
            }
            widths.push(pc);
        }
        let c: usize = widths.iter().sum();
        let mut out = vec![0.0; r * c];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.val(p.0).data();
            for i in 0..r {
                out[i * c + off..i * c + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let ids: Vec<usize> = parts.iter().map(|v| v.0).collect();
        self.push("concat", Tensor::from_parts(vec![r, c], out), Op::ConcatCols(ids.clone()), &ids)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.require_matrix("slice", a)?;
        if len == 0 || start + len > c {
            return Err(CcfError::invalid("slice", format!("cols {start}..{} of {c}", start + len)));
        }
        let src = self.val(a.0).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        self.push("slice", Tensor::from_parts(vec![r, len], out), Op::SliceCols(a.0, start), &[a.0])
    }

    // ---- reductions & normalization ---------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.val(a.0).data().iter().sum();
        self.push("reduce_sum", Tensor::scalar(s), Op::Sum(a.0), &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a.0);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push("reduce_mean", Tensor::scalar(s), Op::Mean(a.0), &[a.0])
    }

    /// Sums along the last axis: `[r×c] → [r×1]`.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.require_matrix("reduce_sum", a)?;
        let src = self.val(a.0).data();
        let out = (0..r).map(|i| src[i * c..(i + 1) * c].iter().sum()).collect();
        self.push("reduce_sum", Tensor::from_parts(vec![r, 1], out), Op::SumLast(a.0), &[a.0])
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.require_matrix("softmax", a)?;
        let mut out = self.val(a.0).data().to_vec();
        for i in 0..r {
            softmax_in_place(&mut out[i * c..(i + 1) * c]);
        }
        let shape = self.val(a.0).shape().to_vec();
        self.push("softmax", Tensor::from_parts(shape, out), Op::Softmax(a.0), &[a.0])
    }

    /// Softmax of a square score matrix where row `i` only sees columns `≤ i`.
    /// Masked entries are exactly zero.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.require_matrix("causal_softmax", a)?;
        if r > c {
            return Err(CcfError::invalid("causal_softmax", format!("{r} rows but {c} columns")));
        }
        // rows are aligned to the last `r` key positions, so a partial query
        // block (e.g. only the final position) keeps the right mask
        let offset = c - r;
        let mut out = self.val(a.0).data().to_vec();
        for i in 0..r {
            let row = &mut out[i * c..(i + 1) * c];
            let visible = offset + i + 1;
            softmax_in_place(&mut row[..visible]);
            row[visible..].iter_mut().for_each(|v| *v = 0.0);
        }
        self.push("causal_softmax", Tensor::from_parts(vec![r, c], out), Op::CausalSoftmax(a.0), &[a.0])
    }

    /// Normalizes each row over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.require_matrix("layer_norm", x)?;
        if self.val(gamma.0).len() != c || self.val(beta.0).len() != c {
            return Err(CcfError::shape("layer_norm", self.val(x.0).shape(), self.val(gamma.0).shape()));
        }
        let src = self.val(x.0).data();
        let g = self.val(gamma.0).data();
        let b = self.val(beta.0).data();
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = s;
            for j in 0..c {
                let h = (row[j] - mu) * s;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let shape = self.val(x.0).shape().to_vec();
        self.push(
            "layer_norm",
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd,
            },
            &[x.0, gamma.0, beta.0],
        )
    }

    /// Sparse aggregation `out[dst] += weight * x[src]`, producing `out_rows`
    /// rows. Rows with no incoming edge are zero.
    pub fn edge_aggregate(&mut self, x: Var, edges: Arc<[Edge]>, out_rows: usize) -> Result<Var> {
        let (r, c) = self.require_matrix("edge_aggregate", x)?;
        let src = self.val(x.0).data();
        let mut out = vec![0.0; out_rows * c];
        for e in edges.iter() {
            if e.src >= r || e.dst >= out_rows {
                return Err(CcfError::invalid("edge_aggregate", format!("edge {e:?} out of range")));
            }
            axpy(&mut out[e.dst * c..(e.dst + 1) * c], e.weight, &src[e.src * c..(e.src + 1) * c]);
        }
        self.push(
            "edge_aggregate",
            Tensor::from_parts(vec![out_rows, c], out),
            Op::EdgeAggregate(x.0, edges),
            &[x.0],
        )
    }

    // ---- reverse pass ----------------------------------------------------

    /// Reverse-mode sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.val(loss.0).len() != 1 {
            return Err(CcfError::invalid(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.val(loss.0).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.val(loss.0).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &gout, &mut grads);
            }
            grads[i] = Some(gout);
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(CcfError::NonFinite { op: "backward" });
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn propagate(&self, node: &Node, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        let g = gout.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.val(*a).dims2();
                let n = self.val(*b).cols();
                if self.wants(*a) {
                    let acc = grad_buf(grads, *a, self.val(*a));
                    matmul_nt_acc(acc, g, self.val(*b).data(), m, n, k);
                }
                if self.wants(*b) {
                    let acc = grad_buf(grads, *b, self.val(*b));
                    matmul_tn_acc(acc, self.val(*a).data(), g, m, k, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.val(*a).dims2();
                let n = self.val(*b).rows();
                if self.wants(*a) {
                    let acc = grad_buf(grads, *a, self.val(*a));
                    matmul_acc(acc, g, self.val(*b).data(), m, n, k);
                }
                if self.wants(*b) {
                    let acc = grad_buf(grads, *b, self.val(*b));
                    matmul_tn_acc(acc, g, self.val(*a).data(), m, n, k);
                }
            }
            Op::Add(big, small, kind) => {
                if self.wants(*big) {
                    let acc = grad_buf(grads, *big, self.val(*big));
                    axpy(acc, 1.0, g);
                }
                if self.wants(*small) {
                    let cols = self.val(*big).cols();
                    let acc = grad_buf(grads, *small, self.val(*small));
                    reduce_broadcast(acc, g, *kind, cols, |_| 1.0);
                }
            }
            Op::Mul(big, small, kind) => {
                let bv = self.val(*big).data();
                let sv = self.val(*small).data();
                let cols = self.val(*big).cols();
                if self.wants(*big) {
                    let acc = grad_buf(grads, *big, self.val(*big));
                    for (idx, (a, gi)) in acc.iter_mut().zip(g).enumerate() {
                        let s = match kind {
                            Bcast::Same => sv[idx],
                            Bcast::Scalar => sv[0],
                            Bcast::Row => sv[idx % cols],
                        };
                        *a += gi * s;
                    }
                }
                if self.wants(*small) {
                    let acc = grad_buf(grads, *small, self.val(*small));
                    reduce_broadcast(acc, g, *kind, cols, |idx| bv[idx]);
                }
            }
            Op::Affine(a, factor) => {
                if self.wants(*a) {
                    axpy(grad_buf(grads, *a, self.val(*a)), *factor, g);
                }
            }
            Op::Sigmoid(a) => {
                let acc = grad_buf(grads, *a, self.val(*a));
                for ((acc, &gi), &yi) in acc.iter_mut().zip(g).zip(y.data()) {
                    *acc += gi * yi * (1.0 - yi);
                }
            }
            Op::Relu(a) => {
                let x = self.val(*a).data();
                let acc = grad_buf(grads, *a, self.val(*a));
                for ((acc, &gi), &xi) in acc.iter_mut().zip(g).zip(x) {
                    if xi > 0.0 {
                        *acc += gi;
                    }
                }
            }
            Op::Tanh(a) => {
                let acc = grad_buf(grads, *a, self.val(*a));
                for ((acc, &gi), &yi) in acc.iter_mut().zip(g).zip(y.data()) {
                    *acc += gi * (1.0 - yi * yi);
                }
            }
            Op::Log(a) => {
                let x = self.val(*a).data();
                let acc = grad_buf(grads, *a, self.val(*a));
                for ((acc, &gi), &xi) in acc.iter_mut().zip(g).zip(x) {
                    if xi > LOG_FLOOR {
                        *acc += gi / xi;
                    }
                }
            }
            Op::Gather(table, ids) => {
                let c = self.val(*table).cols();
                let acc = grad_buf(grads, *table, self.val(*table));
                for (r, &id) in ids.iter().enumerate() {
                    axpy(&mut acc[id * c..(id + 1) * c], 1.0, &g[r * c..(r + 1) * c]);
                }
            }
            Op::Softmax(a) | Op::CausalSoftmax(a) => {
                let c = y.cols();
                let acc = grad_buf(grads, *a, self.val(*a));
                for (r, yrow) in y.data().chunks(c).enumerate() {
                    let grow = &g[r * c..(r + 1) * c];
                    let s = dot(grow, yrow);
                    let arow = &mut acc[r * c..(r + 1) * c];
                    for j in 0..c {
                        arow[j] += yrow[j] * (grow[j] - s);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = self.val(*x).cols();
                let gam = self.val(*gamma).data();
                if self.wants(*gamma) {
                    let acc = grad_buf(grads, *gamma, self.val(*gamma));
                    for (i, &gi) in g.iter().enumerate() {
                        acc[i % c] += gi * xhat[i];
                    }
                }
                if self.wants(*beta) {
                    let acc = grad_buf(grads, *beta, self.val(*beta));
                    for (i, &gi) in g.iter().enumerate() {
                        acc[i % c] += gi;
                    }
                }
                if self.wants(*x) {
                    let acc = grad_buf(grads, *x, self.val(*x));
                    let mut dxhat = vec![0.0; c];
                    for (r, &s) in rstd.iter().enumerate() {
                        let grow = &g[r * c..(r + 1) * c];
                        let hrow = &xhat[r * c..(r + 1) * c];
                        for j in 0..c {
                            dxhat[j] = grow[j] * gam[j];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / c as f64;
                        let m2 = dot(&dxhat, hrow) / c as f64;
                        let arow = &mut acc[r * c..(r + 1) * c];
                        for j in 0..c {
                            arow[j] += s * (dxhat[j] - m1 - hrow[j] * m2);
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.val(p).len();
                    if self.wants(p) {
                        axpy(grad_buf(grads, p, self.val(p)), 1.0, &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::SliceRows(a, start) => {
                let c = self.val(*a).cols();
                let acc = grad_buf(grads, *a, self.val(*a));
                axpy(&mut acc[start * c..start * c + g.len()], 1.0, g);
            }
            Op::ConcatCols(parts) => {
                let (r, c) = y.dims2();
                let mut off = 0;
                for &p in parts {
                    let w = self.val(p).cols();
                    if self.wants(p) {
                        let acc = grad_buf(grads, p, self.val(p));
                        for i in 0..r {
                            axpy(&mut acc[i * w..(i + 1) * w], 1.0, &g[i * c + off..i * c + off + w]);
                        }
                    }
                    off += w;
                }
            }
            Op::SliceCols(a, start) => {
                let c = self.val(*a).cols();
                let (r, w) = y.dims2();
                let acc = grad_buf(grads, *a, self.val(*a));
                for i in 0..r {
                    axpy(&mut acc[i * c + start..i * c + start + w], 1.0, &g[i * w..(i + 1) * w]);
                }
            }
            Op::Sum(a) => {
                let acc = grad_buf(grads, *a, self.val(*a));
                acc.iter_mut().for_each(|v| *v += g[0]);
            }
            Op::Mean(a) => {
                let n = self.val(*a).len() as f64;
                let acc = grad_buf(grads, *a, self.val(*a));
                acc.iter_mut().for_each(|v| *v += g[0] / n);
            }
            Op::SumLast(a) => {
                let c = self.val(*a).cols();
                let acc = grad_buf(grads, *a, self.val(*a));
                for (i, v) in acc.iter_mut().enumerate() {
                    *v += g[i / c];
                }
            }
            Op::EdgeAggregate(x, edges) => {
                let c = self.val(*x).cols();
                let acc = grad_buf(grads, *x, self.val(*x));
                for e in edges.iter() {
                    axpy(&mut acc[e.src * c..(e.src + 1) * c], e.weight, &g[e.dst * c..(e.dst + 1) * c]);
                }
            }
        }
    }
}

fn grad_buf<'a>(grads: &'a mut [Option<Tensor>], i: usize, like: &Tensor) -> &'a mut [f64] {
    grads[i].get_or_insert_with(|| Tensor::zeros(like.shape())).data_mut()
}

fn reduce_broadcast(acc: &mut [f64], g: &[f64], kind: Bcast, cols: usize, other: impl Fn(usize) -> f64) {
    match kind {
        Bcast::Same => {
            for (idx, (a, gi)) in acc.iter_mut().zip(g).enumerate() {
                *a += gi * other(idx);
            }
        }
        Bcast::Scalar => {
            acc[0] += g.iter().enumerate().map(|(idx, gi)| gi * other(idx)).sum::<f64>();
        }
        Bcast::Row => {
            for (idx, gi) in g.iter().enumerate() {
                acc[idx % cols] += gi * other(idx);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}
