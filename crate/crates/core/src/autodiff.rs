//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node to a [`Tape`] and returns a [`Var`] handle.
//! Nodes are stored in creation order, so operands always precede their
//! results and a single reverse sweep visits them topologically.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Masking layout for [`Tape::attention`].
///
/// Each sequence is `seq_len` rows of the packed `[batch·seq_len × d]`
/// operands. The first `prefix_len` positions form a prefix that attends to
/// itself bidirectionally; the remaining positions attend causally to each
/// other and, when `text_sees_prefix` is set, to the whole prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionLayout {
    pub batch: usize,
    pub seq_len: usize,
    pub heads: usize,
    pub prefix_len: usize,
    pub text_sees_prefix: bool,
}

impl AttentionLayout {
    pub fn causal(batch: usize, seq_len: usize, heads: usize) -> Self {
        Self {
            batch,
            seq_len,
            heads,
            prefix_len: 0,
            text_sees_prefix: true,
        }
    }

    #[inline]
    pub fn allowed(&self, t: usize, u: usize) -> bool {
        let p = self.prefix_len;
        if t < p {
            u < p
        } else if u < p {
            self.text_sees_prefix
        } else {
            u <= t
        }
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Diag(Var),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Silu(Var),
    SoftmaxRows(Var),
    Sum(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Clears the consumed flag so `backward` may run again on this tape.
    pub fn reset(&mut self) {
        self.consumed = false;
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// `x [m×n] + bias [1×n]`, broadcasting the bias over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if self.value(bias).shape() != [1, n] {
            return Err(Error::dim(format!(
                "row bias {:?} does not fit {:?}",
                self.value(bias).shape(),
                self.value(x).shape()
            )));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += b[j];
            }
        }
        let out = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddRow(x, bias), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshaped(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Square diagonal matrix from a row or column vector.
    pub fn diag(&mut self, v: Var) -> Result<Var> {
        let t = self.value(v);
        let (m, n) = t.dims2()?;
        if m != 1 && n != 1 {
            return Err(Error::dim(format!("diag expects a vector, got {:?}", t.shape())));
        }
        let len = m * n;
        let mut out = Tensor::zeros(&[len, len]);
        for (i, &x) in t.data().iter().enumerate() {
            out.set(i, i, x);
        }
        let rg = self.rg(&[v]);
        Ok(self.push(out, Op::Diag(v), rg))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if start >= end || end > n {
            return Err(Error::Index(format!(
                "column window {start}..{end} out of range for {m}x{n}"
            )));
        }
        let w = end - start;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + end]);
        }
        let out = Tensor::new(vec![m, w], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceCols(x, start, end), rg))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if start >= end || end > m {
            return Err(Error::Index(format!(
                "row window {start}..{end} out of range for {m}x{n}"
            )));
        }
        let out = self.value(x).data()[start * n..end * n].to_vec();
        let out = Tensor::new(vec![end - start, n], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceRows(x, start, end), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat_rows of nothing"))?;
        let n = self.dims2(*first)?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (m, pn) = self.dims2(p)?;
            if pn != n {
                return Err(Error::dim(format!(
                    "concat_rows column mismatch: {n} vs {pn}"
                )));
            }
            rows += m;
            out.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(vec![rows, n], out)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Row gather (embedding lookup); backward scatter-adds.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(table)?;
        if indices.is_empty() {
            return Err(Error::dim("gather_rows with no indices"));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= m {
                return Err(Error::Index(format!("row {i} out of range for {m} rows")));
            }
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let out = Tensor::new(vec![indices.len(), n], out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(out, Op::GatherRows(table, indices.to_vec()), rg))
    }

    /// SiLU, `x·σ(x)`. The MLP activation throughout the crate.
    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        let rg = self.rg(&[x]);
        self.push(out, Op::Silu(x), rg)
    }

    /// Softmax over the last dimension, max-subtracted.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SoftmaxRows(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    /// Per-row normalization to zero mean and unit variance, then `γ ⊙ x̂ + β`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        for p in [gamma, beta] {
            if self.value(p).shape() != [1, n] {
                return Err(Error::dim(format!(
                    "layer norm parameter {:?} does not fit width {n}",
                    self.value(p).shape()
                )));
            }
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Mean cross-entropy over all rows.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t: Vec<Option<usize>> = targets.iter().copied().map(Some).collect();
        self.cross_entropy_masked(logits, &t)
    }

    /// Mean cross-entropy over the rows whose target is `Some`. Rows with
    /// `None` contribute neither loss nor gradient.
    pub fn cross_entropy_masked(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (b, v) = self.dims2(logits)?;
        if targets.len() != b {
            return Err(Error::dim(format!(
                "{} targets for {b} logit rows",
                targets.len()
            )));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= v) {
            return Err(Error::Index(format!(
                "target {bad} outside vocabulary of {v}"
            )));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::arg("cross entropy with every row masked"));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0;
        for (i, row) in probs.chunks_mut(v).enumerate() {
            softmax_in_place(row);
            if let Some(t) = targets[i] {
                total -= row[t].ln();
            }
        }
        let out = Tensor::scalar(total / count as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention, `softmax(QKᵀ/√d_k)V` per
    /// head, over packed `[batch·seq_len × heads·d_k]` operands.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttentionLayout) -> Result<Var> {
        let (rows, d) = self.dims2(q)?;
        for other in [k, v] {
            if self.value(other).shape() != [rows, d] {
                return Err(Error::dim(format!(
                    "attention operands differ: {:?} vs {:?}",
                    self.value(q).shape(),
                    self.value(other).shape()
                )));
            }
        }
        let AttentionLayout {
            batch,
            seq_len: s,
            heads,
            ..
        } = layout;
        if batch * s != rows || heads == 0 || d % heads != 0 {
            return Err(Error::dim(format!(
                "attention layout {layout:?} does not fit {rows}x{d}"
            )));
        }
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![0.0; batch * heads * s * s];
        let mut out = vec![0.0; rows * d];
        let mut scores = vec![0.0; s];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dk;
                for t in 0..s {
                    let qt = &qd[(b * s + t) * d + off..][..dk];
                    let mut max = f64::NEG_INFINITY;
                    for u in 0..s {
                        if layout.allowed(t, u) {
                            let ku = &kd[(b * s + u) * d + off..][..dk];
                            let sc = dot(qt, ku) * scale;
                            scores[u] = sc;
                            max = max.max(sc);
                        }
                    }
                    let p = &mut probs[((b * heads + h) * s + t) * s..][..s];
                    let mut z = 0.0;
                    for u in 0..s {
                        if layout.allowed(t, u) {
                            let e = (scores[u] - max).exp();
                            p[u] = e;
                            z += e;
                        }
                    }
                    let o = &mut out[(b * s + t) * d + off..][..dk];
                    for u in 0..s {
                        if p[u] != 0.0 {
                            p[u] /= z;
                            let vu = &vd[(b * s + u) * d + off..][..dk];
                            for (oj, vj) in o.iter_mut().zip(vu) {
                                *oj += p[u] * vj;
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![rows, d], out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Returns gradients for every node that requires them and is reachable
    /// from `loss`. The tape is then marked consumed until [`Tape::reset`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::State(
                "backward already ran on this tape; reset it first".into(),
            ));
        }
        let root = self.value(loss);
        if !root.is_scalar() {
            return Err(Error::dim(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, t: Tensor| {
            if self.nodes[v.0].requires_grad {
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&t),
                    slot => *slot = Some(t),
                }
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    acc(*a, g.zip(val(*b), |x, y| x * y).unwrap());
                }
                if needs(*b) {
                    acc(*b, g.zip(val(*a), |x, y| x * y).unwrap());
                }
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::AddRow(x, bias) => {
                acc(*x, g.clone());
                if needs(*bias) {
                    let n = g.cols();
                    let mut db = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (d, r) in db.iter_mut().zip(row) {
                            *d += r;
                        }
                    }
                    acc(*bias, Tensor::new(vec![1, n], db).unwrap());
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2().unwrap();
                let n = val(*b).cols();
                if needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, val(*b).data(), true, &mut da, false);
                    acc(*a, Tensor::new(vec![m, k], da).unwrap());
                }
                if needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, val(*a).data(), true, g.data(), false, &mut db, false);
                    acc(*b, Tensor::new(vec![k, n], db).unwrap());
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose().unwrap()),
            Op::Reshape(a) => acc(*a, g.reshaped(val(*a).shape()).unwrap()),
            Op::Diag(v) => {
                let n = g.rows();
                let d: Vec<f64> = (0..n).map(|j| g.get(j, j)).collect();
                acc(*v, Tensor::new(val(*v).shape().to_vec(), d).unwrap());
            }
            Op::SliceCols(x, start, end) => {
                let (m, n) = val(*x).dims2().unwrap();
                let w = end - start;
                let mut dx = Tensor::zeros(&[m, n]);
                for r in 0..m {
                    dx.data_mut()[r * n + start..r * n + end]
                        .copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                }
                acc(*x, dx);
            }
            Op::SliceRows(x, start, end) => {
                let (m, n) = val(*x).dims2().unwrap();
                let mut dx = Tensor::zeros(&[m, n]);
                dx.data_mut()[start * n..end * n].copy_from_slice(g.data());
                acc(*x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).numel();
                    if needs(p) {
                        let piece = g.data()[offset..offset + len].to_vec();
                        acc(p, Tensor::new(val(p).shape().to_vec(), piece).unwrap());
                    }
                    offset += len;
                }
            }
            Op::GatherRows(table, idx) => {
                let (m, n) = val(*table).dims2().unwrap();
                let mut dt = Tensor::zeros(&[m, n]);
                let d = dt.data_mut();
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..n {
                        d[i * n + j] += g.data()[r * n + j];
                    }
                }
                acc(*table, dt);
            }
            Op::Silu(x) => {
                let dx = val(*x)
                    .zip(g, |v, gv| {
                        let s = sigmoid(v);
                        gv * s * (1.0 + v * (1.0 - s))
                    })
                    .unwrap();
                acc(*x, dx);
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let n = y.cols();
                let mut dx = vec![0.0; y.numel()];
                for ((yr, gr), dr) in y
                    .data()
                    .chunks(n)
                    .zip(g.data().chunks(n))
                    .zip(dx.chunks_mut(n))
                {
                    let inner = dot(yr, gr);
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - inner);
                    }
                }
                acc(*x, Tensor::new(y.shape().to_vec(), dx).unwrap());
            }
            Op::Sum(x) => acc(*x, Tensor::filled(val(*x).shape(), g.item())),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (m, n) = val(*x).dims2().unwrap();
                let gm = val(*gamma).data();
                let gd = g.data();
                if needs(*x) {
                    let mut dx = vec![0.0; m * n];
                    let mut dxhat = vec![0.0; n];
                    for i in 0..m {
                        let gr = &gd[i * n..(i + 1) * n];
                        let hr = &xhat[i * n..(i + 1) * n];
                        for j in 0..n {
                            dxhat[j] = gr[j] * gm[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dh = dot(&dxhat, hr) / n as f64;
                        for j in 0..n {
                            dx[i * n + j] = inv_std[i] * (dxhat[j] - mean_d - hr[j] * mean_dh);
                        }
                    }
                    acc(*x, Tensor::new(vec![m, n], dx).unwrap());
                }
                if needs(*gamma) || needs(*beta) {
                    let mut dg = vec![0.0; n];
                    let mut db = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            dg[j] += gd[i * n + j] * xhat[i * n + j];
                            db[j] += gd[i * n + j];
                        }
                    }
                    acc(*gamma, Tensor::new(vec![1, n], dg).unwrap());
                    acc(*beta, Tensor::new(vec![1, n], db).unwrap());
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let shape = val(*logits).shape().to_vec();
                let v = shape[1];
                let coef = g.item() / *count as f64;
                let mut dl = vec![0.0; probs.len()];
                for (i, t) in targets.iter().enumerate() {
                    if let Some(t) = t {
                        let row = &mut dl[i * v..(i + 1) * v];
                        for j in 0..v {
                            row[j] = coef * probs[i * v + j];
                        }
                        row[*t] -= coef;
                    }
                }
                acc(*logits, Tensor::new(shape, dl).unwrap());
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            } => {
                let (dq, dk_, dv) = attention_backward(
                    val(*q).data(),
                    val(*k).data(),
                    val(*v).data(),
                    g.data(),
                    probs,
                    *layout,
                    val(*q).cols(),
                );
                let shape = val(*q).shape().to_vec();
                acc(*q, Tensor::new(shape.clone(), dq).unwrap());
                acc(*k, Tensor::new(shape.clone(), dk_).unwrap());
                acc(*v, Tensor::new(shape, dv).unwrap());
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    qd: &[f64],
    kd: &[f64],
    vd: &[f64],
    gd: &[f64],
    probs: &[f64],
    layout: AttentionLayout,
    d: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let AttentionLayout {
        batch,
        seq_len: s,
        heads,
        ..
    } = layout;
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut dq = vec![0.0; qd.len()];
    let mut dkey = vec![0.0; kd.len()];
    let mut dv = vec![0.0; vd.len()];
    let mut dp = vec![0.0; s];
    for b in 0..batch {
        for h in 0..heads {
            let off = h * dk;
            for t in 0..s {
                let p = &probs[((b * heads + h) * s + t) * s..][..s];
                let gt = &gd[(b * s + t) * d + off..][..dk];
                let mut inner = 0.0;
                for u in 0..s {
                    if layout.allowed(t, u) {
                        let vu = &vd[(b * s + u) * d + off..][..dk];
                        dp[u] = dot(gt, vu);
                        inner += p[u] * dp[u];
                    }
                }
                let qrow = (b * s + t) * d + off;
                for u in 0..s {
                    if !layout.allowed(t, u) {
                        continue;
                    }
                    let urow = (b * s + u) * d + off;
                    let ds = p[u] * (dp[u] - inner) * scale;
                    for j in 0..dk {
                        dq[qrow + j] += ds * kd[urow + j];
                        dkey[urow + j] += ds * qd[qrow + j];
                        dv[urow + j] += p[u] * gt[j];
                    }
                }
            }
        }
    }
    (dq, dkey, dv)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        z += *x;
    }
    for x in row.iter_mut() {
        *x /= z;
    }
}

/// Compares the tape gradient of a scalar function against central finite
/// differences at `x`, returning the largest relative error
/// `|fd − ad| / max(|ad|, 1e-8)` over all coordinates.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::arg(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv)?;
    if !tape.value(out).is_scalar() {
        return Err(Error::dim(format!(
            "finite_diff_check needs a scalar function, got shape {:?}",
            tape.value(out).shape()
        )));
    }
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |point: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(point);
        let o = f(&mut t, v)?;
        Ok(t.value(o).item())
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let ad = analytic.data()[i];
        worst = worst.max((fd - ad).abs() / ad.abs().max(1e-8));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(17)
    }

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut t = Tape::new();
        let i2 = t.constant(Tensor::eye(2));
        let a = t.constant(m(&[&[1., 2.], &[3., 4.]]));
        let c = t.matmul(i2, a).unwrap();
        assert_eq!(t.value(c), t.value(a));

        let r = t.constant(m(&[&[1., 2.]]));
        let col = t.constant(m(&[&[3.], &[4.]]));
        let d = t.matmul(r, col).unwrap();
        assert_eq!(t.value(d).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] x [2, 3]"), "{err}");
    }

    #[test]
    fn matmul_grad_is_ones_times_b_transpose() {
        let mut r = rng();
        let a = Tensor::randn(&[3, 4], 1.0, &mut r);
        let b = Tensor::randn(&[4, 2], 1.0, &mut r);
        let mut t = Tape::new();
        let av = t.param(a.clone());
        let bv = t.constant(b.clone());
        let c = t.matmul(av, bv).unwrap();
        let s = t.sum(c);
        let g = t.backward(s).unwrap();
        let expected = Tensor::ones(&[3, 2]).matmul(&b.transpose().unwrap()).unwrap();
        assert!(g.get(av).unwrap().max_abs_diff(&expected) < 1e-14);

        let err = finite_diff_check(
            |t, x| {
                let bv = t.constant(b.clone());
                let c = t.matmul(x, bv)?;
                Ok(t.sum(c))
            },
            &a,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let x = t.constant(m(&[&[0., 0., 0.], &[1000., 0., 0.], &[1., 2., 3.]]));
        let y = t.softmax_rows(x).unwrap();
        let y = t.value(y);
        for j in 0..3 {
            assert!((y.get(0, j) - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((y.get(1, 0) - 1.0).abs() < 1e-15 && y.get(1, 1) < 1e-300);
        // e^{x_i}/Σe^{x_j}
        let z: f64 = [1f64, 2., 3.].iter().map(|v| v.exp()).sum();
        let expected = [1f64.exp() / z, 2f64.exp() / z, 3f64.exp() / z];
        for (j, e) in expected.iter().enumerate() {
            assert!((y.get(2, j) - e).abs() < 1e-15);
        }
        assert!((y.get(2, 0) - 0.09003057).abs() < 1e-8);
        assert!((y.get(2, 1) - 0.24472847).abs() < 1e-8);
        assert!((y.get(2, 2) - 0.66524096).abs() < 1e-8);
    }

    #[test]
    fn slice_cols_scatter_pattern() {
        let mut r = rng();
        let x = Tensor::randn(&[4, 32], 1.0, &mut r);
        let mut t = Tape::new();
        let xv = t.param(x.clone());
        let s = t.slice_cols(xv, 12, 20).unwrap();
        assert_eq!(t.value(s).shape(), &[4, 8]);
        let full = t.slice_cols(xv, 0, 32).unwrap();
        assert_eq!(t.value(full), &x);
        let small = t.slice_cols(xv, 1, 3).unwrap();
        let l = t.sum(small);
        let g = t.backward(l).unwrap();
        let gx = g.get(xv).unwrap();
        for i in 0..4 {
            for j in 0..32 {
                let want = if (1..3).contains(&j) { 1.0 } else { 0.0 };
                assert_eq!(gx.get(i, j), want);
            }
        }
        assert!(matches!(t.slice_cols(xv, 5, 40), Err(Error::Index(_))));
        assert!(matches!(t.slice_cols(xv, 5, 5), Err(Error::Index(_))));
    }

    #[test]
    fn slice_rows_windows() {
        let mut r = rng();
        let x = Tensor::randn(&[32, 4], 1.0, &mut r);
        let mut t = Tape::new();
        let xv = t.param(x.clone());
        let s = t.slice_rows(xv, 8, 24).unwrap();
        assert_eq!(t.value(s).shape(), &[16, 4]);
        let full = t.slice_rows(xv, 0, 32).unwrap();
        assert_eq!(t.value(full), &x);
        let l = t.sum(s);
        let g = t.backward(l).unwrap();
        let gx = g.get(xv).unwrap();
        for i in 0..32 {
            let want = if (8..24).contains(&i) { 1.0 } else { 0.0 };
            assert!(gx.row(i).iter().all(|&v| v == want));
        }
        assert!(matches!(t.slice_rows(xv, 30, 33), Err(Error::Index(_))));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut t = Tape::new();
        let l = t.constant(m(&[&[10., -10.]]));
        let ce = t.cross_entropy(l, &[0]).unwrap();
        assert!(t.value(ce).item() < 1e-8);

        let u = t.constant(Tensor::filled(&[3, 7], 0.25));
        let ce = t.cross_entropy(u, &[0, 3, 6]).unwrap();
        assert!((t.value(ce).item() - 7f64.ln()).abs() < 1e-14);

        assert!(matches!(t.cross_entropy(u, &[0, 7, 1]), Err(Error::Index(_))));
        assert!(t.cross_entropy_masked(u, &[None, None, None]).is_err());
    }

    #[test]
    fn cross_entropy_matches_scalar_evaluation() {
        let mut r = rng();
        let logits = Tensor::randn(&[4, 7], 2.0, &mut r);
        let targets = [3usize, 0, 6, 3];
        let mut t = Tape::new();
        let l = t.constant(logits.clone());
        let ce = t.cross_entropy(l, &targets).unwrap();
        let mut total = 0.0;
        for (i, &tg) in targets.iter().enumerate() {
            let row = logits.row(i);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            total -= (row[tg].exp() / z).ln();
        }
        assert!((t.value(ce).item() - total / 4.0).abs() < 1e-10);
    }

    #[test]
    fn backward_examples_and_state() {
        let x = m(&[&[1., -2.], &[3., 0.5]]);
        let mut t = Tape::new();
        let xv = t.param(x.clone());
        let s = t.sum(xv);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(xv).unwrap(), &Tensor::ones(&[2, 2]));
        assert!(matches!(t.backward(s), Err(Error::State(_))));
        t.reset();
        assert!(t.backward(s).is_ok());
        assert!(matches!(t.backward(xv), Err(Error::State(_))));
        t.reset();
        assert!(matches!(t.backward(xv), Err(Error::Dimension(_))));

        let mut t = Tape::new();
        let xv = t.param(x.clone());
        let sq = t.mul(xv, xv).unwrap();
        let s = t.sum(sq);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(xv).unwrap(), &x.scale(2.0));
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let mut t = Tape::new();
        let w = t.constant(Tensor::ones(&[2, 2]));
        let x = t.param(Tensor::ones(&[1, 2]));
        let y = t.matmul(x, w).unwrap();
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert!(g.get(w).is_none());
        assert!(g.get(x).is_some());
    }

    #[test]
    fn finite_diff_of_linear_function_is_exact() {
        let mut r = rng();
        let x = Tensor::randn(&[3, 5], 1.0, &mut r);
        let err = finite_diff_check(|t, x| Ok(t.sum(x)), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
        let nonscalar = finite_diff_check(|_, x| Ok(x), &x, 1e-5);
        assert!(matches!(nonscalar, Err(Error::Dimension(_))));
        assert!(finite_diff_check(|t, x| Ok(t.sum(x)), &x, 0.0).is_err());
    }

    #[test]
    fn finite_diff_of_softmax_pick() {
        let mut r = rng();
        let x = Tensor::randn(&[2, 5], 1.0, &mut r);
        let err = finite_diff_check(
            |t, x| {
                let y = t.softmax_rows(x)?;
                let pick = t.slice_cols(y, 2, 3)?;
                let pick = t.slice_rows(pick, 1, 2)?;
                Ok(t.sum(pick))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn attention_single_token_passes_value_through() {
        let mut r = rng();
        let q = Tensor::randn(&[1, 4], 1.0, &mut r);
        let k = Tensor::randn(&[1, 4], 1.0, &mut r);
        let v = Tensor::randn(&[1, 4], 1.0, &mut r);
        let mut t = Tape::new();
        let (qv, kv, vv) = (t.constant(q), t.constant(k), t.constant(v.clone()));
        let o = t.attention(qv, kv, vv, AttentionLayout::causal(1, 1, 2)).unwrap();
        assert!(t.value(o).max_abs_diff(&v) < 1e-15);
    }

    #[test]
    fn attention_prefix_mask() {
        let layout = AttentionLayout {
            batch: 1,
            seq_len: 5,
            heads: 1,
            prefix_len: 2,
            text_sees_prefix: true,
        };
        assert!(layout.allowed(0, 1));
        assert!(!layout.allowed(0, 2));
        assert!(layout.allowed(2, 0));
        assert!(layout.allowed(3, 3));
        assert!(!layout.allowed(3, 4));
        let blind = AttentionLayout {
            text_sees_prefix: false,
            ..layout
        };
        assert!(!blind.allowed(2, 0));
        assert!(blind.allowed(2, 2));
    }
}
