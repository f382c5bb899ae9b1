//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so the tape index order is already
//! a topological order and `backward` is a single reverse sweep. Leaves marked
//! frozen never receive a gradient, and nothing downstream of only-frozen
//! inputs is differentiated at all.

use std::borrow::Cow;

use crate::error::{dim_err, MrtError, Result};
use crate::tensor::{dot, gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Handle to a node on a [`Tape`].
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
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GatherRows {
        src: Var,
        idx: Vec<usize>,
    },
    ReplaceRows {
        base: Var,
        src: Var,
        idx: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Sum(Var),
    Orthonormalize {
        raw: Var,
        r: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        positions: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Borrowed leaves let frozen weights participate without copies.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
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

fn shape2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn leaf_ref(&mut self, value: &'a Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, k), (n, k2)) = (shape2(ta), shape2(tb));
        if k != k2 {
            return dim_err(format!("matmul_nt {:?} x {:?}ᵀ", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(ta.data(), tb.data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNT(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return dim_err(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds the vector `bias` to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let c = tx.cols();
        if tb.len() != c {
            return dim_err(format!("add_bias {:?} + {:?}", tx.shape(), tb.shape()));
        }
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    /// Adds a constant tensor (e.g. an attention mask). No gradient flows to the constant.
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape() != c.shape() {
            return dim_err(format!("add_const {:?} + {:?}", tx.shape(), c.shape()));
        }
        let data = tx.data().iter().zip(c.data()).map(|(a, b)| a + b).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::AddConst(x), rg))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let c = tx.cols();
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.rg(x);
        self.push(out, Op::SoftmaxRows(x), rg)
    }

    /// Row-wise layer normalization followed by the affine `gain`/`bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = shape2(tx);
        if c < 2 || self.value(gain).len() != c || self.value(bias).len() != c {
            return dim_err(format!(
                "layernorm over {:?} with gain {:?}, bias {:?}",
                tx.shape(),
                self.value(gain).shape(),
                self.value(bias).shape()
            ));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = tx.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Selects rows of a 2-D tensor (also serves as an embedding lookup).
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let ts = self.value(src);
        let (r, c) = shape2(ts);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return dim_err(format!("row {i} out of range for {:?}", ts.shape()));
            }
            out.extend_from_slice(ts.row(i));
        }
        let out = Tensor::new(vec![idx.len(), c], out)?;
        let rg = self.rg(src);
        Ok(self.push(
            out,
            Op::GatherRows {
                src,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Copy of `base` with rows `idx` overwritten by the rows of `src`.
    pub fn replace_rows(&mut self, base: Var, src: Var, idx: &[usize]) -> Result<Var> {
        let (tb, ts) = (self.value(base), self.value(src));
        let (r, c) = shape2(tb);
        if ts.rows() != idx.len() || ts.cols() != c {
            return dim_err(format!(
                "replace_rows {:?} into {:?} at {} rows",
                ts.shape(),
                tb.shape(),
                idx.len()
            ));
        }
        let mut out = tb.clone();
        for (k, &i) in idx.iter().enumerate() {
            if i >= r {
                return dim_err(format!("row {i} out of range for {:?}", tb.shape()));
            }
            out.data_mut()[i * c..(i + 1) * c].copy_from_slice(ts.row(k));
        }
        let rg = self.rg(base) || self.rg(src);
        Ok(self.push(
            out,
            Op::ReplaceRows {
                base,
                src,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = shape2(tx);
        if start >= end || end > c {
            return dim_err(format!("slice_cols {start}..{end} of {:?}", tx.shape()));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&tx.row(i)[start..end]);
        }
        let out = Tensor::new(vec![r, w], out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != r) {
            return dim_err("concat_cols: row counts differ");
        }
        let c: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![r, c], out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).cols();
        if parts.iter().any(|&p| self.value(p).cols() != c) {
            return dim_err("concat_rows: column counts differ");
        }
        let r: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut out = Vec::with_capacity(r * c);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(vec![r, c], out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Gram–Schmidt orthonormalization of the rows of `raw` (k×d, k ≤ d).
    ///
    /// Equivalent to the thin QR of `rawᵀ` with a positive diagonal; the
    /// backward pass uses the closed-form QR adjoint.
    pub fn orthonormalize(&mut self, raw: Var) -> Result<Var> {
        let (u, r) = gram_schmidt(self.value(raw))?;
        let rg = self.rg(raw);
        Ok(self.push(u, Op::Orthonormalize { raw, r }, rg))
    }

    /// Mean negative log-likelihood of `targets` at the given logit rows.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        positions: &[usize],
        targets: &[usize],
    ) -> Result<Var> {
        if positions.is_empty() {
            return Err(MrtError::Numeric(
                "cross_entropy: no supervised positions".into(),
            ));
        }
        if positions.len() != targets.len() {
            return dim_err("cross_entropy: positions and targets differ in length");
        }
        let tl = self.value(logits);
        let (r, v) = shape2(tl);
        let mut probs = Vec::with_capacity(positions.len() * v);
        let mut nll = 0.0;
        for (&p, &t) in positions.iter().zip(targets) {
            if p >= r || t >= v {
                return dim_err(format!(
                    "cross_entropy: position {p} / target {t} outside {:?}",
                    tl.shape()
                ));
            }
            let mut row = tl.row(p).to_vec();
            softmax_in_place(&mut row);
            // log p_t computed from the stabilized logits to avoid log(0)
            let max = tl.row(p).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + tl.row(p).iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            nll += lse - tl.row(p)[t];
            probs.extend_from_slice(&row);
        }
        let value = Tensor::scalar(nll / positions.len() as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                positions: positions.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return dim_err(format!(
                "backward from non-scalar root of shape {:?}",
                self.value(root).shape()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(root) {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::filled(self.value(root).shape(), 1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            // intermediate gradients are not kept
        }
        // Drop anything that is not a trainable leaf.
        for (i, node) in self.nodes.iter().enumerate() {
            if !(matches!(node.op, Op::Leaf) && node.requires_grad) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut Tensor)) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        let g = slot.get_or_insert_with(|| Tensor::zeros(self.value(v).shape()));
        f(g);
    }

    fn propagate(&self, node: &Node<'a>, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = shape2(ta);
                let n = tb.cols();
                self.accumulate(grads, *a, |ga| {
                    gemm_nt(g.data(), tb.data(), ga.data_mut(), m, n, k)
                });
                self.accumulate(grads, *b, |gb| {
                    gemm_tn(ta.data(), g.data(), gb.data_mut(), m, k, n)
                });
            }
            Op::MatMulNT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = shape2(ta);
                let n = tb.rows();
                // C = A Bᵀ: dA = dC B, dB = dCᵀ A
                self.accumulate(grads, *a, |ga| {
                    gemm_nn(g.data(), tb.data(), ga.data_mut(), m, n, k)
                });
                self.accumulate(grads, *b, |gb| {
                    gemm_tn(g.data(), ta.data(), gb.data_mut(), m, n, k)
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| ga.add_scaled(g, 1.0));
                self.accumulate(grads, *b, |gb| gb.add_scaled(g, 1.0));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |ga| ga.add_scaled(g, 1.0));
                self.accumulate(grads, *b, |gb| gb.add_scaled(g, -1.0));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, |ga| {
                    for ((o, &gv), &bv) in ga.data_mut().iter_mut().zip(g.data()).zip(tb.data()) {
                        *o += gv * bv;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ((o, &gv), &av) in gb.data_mut().iter_mut().zip(g.data()).zip(ta.data()) {
                        *o += gv * av;
                    }
                });
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, |gx| gx.add_scaled(g, 1.0));
                let c = g.cols();
                self.accumulate(grads, *bias, |gb| {
                    for row in g.data().chunks(c) {
                        for (o, &v) in gb.data_mut().iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                });
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, |gx| gx.add_scaled(g, *s)),
            Op::AddConst(x) => self.accumulate(grads, *x, |gx| gx.add_scaled(g, 1.0)),
            Op::Gelu(x) => {
                let tx = self.value(*x);
                self.accumulate(grads, *x, |gx| {
                    for ((o, &gv), &xv) in gx.data_mut().iter_mut().zip(g.data()).zip(tx.data()) {
                        *o += gv * gelu_grad(xv);
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let c = out.cols();
                self.accumulate(grads, *x, |gx| {
                    for ((o, y), gr) in gx
                        .data_mut()
                        .chunks_mut(c)
                        .zip(out.data().chunks(c))
                        .zip(g.data().chunks(c))
                    {
                        let s = dot(y, gr);
                        for j in 0..c {
                            o[j] += y[j] * (gr[j] - s);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = out.cols();
                let gn = self.value(*gain).data();
                self.accumulate(grads, *x, |gx| {
                    let mut dxhat = vec![0.0; c];
                    for (i, &inv) in inv_std.iter().enumerate() {
                        let gr = &g.data()[i * c..(i + 1) * c];
                        let xh = &xhat[i * c..(i + 1) * c];
                        for j in 0..c {
                            dxhat[j] = gr[j] * gn[j];
                        }
                        let s1: f64 = dxhat.iter().sum();
                        let s2 = dot(&dxhat, xh);
                        let o = &mut gx.data_mut()[i * c..(i + 1) * c];
                        let nf = c as f64;
                        for j in 0..c {
                            o[j] += inv / nf * (nf * dxhat[j] - s1 - xh[j] * s2);
                        }
                    }
                });
                self.accumulate(grads, *gain, |gg| {
                    for (gr, xh) in g.data().chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg.data_mut()[j] += gr[j] * xh[j];
                        }
                    }
                });
                self.accumulate(grads, *bias, |gb| {
                    for gr in g.data().chunks(c) {
                        for j in 0..c {
                            gb.data_mut()[j] += gr[j];
                        }
                    }
                });
            }
            Op::GatherRows { src, idx } => {
                let c = out.cols();
                self.accumulate(grads, *src, |gs| {
                    for (k, &i) in idx.iter().enumerate() {
                        let o = &mut gs.data_mut()[i * c..(i + 1) * c];
                        for (a, &b) in o.iter_mut().zip(&g.data()[k * c..(k + 1) * c]) {
                            *a += b;
                        }
                    }
                });
            }
            Op::ReplaceRows { base, src, idx } => {
                let c = out.cols();
                self.accumulate(grads, *base, |gb| {
                    let replaced: std::collections::HashSet<usize> = idx.iter().copied().collect();
                    for (r, (o, gr)) in gb.data_mut().chunks_mut(c).zip(g.data().chunks(c)).enumerate() {
                        if !replaced.contains(&r) {
                            for (a, &b) in o.iter_mut().zip(gr) {
                                *a += b;
                            }
                        }
                    }
                });
                self.accumulate(grads, *src, |gs| {
                    for (k, &i) in idx.iter().enumerate() {
                        let o = &mut gs.data_mut()[k * c..(k + 1) * c];
                        for (a, &b) in o.iter_mut().zip(&g.data()[i * c..(i + 1) * c]) {
                            *a += b;
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let w = out.cols();
                let c = self.value(*x).cols();
                self.accumulate(grads, *x, |gx| {
                    for (i, gr) in g.data().chunks(w).enumerate() {
                        let o = &mut gx.data_mut()[i * c + start..i * c + start + w];
                        for (a, &b) in o.iter_mut().zip(gr) {
                            *a += b;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let c = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.accumulate(grads, p, |gp| {
                        for (i, o) in gp.data_mut().chunks_mut(w).enumerate() {
                            for (a, &b) in o.iter_mut().zip(&g.data()[i * c + offset..i * c + offset + w]) {
                                *a += b;
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.accumulate(grads, p, |gp| {
                        for (a, &b) in gp.data_mut().iter_mut().zip(&g.data()[offset..offset + n]) {
                            *a += b;
                        }
                    });
                    offset += n;
                }
            }
            Op::Sum(x) => {
                let s = g.item();
                self.accumulate(grads, *x, |gx| {
                    for v in gx.data_mut() {
                        *v += s;
                    }
                });
            }
            Op::Orthonormalize { raw, r } => {
                let (k, d) = shape2(out);
                self.accumulate(grads, *raw, |graw| {
                    let add = orthonormalize_adjoint(out.data(), r, g.data(), k, d);
                    for (a, b) in graw.data_mut().iter_mut().zip(add) {
                        *a += b;
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                positions,
                probs,
            } => {
                let v = self.value(*logits).cols();
                let scale = g.item() / positions.len() as f64;
                self.accumulate(grads, *logits, |gl| {
                    for (k, (&p, &t)) in positions.iter().zip(targets).enumerate() {
                        let o = &mut gl.data_mut()[p * v..(p + 1) * v];
                        for j in 0..v {
                            o[j] += scale * probs[k * v + j];
                        }
                        o[t] -= scale;
                    }
                });
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Minimum residual norm a row may keep after projecting out its predecessors.
pub const PIVOT_TOLERANCE: f64 = 1e-10;

/// Modified Gram–Schmidt on the rows of `raw` (k×d).
///
/// Returns `(U, R)` with `raw = Rᵀ U`, `U` having orthonormal rows and `R`
/// (k×k, row-major) upper triangular with positive diagonal.
pub fn gram_schmidt(raw: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    if raw.shape().len() != 2 {
        return dim_err(format!("orthonormalize expects a matrix, got {:?}", raw.shape()));
    }
    let (k, d) = shape2(raw);
    if k > d {
        return dim_err(format!("cannot orthonormalize {k} rows in dimension {d}"));
    }
    let mut u = raw.data().to_vec();
    let mut r = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..i {
            let (head, tail) = u.split_at_mut(i * d);
            let uj = &head[j * d..(j + 1) * d];
            let vi = &mut tail[..d];
            let c = dot(uj, vi);
            r[j * k + i] = c;
            for (a, &b) in vi.iter_mut().zip(uj) {
                *a -= c * b;
            }
        }
        let vi = &mut u[i * d..(i + 1) * d];
        let norm = dot(vi, vi).sqrt();
        if !(norm >= PIVOT_TOLERANCE) {
            return Err(MrtError::Degenerate { row: i, norm });
        }
        r[i * k + i] = norm;
        for a in vi.iter_mut() {
            *a /= norm;
        }
    }
    Ok((Tensor::new(vec![k, d], u)?, r))
}

/// Pullback of `raw ↦ U` through the thin QR of `rawᵀ`.
///
/// With `B = copyltu(-Ū Uᵀ)` (lower triangle mirrored), `∂raw = R⁻¹ (Ū + B U)`.
fn orthonormalize_adjoint(u: &[f64], r: &[f64], gu: &[f64], k: usize, d: usize) -> Vec<f64> {
    let mut m = vec![0.0; k * k];
    gemm_nt(gu, u, &mut m, k, d, k);
    let mut b = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
            b[i * k + j] = -m[hi * k + lo];
        }
    }
    let mut rhs = gu.to_vec();
    gemm_nn(&b, u, &mut rhs, k, k, d);
    // back-substitution with upper-triangular R
    let mut x = vec![0.0; k * d];
    for i in (0..k).rev() {
        for c in 0..d {
            let mut s = rhs[i * d + c];
            for j in i + 1..k {
                s -= r[i * k + j] * x[j * d + c];
            }
            x[i * d + c] = s / r[i * k + i];
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central finite-difference oracle over every element of every input.
    fn check_grads(
        inputs: &[Tensor],
        f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
    ) -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let root = f(&mut tape, &vars).unwrap();
        let grads = tape.backward(root).unwrap();
        let eval = |ins: &[Tensor]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ins.iter().map(|x| t.leaf(x.clone(), false)).collect();
            let r = f(&mut t, &vs).unwrap();
            t.value(r).item()
        };
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (n, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[n]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
            for e in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[n].data_mut()[e] += h;
                let mut minus = inputs.to_vec();
                minus[n].data_mut()[e] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[e];
                let rel = (a - fd).abs() / (a.abs().max(fd.abs()).max(1e-6));
                worst = worst.max(rel);
            }
        }
        worst
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn frozen_leaf_gets_no_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]), false);
        let x = tape.leaf(Tensor::from_rows(&[&[1.0], &[1.0]]), true);
        let y = tape.matmul(w, x).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(w).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn chain_matmul_softmax_ce_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = rand_tensor(&mut rng, &[2, 2]);
        let b = rand_tensor(&mut rng, &[2, 2]);
        let worst = check_grads(&[a, b], |t, v| {
            let m = t.matmul(v[0], v[1])?;
            let s = t.softmax_rows(m);
            let l = t.cross_entropy(s, &[0, 1], &[1, 0])?;
            Ok(l)
        });
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn every_primitive_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let w = rand_tensor(&mut rng, &[4, 4]);
        let bias = rand_tensor(&mut rng, &[4]);
        let gain = rand_tensor(&mut rng, &[4]);
        let mask = rand_tensor(&mut rng, &[3, 3]);
        let worst = check_grads(&[x, w, bias, gain], |t, v| {
            let h = t.layernorm(v[0], v[3], v[2], 1e-5)?;
            let h = t.matmul(h, v[1])?;
            let h = t.add_bias(h, v[2])?;
            let h = t.gelu(h);
            let left = t.slice_cols(h, 0, 2)?;
            let right = t.slice_cols(h, 2, 4)?;
            let sc = t.matmul_nt(left, right)?;
            let sc = t.add_const(sc, &mask)?;
            let sc = t.scale(sc, 0.7);
            let p = t.softmax_rows(sc);
            let o = t.matmul(p, right)?;
            let o = t.concat_cols(&[o, left])?;
            let o2 = t.sub(o, h)?;
            let o3 = t.mul(o2, o)?;
            let rows = t.gather_rows(o3, &[2, 0])?;
            let rep = t.replace_rows(h, rows, &[1, 2])?;
            let cat = t.concat_rows(&[rep, h])?;
            let added = t.add(cat, cat)?;
            let l = t.cross_entropy(added, &[0, 3, 5], &[1, 2, 3])?;
            let s = t.sum(rep);
            let s = t.scale(s, 0.01);
            t.add(l, s)
        });
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn orthonormalize_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let raw = rand_tensor(&mut rng, &[3, 5]);
        let probe = rand_tensor(&mut rng, &[3, 5]);
        let worst = check_grads(&[raw], |t, v| {
            let u = t.orthonormalize(v[0])?;
            let p = t.leaf(probe.clone(), false);
            let m = t.mul(u, p)?;
            let m2 = t.mul(m, u)?;
            Ok(t.sum(m2))
        });
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn cross_entropy_cases() {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::zeros(&[1, 4]), false);
        let ce = tape.cross_entropy(l, &[0], &[2]).unwrap();
        assert!((tape.value(ce).item() - 4f64.ln()).abs() < 1e-15);

        let confident = tape.leaf(Tensor::from_rows(&[&[0.0, 500.0, 0.0]]), false);
        let ce = tape.cross_entropy(confident, &[0], &[1]).unwrap();
        assert!(tape.value(ce).item() < 1e-12);

        assert!(tape.cross_entropy(l, &[], &[]).is_err());
    }

    #[test]
    fn cross_entropy_two_positions_hand_oracle() {
        // row 0: logits (1, 2), target 0; row 1: logits (0, 0), target 1
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::from_rows(&[&[1.0, 2.0], &[0.0, 0.0]]), false);
        let ce = tape.cross_entropy(l, &[0, 1], &[0, 1]).unwrap();
        let nll0 = -(1f64.exp() / (1f64.exp() + 2f64.exp())).ln();
        let nll1 = 2f64.ln();
        assert!((tape.value(ce).item() - 0.5 * (nll0 + nll1)).abs() < 1e-12);
    }

    #[test]
    fn layernorm_cases() {
        let mut tape = Tape::new();
        let g = tape.leaf(Tensor::vector(vec![1.0, 1.0]), false);
        let b = tape.leaf(Tensor::vector(vec![0.0, 0.0]), false);
        let x = tape.leaf(Tensor::vector(vec![1.0, -1.0]), false);
        let y = tape.layernorm(x, g, b, 1e-12).unwrap();
        assert!((tape.value(y).data()[0] - 1.0).abs() < 1e-9);
        assert!((tape.value(y).data()[1] + 1.0).abs() < 1e-9);

        let c = tape.leaf(Tensor::vector(vec![2.5, 2.5, 2.5]), false);
        let g3 = tape.leaf(Tensor::vector(vec![1.0; 3]), false);
        let b3 = tape.leaf(Tensor::vector(vec![0.0; 3]), false);
        let y = tape.layernorm(c, g3, b3, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let g0 = tape.leaf(Tensor::vector(vec![0.0; 3]), false);
        let bb = tape.leaf(Tensor::vector(vec![0.3, -0.2, 0.1]), false);
        let x3 = tape.leaf(Tensor::vector(vec![1.0, 5.0, -2.0]), false);
        let y = tape.layernorm(x3, g0, bb, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.3, -0.2, 0.1]);
    }

    #[test]
    fn gram_schmidt_cases() {
        let (u, _) = gram_schmidt(&Tensor::from_rows(&[&[3.0, 4.0]])).unwrap();
        assert!((u.data()[0] - 0.6).abs() < 1e-15 && (u.data()[1] - 0.8).abs() < 1e-15);

        let ortho = Tensor::from_rows(&[&[0.0, 1.0, 0.0], &[1.0, 0.0, 0.0]]);
        let (u, _) = gram_schmidt(&ortho).unwrap();
        assert!(u.max_abs_diff(&ortho) < 1e-12);

        let err = gram_schmidt(&Tensor::from_rows(&[&[1.0, 0.0], &[1.0, 1e-12]])).unwrap_err();
        assert!(matches!(err, MrtError::Degenerate { row: 1, .. }));
    }
}
