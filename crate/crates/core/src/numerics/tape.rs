//! Tape-based reverse-mode differentiation over rank-2 tensors.
//!
//! Every op appends a node holding its forward value; [`Tape::backward`]
//! walks the nodes in reverse and accumulates adjoints. Leaves are either
//! borrowed (parameters, cached keys/values) or owned constants.

use std::borrow::Cow;

use super::kernels::{self, gelu, gelu_grad, sigmoid};
use super::tensor::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One supervised cross-entropy term: `weight · −log softmax(row)[target]`.
#[derive(Debug, Clone, Copy)]
pub struct Pick<T> {
    pub row: usize,
    pub target: usize,
    pub weight: T,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRowBias(Var, Var),
    RowScale(Var, Var),
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    MaskedSoftmax {
        a: Var,
        valid: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        valid: Vec<usize>,
        probs: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    GatherRows {
        a: Var,
        idx: Vec<usize>,
    },
    ScatterAddRows {
        a: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Var, Var),
    SliceCols {
        a: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    CrossEntropy {
        logits: Var,
        picks: Vec<Pick<T>>,
    },
    Sum(Var),
}

struct Node<'a, T: Element> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<'a, T: Element> {
    nodes: Vec<Node<'a, T>>,
    record: bool,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<'a, T: Element> Default for Tape<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_same(op: &'static str, a: [usize; 2], b: [usize; 2]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

impl<'a, T: Element> Tape<'a, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A tape that does not keep backward-only buffers (attention
    /// probabilities). Gradients cannot be taken from it.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
        }
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

    fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var], name: &'static str) -> Result<Var> {
        let value = value.ensure_finite(name)?;
        let requires_grad = self.record && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Differentiable leaf borrowed from a parameter store.
    pub fn param(&mut self, value: &'a Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            requires_grad: self.record,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf owning its value.
    pub fn param_owned(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Leaf,
            requires_grad: self.record,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant_ref(&mut self, value: &'a Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, k] = self.shape(a);
        let [k2, n] = self.shape(b);
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}, {k}] · [{k2}, {n}]")));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::from_vec(m, n, out)?, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, k] = self.shape(a);
        let [n, k2] = self.shape(b);
        if k != k2 {
            return Err(Error::shape("matmul_nt", format!("[{m}, {k}] · [{n}, {k2}]ᵀ")));
        }
        let out = kernels::matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::from_vec(m, n, out)?, Op::MatMulNT(a, b), &[a, b], "matmul_nt")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("add", self.shape(a), self.shape(b))?;
        let [r, c] = self.shape(a);
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        self.push(Tensor::from_vec(r, c, out)?, Op::Add(a, b), &[a, b], "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("mul", self.shape(a), self.shape(b))?;
        let [r, c] = self.shape(a);
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        self.push(Tensor::from_vec(r, c, out)?, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let [r, c] = self.shape(a);
        let out = self.value(a).data().iter().map(|&x| x * s).collect();
        self.push(Tensor::from_vec(r, c, out)?, Op::Scale(a, s), &[a], "scale")
    }

    /// Row-wise bias add: `a[n×m] + bias[1×m]` broadcast over rows.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let [r, c] = self.shape(a);
        if self.shape(bias) != [1, c] {
            return Err(Error::shape(
                "add_row_bias",
                format!("bias {:?} for input [{r}, {c}]", self.shape(bias)),
            ));
        }
        let b = self.value(bias).data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(c) {
            for (x, &bj) in row.iter_mut().zip(b) {
                *x = *x + bj;
            }
        }
        self.push(
            Tensor::from_vec(r, c, out)?,
            Op::AddRowBias(a, bias),
            &[a, bias],
            "add_row_bias",
        )
    }

    /// Multiplies row `i` of `a[n×m]` by `s[i]`, with `s` of shape `[n×1]`.
    pub fn row_scale(&mut self, a: Var, s: Var) -> Result<Var> {
        let [r, c] = self.shape(a);
        if self.shape(s) != [r, 1] {
            return Err(Error::shape(
                "row_scale",
                format!("scale {:?} for input [{r}, {c}]", self.shape(s)),
            ));
        }
        let sv = self.value(s).data();
        let mut out = self.value(a).data().to_vec();
        for (row, &si) in out.chunks_mut(c).zip(sv) {
            for x in row {
                *x = *x * si;
            }
        }
        self.push(Tensor::from_vec(r, c, out)?, Op::RowScale(a, s), &[a, s], "row_scale")
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let [r, c] = self.shape(a);
        let out = self.value(a).data().iter().map(|&x| gelu(x)).collect();
        self.push(Tensor::from_vec(r, c, out)?, Op::Gelu(a), &[a], "gelu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let [r, c] = self.shape(a);
        let out = self.value(a).data().iter().map(|&x| sigmoid(x)).collect();
        self.push(Tensor::from_vec(r, c, out)?, Op::Sigmoid(a), &[a], "sigmoid")
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of shape `[1×m]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let [r, c] = self.shape(x);
        check_same("layer_norm", self.shape(gamma), [1, c])?;
        check_same("layer_norm", self.shape(beta), [1, c])?;
        let n = T::from_usize(c).unwrap();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = Vec::with_capacity(r * c);
        let mut means = Vec::with_capacity(r);
        let mut rstds = Vec::with_capacity(r);
        for row in self.value(x).data().chunks(c) {
            let mean = row.iter().fold(T::zero(), |acc, &v| acc + v) / n;
            let var = row.iter().fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / n;
            let rstd = T::one() / (var + eps).sqrt();
            for j in 0..c {
                out.push((row[j] - mean) * rstd * g[j] + b[j]);
            }
            means.push(mean);
            rstds.push(rstd);
        }
        self.push(
            Tensor::from_vec(r, c, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: means,
                rstd: rstds,
            },
            &[x, gamma, beta],
            "layer_norm",
        )
    }

    /// Row softmax over all columns.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let [r, c] = self.shape(a);
        self.masked_softmax(a, vec![c; r])
    }

    /// Row softmax where row `i` only sees its first `valid[i]` columns; the
    /// masked tail is exactly zero.
    pub fn masked_softmax(&mut self, a: Var, valid: Vec<usize>) -> Result<Var> {
        let [r, c] = self.shape(a);
        if valid.len() != r || valid.iter().any(|&v| v == 0 || v > c) {
            return Err(Error::shape(
                "masked_softmax",
                "valid prefix lengths must be in 1..=cols",
            ));
        }
        let mut out = self.value(a).data().to_vec();
        for (row, &nv) in out.chunks_mut(c).zip(&valid) {
            kernels::softmax_prefix(row, nv);
        }
        self.push(
            Tensor::from_vec(r, c, out)?,
            Op::MaskedSoftmax { a, valid },
            &[a],
            "masked_softmax",
        )
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `[n×d]`, `k` and `v` are `[m×d]`; query `i` attends to the first
    /// `valid[i]` keys. Heads split the feature dimension evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, valid: Vec<usize>) -> Result<Var> {
        let [n, d] = self.shape(q);
        let [m, dk] = self.shape(k);
        check_same("attention", self.shape(v), [m, d])?;
        if dk != d || heads == 0 || d % heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("q [{n}, {d}], k [{m}, {dk}], heads {heads}"),
            ));
        }
        if valid.len() != n || valid.iter().any(|&c| c == 0 || c > m) {
            return Err(Error::shape("attention", "valid key counts must be in 1..=keys"));
        }
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut out = vec![T::zero(); n * d];
        let mut probs = if self.record {
            vec![T::zero(); heads * n * m]
        } else {
            Vec::new()
        };
        let mut row = vec![T::zero(); m];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let nv = valid[i];
                let qi = &qd[i * d + off..i * d + off + dh];
                for j in 0..nv {
                    row[j] = kernels::dot(qi, &kd[j * d + off..j * d + off + dh]) * scale;
                }
                kernels::softmax_prefix(&mut row[..nv], nv);
                let oi = &mut out[i * d + off..i * d + off + dh];
                for j in 0..nv {
                    let p = row[j];
                    let vj = &vd[j * d + off..j * d + off + dh];
                    for (o, &x) in oi.iter_mut().zip(vj) {
                        *o = *o + p * x;
                    }
                }
                if self.record {
                    probs[(h * n + i) * m..(h * n + i) * m + nv].copy_from_slice(&row[..nv]);
                }
            }
        }
        self.push(
            Tensor::from_vec(n, d, out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                valid,
                probs,
            },
            &[q, k, v],
            "attention",
        )
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let [vocab, d] = self.shape(table);
        if ids.is_empty() {
            return Err(Error::shape("embedding", "no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::TokenOutOfRange { id: bad, vocab });
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(t.row_slice(i));
        }
        self.push(
            Tensor::from_vec(ids.len(), d, out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
            "embedding",
        )
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let [r, c] = self.shape(a);
        if idx.is_empty() || idx.iter().any(|&i| i >= r) {
            return Err(Error::shape(
                "gather_rows",
                format!("indices out of range for {r} rows"),
            ));
        }
        let t = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(t.row_slice(i));
        }
        self.push(
            Tensor::from_vec(idx.len(), c, out)?,
            Op::GatherRows { a, idx: idx.to_vec() },
            &[a],
            "gather_rows",
        )
    }

    /// Output of `rows` rows, zero except `out[idx[i]] += a[i]`.
    pub fn scatter_add_rows(&mut self, a: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let [r, c] = self.shape(a);
        if idx.len() != r || idx.iter().any(|&i| i >= rows) {
            return Err(Error::shape(
                "scatter_add_rows",
                format!("{} indices for {r} rows into {rows}", idx.len()),
            ));
        }
        let t = self.value(a);
        let mut out = vec![T::zero(); rows * c];
        for (src, &dst) in idx.iter().enumerate() {
            for (o, &x) in out[dst * c..(dst + 1) * c].iter_mut().zip(t.row_slice(src)) {
                *o = *o + x;
            }
        }
        self.push(
            Tensor::from_vec(rows, c, out)?,
            Op::ScatterAddRows { a, idx: idx.to_vec() },
            &[a],
            "scatter_add_rows",
        )
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let [ra, ca] = self.shape(a);
        let [rb, cb] = self.shape(b);
        if ca != cb {
            return Err(Error::shape("concat_rows", format!("{ca} vs {cb} columns")));
        }
        let mut out = Vec::with_capacity((ra + rb) * ca);
        out.extend_from_slice(self.value(a).data());
        out.extend_from_slice(self.value(b).data());
        self.push(
            Tensor::from_vec(ra + rb, ca, out)?,
            Op::ConcatRows(a, b),
            &[a, b],
            "concat_rows",
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let [r, c] = self.shape(a);
        if len == 0 || start + len > c {
            return Err(Error::shape(
                "slice_cols",
                format!("[{start}, {}) of {c} columns", start + len),
            ));
        }
        let mut out = Vec::with_capacity(r * len);
        for row in self.value(a).data().chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        self.push(
            Tensor::from_vec(r, len, out)?,
            Op::SliceCols { a, start },
            &[a],
            "slice_cols",
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_cols", "no inputs"));
        };
        let r = self.shape(first)[0];
        if parts.iter().any(|&p| self.shape(p)[0] != r) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        self.push(
            Tensor::from_vec(r, total, out)?,
            Op::ConcatCols(parts.to_vec()),
            parts,
            "concat_cols",
        )
    }

    /// Weighted sum of per-row cross-entropies, as a `[1×1]` scalar.
    pub fn cross_entropy(&mut self, logits: Var, picks: Vec<Pick<T>>) -> Result<Var> {
        let [r, c] = self.shape(logits);
        if picks.iter().any(|p| p.row >= r || p.target >= c) {
            return Err(Error::shape("cross_entropy", "pick outside logits"));
        }
        let l = self.value(logits);
        let mut total = T::zero();
        for p in &picks {
            let row = l.row_slice(p.row);
            total = total + p.weight * (kernels::log_sum_exp(row) - row[p.target]);
        }
        self.push(
            Tensor::scalar(total),
            Op::CrossEntropy { logits, picks },
            &[logits],
            "cross_entropy",
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().fold(T::zero(), |acc, &v| acc + v);
        self.push(Tensor::scalar(s), Op::Sum(a), &[a], "sum")
    }

    /// Reverse pass from a `[1×1]` output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.shape(output) != [1, 1] {
            return Err(Error::shape("backward", "output must be a scalar"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let [gr, gc] = g.shape();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let k = av.cols();
                if self.needs(*a) {
                    let da = kernels::matmul_nt(g.data(), bv.data(), gr, gc, k);
                    self.accumulate(grads, *a, Tensor::from_vec(gr, k, da)?)?;
                }
                if self.needs(*b) {
                    let db = kernels::matmul_tn(av.data(), g.data(), gr, k, gc);
                    self.accumulate(grads, *b, Tensor::from_vec(k, gc, db)?)?;
                }
            }
            Op::MatMulNT(a, b) => {
                // out = a · bᵀ, a [m×k], b [n×k]
                let (av, bv) = (self.value(*a), self.value(*b));
                let k = av.cols();
                if self.needs(*a) {
                    let da = kernels::matmul(g.data(), bv.data(), gr, gc, k);
                    self.accumulate(grads, *a, Tensor::from_vec(gr, k, da)?)?;
                }
                if self.needs(*b) {
                    let db = kernels::matmul_tn(g.data(), av.data(), gr, gc, k);
                    self.accumulate(grads, *b, Tensor::from_vec(gc, k, db)?)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let da = g.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::from_vec(gr, gc, da)?)?;
                }
                if self.needs(*b) {
                    let db = g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::from_vec(gr, gc, db)?)?;
                }
            }
            Op::Scale(a, s) => {
                let da = g.data().iter().map(|&x| x * *s).collect();
                self.accumulate(grads, *a, Tensor::from_vec(gr, gc, da)?)?;
            }
            Op::AddRowBias(a, bias) => {
                self.accumulate(grads, *a, g.clone())?;
                if self.needs(*bias) {
                    let mut db = vec![T::zero(); gc];
                    for row in g.data().chunks(gc) {
                        for (d, &x) in db.iter_mut().zip(row) {
                            *d = *d + x;
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::from_vec(1, gc, db)?)?;
                }
            }
            Op::RowScale(a, s) => {
                let (av, sv) = (self.value(*a), self.value(*s));
                if self.needs(*a) {
                    let mut da = g.data().to_vec();
                    for (row, &si) in da.chunks_mut(gc).zip(sv.data()) {
                        row.iter_mut().for_each(|x| *x = *x * si);
                    }
                    self.accumulate(grads, *a, Tensor::from_vec(gr, gc, da)?)?;
                }
                if self.needs(*s) {
                    let ds = g
                        .data()
                        .chunks(gc)
                        .zip(av.data().chunks(gc))
                        .map(|(gi, ai)| kernels::dot(gi, ai))
                        .collect();
                    self.accumulate(grads, *s, Tensor::from_vec(gr, 1, ds)?)?;
                }
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                let da = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(&gi, &x)| gi * gelu_grad(x))
                    .collect();
                self.accumulate(grads, *a, Tensor::from_vec(gr, gc, da)?)?;
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let da = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gi, &s)| gi * s * (T::one() - s))
                    .collect();
                self.accumulate(grads, *a, Tensor::from_vec(gr, gc, da)?)?;
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let n = T::from_usize(gc).unwrap();
                let mut dx = vec![T::zero(); gr * gc];
                let mut dgamma = vec![T::zero(); gc];
                let mut dbeta = vec![T::zero(); gc];
                let mut xhat = vec![T::zero(); gc];
                let mut dxhat = vec![T::zero(); gc];
                for i in 0..gr {
                    let xi = xv.row_slice(i);
                    let gi = g.row_slice(i);
                    for j in 0..gc {
                        xhat[j] = (xi[j] - mean[i]) * rstd[i];
                        dxhat[j] = gi[j] * gv.data()[j];
                        dgamma[j] = dgamma[j] + gi[j] * xhat[j];
                        dbeta[j] = dbeta[j] + gi[j];
                    }
                    let sum_d = dxhat.iter().fold(T::zero(), |a, &b| a + b);
                    let sum_dx = dxhat.iter().zip(&xhat).fold(T::zero(), |a, (&d, &h)| a + d * h);
                    for j in 0..gc {
                        dx[i * gc + j] = rstd[i] / n * (n * dxhat[j] - sum_d - xhat[j] * sum_dx);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(gr, gc, dx)?)?;
                self.accumulate(grads, *gamma, Tensor::from_vec(1, gc, dgamma)?)?;
                self.accumulate(grads, *beta, Tensor::from_vec(1, gc, dbeta)?)?;
            }
            Op::MaskedSoftmax { a, valid } => {
                let y = &node.value;
                let mut da = vec![T::zero(); gr * gc];
                for i in 0..gr {
                    let nv = valid[i];
                    let yi = &y.row_slice(i)[..nv];
                    let gi = &g.row_slice(i)[..nv];
                    let s = kernels::dot(yi, gi);
                    for j in 0..nv {
                        da[i * gc + j] = yi[j] * (gi[j] - s);
                    }
                }
                self.accumulate(grads, *a, Tensor::from_vec(gr, gc, da)?)?;
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                valid,
                probs,
            } => {
                if probs.is_empty() {
                    return Err(Error::shape("attention", "backward on an inference tape"));
                }
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let n = gr;
                let d = gc;
                let m = kv.rows();
                let dh = d / heads;
                let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
                let mut dq = vec![T::zero(); n * d];
                let mut dk = vec![T::zero(); m * d];
                let mut dvv = vec![T::zero(); m * d];
                let mut dp = vec![T::zero(); m];
                for h in 0..*heads {
                    let off = h * dh;
                    for i in 0..n {
                        let nv = valid[i];
                        let p = &probs[(h * n + i) * m..(h * n + i) * m + nv];
                        let gi = &g.data()[i * d + off..i * d + off + dh];
                        for j in 0..nv {
                            dp[j] = kernels::dot(gi, &vv.data()[j * d + off..j * d + off + dh]);
                            let dvj = &mut dvv[j * d + off..j * d + off + dh];
                            for (dv, &x) in dvj.iter_mut().zip(gi) {
                                *dv = *dv + p[j] * x;
                            }
                        }
                        let s = kernels::dot(p, &dp[..nv]);
                        let qi = &qv.data()[i * d + off..i * d + off + dh];
                        for j in 0..nv {
                            let ds = p[j] * (dp[j] - s) * scale;
                            if ds == T::zero() {
                                continue;
                            }
                            let kj = &kv.data()[j * d + off..j * d + off + dh];
                            let dqi = &mut dq[i * d + off..i * d + off + dh];
                            for (dqx, &kx) in dqi.iter_mut().zip(kj) {
                                *dqx = *dqx + ds * kx;
                            }
                            let dkj = &mut dk[j * d + off..j * d + off + dh];
                            for (dkx, &qx) in dkj.iter_mut().zip(qi) {
                                *dkx = *dkx + ds * qx;
                            }
                        }
                    }
                }
                self.accumulate(grads, *q, Tensor::from_vec(n, d, dq)?)?;
                self.accumulate(grads, *k, Tensor::from_vec(m, d, dk)?)?;
                self.accumulate(grads, *v, Tensor::from_vec(m, d, dvv)?)?;
            }
            Op::Embedding { table, ids } => {
                let [vocab, d] = self.shape(*table);
                let mut dt = Tensor::zeros(vocab, d);
                for (r, &id) in ids.iter().enumerate() {
                    let src = g.row_slice(r);
                    for (o, &x) in dt.row_slice_mut(id).iter_mut().zip(src) {
                        *o = *o + x;
                    }
                }
                self.accumulate(grads, *table, dt)?;
            }
            Op::GatherRows { a, idx } => {
                let [r, c] = self.shape(*a);
                let mut da = Tensor::zeros(r, c);
                for (src, &dst) in idx.iter().enumerate() {
                    for (o, &x) in da.row_slice_mut(dst).iter_mut().zip(g.row_slice(src)) {
                        *o = *o + x;
                    }
                }
                self.accumulate(grads, *a, da)?;
            }
            Op::ScatterAddRows { a, idx } => {
                let mut out = Vec::with_capacity(idx.len() * gc);
                for &i in idx {
                    out.extend_from_slice(g.row_slice(i));
                }
                self.accumulate(grads, *a, Tensor::from_vec(idx.len(), gc, out)?)?;
            }
            Op::ConcatRows(a, b) => {
                let ra = self.shape(*a)[0];
                let split = ra * gc;
                if self.needs(*a) {
                    self.accumulate(grads, *a, Tensor::from_vec(ra, gc, g.data()[..split].to_vec())?)?;
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, Tensor::from_vec(gr - ra, gc, g.data()[split..].to_vec())?)?;
                }
            }
            Op::SliceCols { a, start } => {
                let [r, c] = self.shape(*a);
                let mut da = Tensor::zeros(r, c);
                for i in 0..r {
                    da.row_slice_mut(i)[*start..*start + gc].copy_from_slice(g.row_slice(i));
                }
                self.accumulate(grads, *a, da)?;
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let [r, c] = self.shape(p);
                    if self.needs(p) {
                        let mut dp = Vec::with_capacity(r * c);
                        for i in 0..r {
                            dp.extend_from_slice(&g.row_slice(i)[offset..offset + c]);
                        }
                        self.accumulate(grads, p, Tensor::from_vec(r, c, dp)?)?;
                    }
                    offset += c;
                }
            }
            Op::CrossEntropy { logits, picks } => {
                let l = self.value(*logits);
                let [r, c] = l.shape();
                let upstream = g.data()[0];
                let mut dl = Tensor::zeros(r, c);
                let mut probs = vec![T::zero(); c];
                for p in picks {
                    probs.copy_from_slice(l.row_slice(p.row));
                    kernels::softmax_prefix(&mut probs, c);
                    let w = upstream * p.weight;
                    let row = dl.row_slice_mut(p.row);
                    for j in 0..c {
                        let indicator = if j == p.target { T::one() } else { T::zero() };
                        row[j] = row[j] + w * (probs[j] - indicator);
                    }
                }
                self.accumulate(grads, *logits, dl)?;
            }
            Op::Sum(a) => {
                let [r, c] = self.shape(*a);
                self.accumulate(grads, *a, Tensor::full(r, c, g.data()[0]))?;
            }
        }
        Ok(())
    }
}
