//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! output value. [`Tape::backward`] walks the nodes in reverse, propagating
//! vector-Jacobian products, and adds the gradient of every parameter leaf into
//! the owning [`ParamStore`]. A parameter that is read `n` times creates `n`
//! leaves, so its stored gradient is the sum of its `n` per-use gradients.
//!
//! Gradients accumulate across calls; call [`ParamStore::zero_grad`] between
//! steps.

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// Number of leaves that referenced this parameter in the last backward pass.
    pub use_count: usize,
}

/// Owns every trainable tensor of a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
            use_count: 0,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
            p.use_count = 0;
        }
    }

    /// Euclidean norm of all gradients taken together.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Shape and masking of a batched multi-head attention call.
///
/// Queries occupy `batch * q_len` rows and keys/values `batch * k_len` rows;
/// the feature axis is split into `heads` equal slices.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnLayout {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    /// Query `i` may only see keys `j <= i`.
    pub causal: bool,
    /// Number of valid (non-pad) keys per batch element.
    pub key_lens: Option<Vec<usize>>,
    /// Explicit `q_len x k_len` allow-mask shared by every batch element.
    pub allowed: Option<Vec<bool>>,
}

impl AttnLayout {
    pub fn new(batch: usize, q_len: usize, k_len: usize, heads: usize) -> Self {
        AttnLayout {
            batch,
            q_len,
            k_len,
            heads,
            causal: false,
            key_lens: None,
            allowed: None,
        }
    }

    pub fn causal(mut self) -> Self {
        self.causal = true;
        self
    }

    pub fn with_key_lens(mut self, lens: Vec<usize>) -> Self {
        self.key_lens = Some(lens);
        self
    }

    pub fn with_allowed(mut self, allowed: Vec<bool>) -> Self {
        self.allowed = Some(allowed);
        self
    }

    pub fn with_heads(mut self, heads: usize) -> Self {
        self.heads = heads;
        self
    }

    #[inline]
    pub fn is_allowed(&self, b: usize, i: usize, j: usize) -> bool {
        if self.causal && j > i {
            return false;
        }
        if let Some(lens) = &self.key_lens {
            if j >= lens[b] {
                return false;
            }
        }
        if let Some(allowed) = &self.allowed {
            if !allowed[i * self.k_len + j] {
                return false;
            }
        }
        true
    }

    fn validate(&self) -> Result<()> {
        if self.heads == 0 {
            return Err(Error::shape("attention", "zero heads"));
        }
        if let Some(lens) = &self.key_lens {
            if lens.len() != self.batch || lens.iter().any(|&l| l > self.k_len) {
                return Err(Error::shape(
                    "attention",
                    format!(
                        "key lengths {lens:?} do not fit batch {} x {}",
                        self.batch, self.k_len
                    ),
                ));
            }
        }
        if let Some(allowed) = &self.allowed {
            if allowed.len() != self.q_len * self.k_len {
                return Err(Error::shape(
                    "attention",
                    format!(
                        "mask has {} entries, expected {} x {}",
                        allowed.len(),
                        self.q_len,
                        self.k_len
                    ),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug)]
enum Op {
    Const,
    Input,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Mul(Var, Var),
    AddN(Vec<Var>),
    AddRow {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    MulConst {
        x: Var,
        mask: Vec<f64>,
    },
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Option<Var>,
        bias: Option<Var>,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(Var),
    Sum(Var),
    SumSquares(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttnLayout,
        probs: Vec<f64>,
        drop: Option<Vec<f64>>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        smoothing: f64,
        count: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation graph for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

fn check_rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::shape(
            op,
            format!("expected a matrix, got shape {:?}", t.shape()),
        ));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn accumulate(grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
    match &mut grads[var.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
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

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Const => false,
            Op::Input | Op::Param(_) => true,
            _ => parents.iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// A value that takes no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Const, &[])
    }

    /// A value whose gradient is reported in [`Gradients`] but not stored anywhere.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, &[])
    }

    /// Reads a parameter; every call is a separate use site.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).value.clone(), Op::Param(id), &[])
    }

    /// Number of leaves on this tape that read `id`.
    pub fn use_count(&self, id: ParamId) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Param(p) if p == id))
            .count()
    }

    /// Tape leaves that read `id`, in creation order.
    pub fn param_uses(&self, id: ParamId) -> Vec<Var> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Param(p) if p == id))
            .map(|(i, _)| Var(i))
            .collect()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a * b^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = check_rank2("matmul", self.value(a))?;
        let (r, c) = check_rank2("matmul", self.value(b))?;
        let (kb, n) = if trans_b { (c, r) } else { (r, c) };
        if k != kb {
            return Err(Error::shape(
                "matmul",
                format!(
                    "[{m},{k}] x {}[{r},{c}]",
                    if trans_b { "transpose " } else { "" }
                ),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            &mut out,
            false,
        );
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul { a, b, trans_b },
            &[a, b],
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::Mul(a, b), &[a, b]))
    }

    /// Elementwise sum of equally shaped tensors.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::shape("add_n", "empty operand list"))?;
        for &x in &xs[1..] {
            self.same_shape("add_n", first, x)?;
        }
        let mut out = self.value(first).clone();
        for &x in &xs[1..] {
            out.add_assign(self.value(x));
        }
        Ok(self.push(out, Op::AddN(xs.to_vec()), xs))
    }

    /// Adds a bias vector to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(bias).numel() != c || self.value(bias).rank() != 1 {
            return Err(Error::shape(
                "add_row",
                format!("bias {:?} for rows of width {c}", self.value(bias).shape()),
            ));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for row in out.data_mut().chunks_mut(c) {
            for (o, bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddRow { x, bias }, &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale { x, factor }, &[x])
    }

    /// Multiplies by a fixed tensor that takes no gradient (dropout masks).
    pub fn mul_const(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(x).numel() {
            return Err(Error::shape("mul_const", "mask size differs from input"));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(a, m)| a * m)
            .collect();
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::MulConst { x, mask },
            &[x],
        ))
    }

    /// Inverted dropout. Identity when `rate == 0` or no generator is supplied.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: Option<&mut dyn RngCore>) -> Var {
        match rng {
            Some(rng) if rate > 0.0 => {
                let mask = dropout_mask(self.value(x).numel(), rate, rng);
                self.mul_const(x, mask).expect("mask sized from input")
            }
            _ => x,
        }
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(out, Op::Relu(x), &[x])
    }

    /// Normalizes over the last axis, then applies optional gain and bias.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gain: Option<Var>,
        bias: Option<Var>,
        eps: f64,
    ) -> Result<Var> {
        let c = self.value(x).cols();
        if c < 2 || self.value(x).rank() == 0 {
            return Err(Error::Degenerate {
                op: "layer_norm",
                detail: format!("last axis has size {c}; need at least 2"),
            });
        }
        for p in [gain, bias].into_iter().flatten() {
            if self.value(p).rank() != 1 || self.value(p).numel() != c {
                return Err(Error::shape(
                    "layer_norm",
                    format!("affine parameter {:?} for width {c}", self.value(p).shape()),
                ));
            }
        }
        let xv = self.value(x);
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for (h, v) in xhat[r * c..(r + 1) * c].iter_mut().zip(row) {
                *h = (v - mean) * inv;
            }
        }
        let mut out = xhat.clone();
        if let Some(g) = gain {
            let g = self.value(g).data();
            for row in out.chunks_mut(c) {
                row.iter_mut().zip(g).for_each(|(o, gv)| *o *= gv);
            }
        }
        if let Some(b) = bias {
            let b = self.value(b).data();
            for row in out.chunks_mut(c) {
                row.iter_mut().zip(b).for_each(|(o, bv)| *o += bv);
            }
        }
        let shape = self.value(x).shape().to_vec();
        let parents: Vec<Var> = [Some(x), gain, bias].into_iter().flatten().collect();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &parents,
        ))
    }

    /// Row-wise softmax of a matrix, computed with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, c) = check_rank2("softmax_rows", self.value(x))?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::SoftmaxRows(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SumSquares(x), &[x])
    }

    /// Gathers rows of `table` (`[V, d]`) for each id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = check_rank2("embedding", self.value(table))?;
        if ids.is_empty() {
            return Err(Error::shape("embedding", "no ids"));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::OutOfVocab { id, vocab });
            }
            out.extend_from_slice(self.value(table).row(id));
        }
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Concatenates along the last axis. All inputs must have the same row count.
    /// Vectors concatenate into a vector, everything else into a matrix.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::shape("concat_cols", "empty operand list"))?;
        let rows = self.value(first).rows();
        let all_vectors = xs.iter().all(|&x| self.value(x).rank() == 1);
        if xs.iter().any(|&x| self.value(x).rows() != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let total: usize = xs.iter().map(|&x| self.value(x).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &x in xs {
                out.extend_from_slice(self.value(x).row(r));
            }
        }
        let shape = if all_vectors {
            vec![total]
        } else {
            vec![rows, total]
        };
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::ConcatCols(xs.to_vec()),
            xs,
        ))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::shape("concat_rows", "empty operand list"))?;
        let (_, c) = check_rank2("concat_rows", self.value(first))?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &x in xs {
            let (r, cx) = check_rank2("concat_rows", self.value(x))?;
            if cx != c {
                return Err(Error::shape("concat_rows", "column counts differ"));
            }
            rows += r;
            out.extend_from_slice(self.value(x).data());
        }
        Ok(self.push(
            Tensor::from_parts(vec![rows, c], out),
            Op::ConcatRows(xs.to_vec()),
            xs,
        ))
    }

    /// Scaled dot-product attention over `layout.heads` heads, scale `1/sqrt(head_dim)`.
    ///
    /// `q` is `[batch*q_len, heads*dk]`, `k` is `[batch*k_len, heads*dk]` and
    /// `v` is `[batch*k_len, heads*dv]`. Returns `[batch*q_len, heads*dv]`.
    /// `attn_dropout` multiplies the normalized weights with a fresh mask.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: AttnLayout,
        attn_dropout: f64,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        layout.validate()?;
        let (qr, qc) = check_rank2("attention", self.value(q))?;
        let (kr, kc) = check_rank2("attention", self.value(k))?;
        let (vr, vc) = check_rank2("attention", self.value(v))?;
        let AttnLayout {
            batch,
            q_len,
            k_len,
            heads,
            ..
        } = layout;
        if qr != batch * q_len || kr != batch * k_len || vr != kr || qc != kc {
            return Err(Error::shape(
                "attention",
                format!("q [{qr},{qc}] k [{kr},{kc}] v [{vr},{vc}] for batch {batch} x ({q_len},{k_len})"),
            ));
        }
        if qc % heads != 0 || vc % heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("width {qc} not divisible by {heads} heads"),
            ));
        }
        let dk = qc / heads;
        let dv = vc / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut probs = vec![0.0; batch * heads * q_len * k_len];
        let mut out = vec![0.0; qr * vc];
        let mut scores = vec![0.0; k_len];
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..q_len {
                    let qrow = &qd[(b * q_len + i) * qc + h * dk..][..dk];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..k_len {
                        if layout.is_allowed(b, i, j) {
                            let krow = &kd[(b * k_len + j) * kc + h * dk..][..dk];
                            let s = dot(qrow, krow) * scale;
                            scores[j] = s;
                            max = max.max(s);
                        } else {
                            scores[j] = f64::NEG_INFINITY;
                        }
                    }
                    if max == f64::NEG_INFINITY {
                        return Err(Error::Degenerate {
                            op: "attention",
                            detail: format!("query {i} of batch element {b} has no visible keys"),
                        });
                    }
                    let p = &mut probs[((b * heads + h) * q_len + i) * k_len..][..k_len];
                    let mut total = 0.0;
                    for j in 0..k_len {
                        let e = if scores[j] == f64::NEG_INFINITY {
                            0.0
                        } else {
                            (scores[j] - max).exp()
                        };
                        p[j] = e;
                        total += e;
                    }
                    p.iter_mut().for_each(|x| *x /= total);
                }
            }
        }
        let drop = match rng {
            Some(rng) if attn_dropout > 0.0 => Some(dropout_mask(probs.len(), attn_dropout, rng)),
            _ => None,
        };
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..q_len {
                    let base = ((b * heads + h) * q_len + i) * k_len;
                    let orow = &mut out[(b * q_len + i) * vc + h * dv..][..dv];
                    for j in 0..k_len {
                        let mut p = probs[base + j];
                        if let Some(m) = &drop {
                            p *= m[base + j];
                        }
                        if p != 0.0 {
                            let vrow = &vd[(b * k_len + j) * vc + h * dv..][..dv];
                            orow.iter_mut().zip(vrow).for_each(|(o, x)| *o += p * x);
                        }
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![qr, vc], out),
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
                drop,
            },
            &[q, k, v],
        ))
    }

    /// Normalized attention weights `[batch, heads, q_len, k_len]` of an attention node.
    pub fn attention_weights(&self, var: Var) -> Option<&[f64]> {
        match &self.nodes[var.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean label-smoothed cross-entropy over rows with a target; `None` rows are ignored.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        smoothing: f64,
    ) -> Result<Var> {
        let (rows, vocab) = check_rank2("cross_entropy", self.value(logits))?;
        if targets.len() != rows {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for {rows} rows", targets.len()),
            ));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::Degenerate {
                op: "cross_entropy",
                detail: "no target tokens".into(),
            });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0;
        for (r, row) in probs.chunks_mut(vocab).enumerate() {
            let Some(t) = targets[r] else { continue };
            if t >= vocab {
                return Err(Error::OutOfVocab { id: t, vocab });
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let mean_logp = row.iter().map(|v| v - lse).sum::<f64>() / vocab as f64;
            total += -(1.0 - smoothing) * (row[t] - lse) - smoothing * mean_logp;
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        Ok(self.push(
            Tensor::scalar(total / count as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                smoothing,
                count,
            },
            &[logits],
        ))
    }

    /// Propagates d`loss` back through the tape and adds each parameter
    /// leaf's gradient into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        for p in store.iter_mut() {
            p.use_count = 0;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                let param = store.get_mut(id);
                param.use_count += 1;
                if let Some(g) = &grads[i] {
                    param.grad.add_assign(g);
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Const | Op::Input | Op::Param(_) => {}
            Op::MatMul { a, b, trans_b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = g.shape()[1];
                if self.needs(*a) {
                    // dA = G * op(B)^T
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, bv.data(), !trans_b, &mut da, false);
                    accumulate(grads, *a, Tensor::from_parts(av.shape().to_vec(), da));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    if *trans_b {
                        // B is [n, k]: dB = G^T * A
                        gemm(n, m, k, gd, true, av.data(), false, &mut db, false);
                    } else {
                        gemm(k, m, n, av.data(), true, gd, false, &mut db, false);
                    }
                    accumulate(grads, *b, Tensor::from_parts(bv.shape().to_vec(), db));
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.needs(*v) {
                        accumulate(grads, *v, g.clone());
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(a, b), (b, a)] {
                    if self.needs(*v) {
                        let o = self.value(*other).data();
                        let d = gd.iter().zip(o).map(|(x, y)| x * y).collect();
                        accumulate(grads, *v, Tensor::from_parts(g.shape().to_vec(), d));
                    }
                }
            }
            Op::AddN(xs) => {
                for v in xs {
                    if self.needs(*v) {
                        accumulate(grads, *v, g.clone());
                    }
                }
            }
            Op::AddRow { x, bias } => {
                if self.needs(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if self.needs(*bias) {
                    let c = g.cols();
                    let mut db = vec![0.0; c];
                    for row in gd.chunks(c) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    accumulate(grads, *bias, Tensor::from_parts(vec![c], db));
                }
            }
            Op::Scale { x, factor } => {
                accumulate(grads, *x, g.map(|v| v * factor));
            }
            Op::MulConst { x, mask } => {
                let d = gd.iter().zip(mask).map(|(a, m)| a * m).collect();
                accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let d = gd
                    .iter()
                    .zip(xv)
                    .map(|(gv, &v)| if v > 0.0 { *gv } else { 0.0 })
                    .collect();
                accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = g.cols();
                if let Some(b) = bias {
                    let mut db = vec![0.0; c];
                    for row in gd.chunks(c) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    accumulate(grads, *b, Tensor::from_parts(vec![c], db));
                }
                if let Some(gn) = gain {
                    let mut dg = vec![0.0; c];
                    for (row, hrow) in gd.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += row[j] * hrow[j];
                        }
                    }
                    accumulate(grads, *gn, Tensor::from_parts(vec![c], dg));
                }
                if self.needs(*x) {
                    let gain_v = gain.map(|gn| self.value(gn).data());
                    let mut dx = vec![0.0; gd.len()];
                    let mut dxhat = vec![0.0; c];
                    for r in 0..inv_std.len() {
                        let grow = &gd[r * c..(r + 1) * c];
                        let hrow = &xhat[r * c..(r + 1) * c];
                        for j in 0..c {
                            dxhat[j] = grow[j] * gain_v.map_or(1.0, |gv| gv[j]);
                        }
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(hrow).map(|(a, b)| a * b).sum();
                        let k = inv_std[r] / c as f64;
                        for j in 0..c {
                            dx[r * c + j] = k * (c as f64 * dxhat[j] - s1 - hrow[j] * s2);
                        }
                    }
                    accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), dx));
                }
            }
            Op::SoftmaxRows(x) => {
                let c = g.cols();
                let p = node.value.data();
                let mut dx = vec![0.0; gd.len()];
                for ((drow, grow), prow) in dx.chunks_mut(c).zip(gd.chunks(c)).zip(p.chunks(c)) {
                    let s = dot(grow, prow);
                    for j in 0..c {
                        drow[j] = prow[j] * (grow[j] - s);
                    }
                }
                accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), dx));
            }
            Op::Sum(x) => {
                let s = g.item();
                accumulate(grads, *x, Tensor::full(self.value(*x).shape(), s));
            }
            Op::SumSquares(x) => {
                let s = g.item();
                accumulate(grads, *x, self.value(*x).map(|v| 2.0 * s * v));
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let d = tv.cols();
                let mut dt = vec![0.0; tv.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut dt[id * d..(id + 1) * d];
                    dst.iter_mut()
                        .zip(&gd[r * d..(r + 1) * d])
                        .for_each(|(a, b)| *a += b);
                }
                accumulate(grads, *table, Tensor::from_parts(tv.shape().to_vec(), dt));
            }
            Op::ConcatCols(xs) => {
                let rows = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for &x in xs {
                    let xv = self.value(x);
                    let c = xv.cols();
                    if self.needs(x) {
                        let mut dx = Vec::with_capacity(xv.numel());
                        for r in 0..rows {
                            dx.extend_from_slice(&gd[r * total + offset..r * total + offset + c]);
                        }
                        accumulate(grads, x, Tensor::from_parts(xv.shape().to_vec(), dx));
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let xv = self.value(x);
                    let n = xv.numel();
                    if self.needs(x) {
                        accumulate(
                            grads,
                            x,
                            Tensor::from_parts(
                                xv.shape().to_vec(),
                                gd[offset..offset + n].to_vec(),
                            ),
                        );
                    }
                    offset += n;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
                drop,
            } => self.attention_backward(*q, *k, *v, layout, probs, drop.as_deref(), gd, grads),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                smoothing,
                count,
            } => {
                let vocab = self.value(*logits).cols();
                let scale = g.item() / *count as f64;
                let uniform = smoothing / vocab as f64;
                let mut dl = vec![0.0; probs.len()];
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    let drow = &mut dl[r * vocab..(r + 1) * vocab];
                    let prow = &probs[r * vocab..(r + 1) * vocab];
                    for j in 0..vocab {
                        drow[j] = (prow[j] - uniform) * scale;
                    }
                    drow[t] -= (1.0 - smoothing) * scale;
                }
                accumulate(
                    grads,
                    *logits,
                    Tensor::from_parts(self.value(*logits).shape().to_vec(), dl),
                );
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttnLayout,
        probs: &[f64],
        drop: Option<&[f64]>,
        gd: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let AttnLayout {
            batch,
            q_len,
            k_len,
            heads,
            ..
        } = *layout;
        let qc = qv.cols();
        let vc = vv.cols();
        let dk = qc / heads;
        let dv = vc / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut dq = vec![0.0; qd.len()];
        let mut dkey = vec![0.0; kd.len()];
        let mut dval = vec![0.0; vd.len()];
        let mut dp = vec![0.0; k_len];
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..q_len {
                    let base = ((b * heads + h) * q_len + i) * k_len;
                    let p = &probs[base..base + k_len];
                    let grow = &gd[(b * q_len + i) * vc + h * dv..][..dv];
                    for j in 0..k_len {
                        if p[j] == 0.0 {
                            dp[j] = 0.0;
                            continue;
                        }
                        let m = drop.map_or(1.0, |d| d[base + j]);
                        let voff = (b * k_len + j) * vc + h * dv;
                        dp[j] = dot(grow, &vd[voff..voff + dv]) * m;
                        let coeff = p[j] * m;
                        dval[voff..voff + dv]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(a, gv)| *a += coeff * gv);
                    }
                    let s: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    let qoff = (b * q_len + i) * qc + h * dk;
                    for j in 0..k_len {
                        if p[j] == 0.0 {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - s) * scale;
                        let koff = (b * k_len + j) * qc + h * dk;
                        for t in 0..dk {
                            dq[qoff + t] += ds * kd[koff + t];
                            dkey[koff + t] += ds * qd[qoff + t];
                        }
                    }
                }
            }
        }
        if self.needs(q) {
            accumulate(grads, q, Tensor::from_parts(qv.shape().to_vec(), dq));
        }
        if self.needs(k) {
            accumulate(grads, k, Tensor::from_parts(kv.shape().to_vec(), dkey));
        }
        if self.needs(v) {
            accumulate(grads, v, Tensor::from_parts(vv.shape().to_vec(), dval));
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Reborrows an optional RNG for a nested call.
pub fn reborrow<'a>(rng: &'a mut Option<&mut dyn RngCore>) -> Option<&'a mut dyn RngCore> {
    match rng {
        Some(r) => Some(&mut **r),
        None => None,
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn dropout_mask(n: usize, rate: f64, rng: &mut dyn RngCore) -> Vec<f64> {
    let keep = 1.0 - rate;
    (0..n)
        .map(|_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_hand_cases() {
        let mut tape = Tape::new();
        let a = tape.input(mat(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let b = tape.input(mat(&[vec![2.0, 3.0], vec![4.0, 5.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[2.0, 3.0, 4.0, 5.0]);

        let a = tape.input(mat(&[vec![1.0, 2.0]]));
        let b = tape.input(mat(&[vec![3.0], vec![4.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
        assert!(tape.matmul(b, b).is_err());
    }

    #[test]
    fn relu_values_and_grads() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);

        let x = tape.input(Tensor::vector(vec![-1.0, 3.0]));
        let y = tape.relu(x);
        let s = tape.sum(y);
        let grads = tape.backward(s, &mut store).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![-1.0, -0.5, -3.0]));
        let y = tape.relu(x);
        let s = tape.sum(y);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);
        let grads = tape.backward(s, &mut store).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn layer_norm_cases() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![1.0, 1.0, 1.0, 1.0]));
        let y = tape.layer_norm(x, None, None, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 4]);

        let x = tape.input(Tensor::vector(vec![0.0, 2.0]));
        let y = tape.layer_norm(x, None, None, 1e-5).unwrap();
        let expected = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((tape.value(y).data()[0] + expected).abs() < 1e-15);
        assert!((tape.value(y).data()[1] - 1.0).abs() < 1e-5);

        let x = tape.input(Tensor::vector(vec![3.0]));
        assert!(matches!(
            tape.layer_norm(x, None, None, 1e-5),
            Err(Error::Degenerate { .. })
        ));
    }

    #[test]
    fn softmax_cases() {
        let mut tape = Tape::new();
        let x = tape.input(mat(&[
            vec![0.0, 0.0],
            vec![1000.0, 1000.0],
            vec![0.0, 3f64.ln()],
        ]));
        let y = tape.softmax_rows(x).unwrap();
        let d = tape.value(y).data();
        assert_eq!(&d[..4], &[0.5, 0.5, 0.5, 0.5]);
        assert!((d[4] - 0.25).abs() < 1e-15 && (d[5] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(
            tape.backward(x, &mut store),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn gradient_sums_over_use_sites() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(vec![0.5, -1.0]));
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.constant(Tensor::vector(vec![3.0, -4.0]));
        let w1 = tape.param(&store, w);
        let wx = tape.mul(w1, x).unwrap();
        let s1 = tape.sum(wx);
        let w2 = tape.param(&store, w);
        let wy = tape.mul(w2, y).unwrap();
        let s2 = tape.sum(wy);
        let loss = tape.add(s1, s2).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(w).grad.data(), &[4.0, -2.0]);
        assert_eq!(store.get(w).use_count, 2);
        assert_eq!(tape.use_count(w), 2);

        store.zero_grad();
        assert_eq!(store.get(w).grad.data(), &[0.0, 0.0]);
        assert_eq!(store.get(w).use_count, 0);
    }

    #[test]
    fn attention_rejects_bad_mask() {
        let mut tape = Tape::new();
        let q = tape.input(Tensor::zeros(&[2, 4]));
        let layout = AttnLayout::new(1, 2, 2, 1).with_allowed(vec![true; 3]);
        assert!(tape.attention(q, q, q, layout, 0.0, None).is_err());
        let layout = AttnLayout::new(1, 2, 2, 1).with_allowed(vec![false, false, true, true]);
        assert!(matches!(
            tape.attention(q, q, q, layout, 0.0, None),
            Err(Error::Degenerate { .. })
        ));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[2, 4]));
        let loss = tape.cross_entropy(x, &[Some(1), None], 0.0).unwrap();
        assert!((tape.value(loss).item() - 4f64.ln()).abs() < 1e-15);
        let grads = tape.backward(loss, &mut store).unwrap();
        assert_eq!(
            grads.get(x).unwrap().data(),
            &[0.25, -0.75, 0.25, 0.25, 0.0, 0.0, 0.0, 0.0]
        );
    }
}
