//! Dynamic tape for reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each op appends a node that
//! owns its output value plus whatever the backward rule needs; `backward`
//! walks the nodes once, in reverse order, accumulating adjoints that start
//! at zero.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{self, gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One `coef * -log softmax(logits[row])[col]` term of a [`Tape::softmax_nll`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NllPick {
    pub row: usize,
    pub col: usize,
    pub coef: f64,
}

/// Contiguous block of rows attending only to itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Reshape(Var),
    Softmax(Var),
    SoftmaxNll {
        logits: Var,
        picks: Vec<NllPick>,
        probs: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<Segment>,
        heads: usize,
        probs: Vec<f64>,
    },
    Sum(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded computation; single-threaded, one per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Adjoint of `var`, or `None` when the output does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
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

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value produced by node {}",
                self.nodes.len()
            )));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::dim(
                "add",
                format!("{:?} vs {:?}", x.shape(), y.shape()),
            ));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, Op::Add(a, b))
    }

    /// Adds a `[C]` bias to every row of an `[R, C]` matrix.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2("add_bias")?;
        if self.value(b).shape() != [cols] {
            return Err(Error::dim(
                "add_bias",
                format!("bias {:?} for {cols} columns", self.value(b).shape()),
            ));
        }
        let mut out = self.value(x).clone();
        let bias = self.value(b).data();
        for r in 0..rows {
            for (o, bv) in out.data_mut()[r * cols..(r + 1) * cols].iter_mut().zip(bias) {
                *o += bv;
            }
        }
        self.push(out, Op::AddBias(x, b))
    }

    /// `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).scaled(c);
        self.push(out, Op::Scale(x, c))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| tensor::gelu(v)).collect();
        let out = Tensor::new(src.shape().to_vec(), data)?;
        self.push(out, Op::Gelu(x))
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` of shape `[C]`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2("layernorm")?;
        if self.value(gamma).shape() != [cols] || self.value(beta).shape() != [cols] {
            return Err(Error::dim("layernorm", "affine parameters must be [cols]"));
        }
        let (xhat, rstd) = tensor::layernorm_rows(self.value(x).data(), rows, cols);
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] = xhat[r * cols + c] * g[c] + bt[c];
            }
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// Looks up one row of `table` per id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, cols) = self.value(table).dims2("embedding")?;
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index {
                    what: "embedding table",
                    index: id,
                    size: vocab,
                });
            }
            data.extend_from_slice(self.value(table).row(id));
        }
        let out = Tensor::new(vec![ids.len(), cols], data)?;
        self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, cols) = self.value(x).dims2("gather_rows")?;
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= n {
                return Err(Error::Index {
                    what: "rows",
                    index: r,
                    size: n,
                });
            }
            data.extend_from_slice(self.value(x).row(r));
        }
        let out = Tensor::new(vec![rows.len(), cols], data)?;
        self.push(
            out,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        self.push(out, Op::Reshape(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let axis = src.rank().saturating_sub(1);
        let out = tensor::softmax(src, axis)?;
        self.push(out, Op::Softmax(x))
    }

    /// Scalar `sum_k coef_k * -log softmax(logits[row_k])[col_k]`.
    pub fn softmax_nll(&mut self, logits: Var, picks: &[NllPick]) -> Result<Var> {
        let (rows, cols) = self.value(logits).dims2("softmax_nll")?;
        for p in picks {
            if p.row >= rows {
                return Err(Error::Index {
                    what: "logit rows",
                    index: p.row,
                    size: rows,
                });
            }
            if p.col >= cols {
                return Err(Error::Index {
                    what: "vocabulary",
                    index: p.col,
                    size: cols,
                });
            }
        }
        let src = self.value(logits).data();
        let mut probs = src.to_vec();
        for r in 0..rows {
            tensor::softmax_in_place(&mut probs[r * cols..(r + 1) * cols]);
        }
        let mut total = 0.0;
        for p in picks {
            let lp = tensor::log_softmax(&src[p.row * cols..(p.row + 1) * cols])[p.col];
            total -= p.coef * lp;
        }
        self.push(
            Tensor::scalar(total),
            Op::SoftmaxNll {
                logits,
                picks: picks.to_vec(),
                probs,
            },
        )
    }

    /// Cross-entropy of a single logit row against `target`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let shape = self.value(logits).shape().to_vec();
        let row = match shape.as_slice() {
            [c] => self.reshape(logits, vec![1, *c])?,
            [1, _] => logits,
            other => {
                return Err(Error::dim(
                    "cross_entropy",
                    format!("expected one logit row, got {other:?}"),
                ))
            }
        };
        self.softmax_nll(
            row,
            &[NllPick {
                row: 0,
                col: target,
                coef: 1.0,
            }],
        )
    }

    /// Multi-head scaled dot-product self-attention, block-diagonal over
    /// `segments`. `q`, `k`, `v` are `[T, H]` with `H` divisible by `heads`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Segment],
        heads: usize,
    ) -> Result<Var> {
        let (t, h) = self.value(q).dims2("attention")?;
        if self.value(k).shape() != [t, h] || self.value(v).shape() != [t, h] {
            return Err(Error::dim("attention", "q, k, v shapes differ"));
        }
        if heads == 0 || h % heads != 0 {
            return Err(Error::dim(
                "attention",
                format!("hidden {h} not divisible by {heads} heads"),
            ));
        }
        let covered: usize = segments.iter().map(|s| s.len).sum();
        if segments.iter().any(|s| s.start + s.len > t) || covered > t {
            return Err(Error::dim("attention", "segments exceed row count"));
        }
        let d = h / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut out = vec![0.0; t * h];
        let mut probs = Vec::with_capacity(segments.iter().map(|s| s.len * s.len).sum::<usize>() * heads);
        let mut row = Vec::new();
        for seg in segments {
            let n = seg.len;
            for head in 0..heads {
                let off = head * d;
                for i in 0..n {
                    let qi = &qd[(seg.start + i) * h + off..][..d];
                    row.clear();
                    for j in 0..n {
                        let kj = &kd[(seg.start + j) * h + off..][..d];
                        row.push(dot(qi, kj) * scale);
                    }
                    tensor::softmax_in_place(&mut row);
                    let oi = &mut out[(seg.start + i) * h + off..][..d];
                    for (j, &p) in row.iter().enumerate() {
                        let vj = &vd[(seg.start + j) * h + off..][..d];
                        for (o, vv) in oi.iter_mut().zip(vj) {
                            *o += p * vv;
                        }
                    }
                    probs.extend_from_slice(&row);
                }
            }
        }
        let out = Tensor::new(vec![t, h], out)?;
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                heads,
                probs,
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Inverted dropout with keep-scale `1/(1-p)`. `p == 0` is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::Argument(format!("dropout rate {p} must be < 1")));
        }
        let keep = 1.0 / (1.0 - p);
        let src = self.value(x);
        let mask: Vec<f64> = (0..src.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = src.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::new(src.shape().to_vec(), data)?;
        self.push(out, Op::Dropout { x, mask })
    }

    /// Reverse sweep from a scalar `output`, seeded with adjoint 1.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::dim(
                "backward",
                format!("output must be scalar, got {:?}", self.value(output).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::filled(self.value(output).shape(), 1.0));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                // dA = G B^T, dB = A^T G
                let ga = acc(grads, self, *a);
                gemm(m, n, k, g.data(), false, self.value(*b).data(), true, ga.data_mut(), 1.0);
                let gb = acc(grads, self, *b);
                gemm(k, m, n, self.value(*a).data(), true, g.data(), false, gb.data_mut(), 1.0);
            }
            Op::Add(a, b) => {
                acc(grads, self, *a).add_assign(g);
                acc(grads, self, *b).add_assign(g);
            }
            Op::AddBias(x, b) => {
                acc(grads, self, *x).add_assign(g);
                let cols = self.value(*b).len();
                let gb = acc(grads, self, *b);
                for chunk in g.data().chunks(cols) {
                    for (o, v) in gb.data_mut().iter_mut().zip(chunk) {
                        *o += v;
                    }
                }
            }
            Op::Scale(x, c) => {
                let gx = acc(grads, self, *x);
                for (o, v) in gx.data_mut().iter_mut().zip(g.data()) {
                    *o += c * v;
                }
            }
            Op::Gelu(x) => {
                let xs = self.value(*x).data().to_vec();
                let gx = acc(grads, self, *x);
                for ((o, v), xv) in gx.data_mut().iter_mut().zip(g.data()).zip(xs) {
                    *o += v * tensor::gelu_grad(xv);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let cols = self.value(*gamma).len();
                let rows = rstd.len();
                let gam = self.value(*gamma).data().to_vec();
                {
                    let gg = acc(grads, self, *gamma);
                    for r in 0..rows {
                        for c in 0..cols {
                            gg.data_mut()[c] += g.data()[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                }
                {
                    let gb = acc(grads, self, *beta);
                    for chunk in g.data().chunks(cols) {
                        for (o, v) in gb.data_mut().iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                }
                let gx = acc(grads, self, *x);
                let inv_n = 1.0 / cols as f64;
                let mut dxhat = vec![0.0; cols];
                for r in 0..rows {
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let xr = &xhat[r * cols..(r + 1) * cols];
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for c in 0..cols {
                        dxhat[c] = gr[c] * gam[c];
                        mean_d += dxhat[c];
                        mean_dx += dxhat[c] * xr[c];
                    }
                    mean_d *= inv_n;
                    mean_dx *= inv_n;
                    let out = &mut gx.data_mut()[r * cols..(r + 1) * cols];
                    for c in 0..cols {
                        out[c] += rstd[r] * (dxhat[c] - mean_d - xr[c] * mean_dx);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let cols = self.value(*table).shape()[1];
                let gt = acc(grads, self, *table);
                for (i, &id) in ids.iter().enumerate() {
                    let src = &g.data()[i * cols..(i + 1) * cols];
                    for (o, v) in gt.data_mut()[id * cols..(id + 1) * cols].iter_mut().zip(src) {
                        *o += v;
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                let cols = self.value(*x).shape()[1];
                let gx = acc(grads, self, *x);
                for (i, &r) in rows.iter().enumerate() {
                    let src = &g.data()[i * cols..(i + 1) * cols];
                    for (o, v) in gx.data_mut()[r * cols..(r + 1) * cols].iter_mut().zip(src) {
                        *o += v;
                    }
                }
            }
            Op::Reshape(x) => {
                let gx = acc(grads, self, *x);
                for (o, v) in gx.data_mut().iter_mut().zip(g.data()) {
                    *o += v;
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let cols = *node.value.shape().last().unwrap_or(&1);
                let gx = acc(grads, self, *x);
                for ((gr, yr), out) in g
                    .data()
                    .chunks(cols)
                    .zip(y.chunks(cols))
                    .zip(gx.data_mut().chunks_mut(cols))
                {
                    let dotp = dot(gr, yr);
                    for c in 0..cols {
                        out[c] += yr[c] * (gr[c] - dotp);
                    }
                }
            }
            Op::SoftmaxNll {
                logits,
                picks,
                probs,
            } => {
                let cols = self.value(*logits).shape()[1];
                let up = g.item();
                let gl = acc(grads, self, *logits);
                for p in picks {
                    let w = up * p.coef;
                    let row = &probs[p.row * cols..(p.row + 1) * cols];
                    let out = &mut gl.data_mut()[p.row * cols..(p.row + 1) * cols];
                    for c in 0..cols {
                        out[c] += w * row[c];
                    }
                    out[p.col] -= w;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            } => self.attention_backward(g, *q, *k, *v, segments, *heads, probs, grads),
            Op::Sum(x) => {
                let up = g.item();
                for o in acc(grads, self, *x).data_mut() {
                    *o += up;
                }
            }
            Op::Dropout { x, mask } => {
                let gx = acc(grads, self, *x);
                for ((o, v), m) in gx.data_mut().iter_mut().zip(g.data()).zip(mask) {
                    *o += v * m;
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Tensor,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Segment],
        heads: usize,
        probs: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let (t, h) = (self.value(q).shape()[0], self.value(q).shape()[1]);
        let d = h / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let gd = g.data();
        let mut dq = vec![0.0; t * h];
        let mut dk = vec![0.0; t * h];
        let mut dv = vec![0.0; t * h];
        let mut cursor = 0;
        let mut dp = Vec::new();
        for seg in segments {
            let n = seg.len;
            for head in 0..heads {
                let off = head * d;
                for i in 0..n {
                    let p = &probs[cursor..cursor + n];
                    cursor += n;
                    let gi = &gd[(seg.start + i) * h + off..][..d];
                    dp.clear();
                    for j in 0..n {
                        let vj = &vd[(seg.start + j) * h + off..][..d];
                        dp.push(dot(gi, vj));
                        let dvj = &mut dv[(seg.start + j) * h + off..][..d];
                        for (o, gv) in dvj.iter_mut().zip(gi) {
                            *o += p[j] * gv;
                        }
                    }
                    let mix = dot(p, &dp);
                    let qi = &qd[(seg.start + i) * h + off..][..d];
                    for j in 0..n {
                        let ds = p[j] * (dp[j] - mix) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &kd[(seg.start + j) * h + off..][..d];
                        let dqi = &mut dq[(seg.start + i) * h + off..][..d];
                        for (o, kv) in dqi.iter_mut().zip(kj) {
                            *o += ds * kv;
                        }
                        let dkj = &mut dk[(seg.start + j) * h + off..][..d];
                        for (o, qv) in dkj.iter_mut().zip(qi) {
                            *o += ds * qv;
                        }
                    }
                }
            }
        }
        for (var, delta) in [(q, dq), (k, dk), (v, dv)] {
            let gx = acc(grads, self, var);
            for (o, dlt) in gx.data_mut().iter_mut().zip(delta) {
                *o += dlt;
            }
        }
    }
}

fn acc<'a>(grads: &'a mut [Option<Tensor>], tape: &Tape, v: Var) -> &'a mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(tape.value(v).shape()))
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Default central-difference step.
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Compares the tape gradient of a scalar function against central
/// differences. Returns the max over coordinates of
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, params: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_with_step(f, params, GRAD_CHECK_STEP)
}

pub fn grad_check_with_step<F>(f: F, params: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(params.clone())?;
    let y = f(&mut tape, x)?;
    let grads = tape.backward(y)?;
    let analytic = grads
        .get(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(params.shape()));

    let eval = |p: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(p)?;
        let y = f(&mut tape, x)?;
        Ok(tape.value(y).item())
    };
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let mut plus = params.clone();
        plus.data_mut()[i] += h;
        let mut minus = params.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matmul_gradients_match_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[4, 2], &mut rng);
        let w = random(&[3, 2], &mut rng);
        let bb = b.clone();
        let ww = w.clone();
        let err = grad_check(
            move |t, x| {
                let bv = t.leaf(bb.clone())?;
                let y = t.matmul(x, bv)?;
                weighted_sum(t, y, &ww)
            },
            &a,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
        let err = grad_check(
            move |t, x| {
                let av = t.leaf(a.clone())?;
                let y = t.matmul(av, x)?;
                weighted_sum(t, y, &w)
            },
            &b,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    // sum(y * w) written with primitives: flatten both and use a matmul.
    fn weighted_sum(t: &mut Tape, y: Var, w: &Tensor) -> Result<Var> {
        let n = w.len();
        let yr = t.reshape(y, vec![1, n])?;
        let wc = t.leaf(w.reshape(vec![n, 1])?)?;
        let s = t.matmul(yr, wc)?;
        t.sum(s)
    }

    #[test]
    fn cross_entropy_uniform_and_peaked() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![0.0; 32])).unwrap();
        let l = t.cross_entropy(x, 5).unwrap();
        assert!((t.value(l).item() - 32f64.ln()).abs() < 1e-12);

        let mut logits = vec![0.0; 32];
        logits[3] = 1e6;
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(logits)).unwrap();
        let l = t.cross_entropy(x, 3).unwrap();
        assert!(t.value(l).item().abs() < 1e-12);
        assert!(matches!(t.cross_entropy(x, 32), Err(Error::Index { .. })));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = random(&[7], &mut rng);
        let mut t = Tape::new();
        let x = t.leaf(logits.clone()).unwrap();
        let l = t.cross_entropy(x, 2).unwrap();
        let g = t.backward(l).unwrap();
        let p = tensor::softmax(&logits, 0).unwrap();
        for (i, (gv, pv)) in g.get(x).unwrap().data().iter().zip(p.data()).enumerate() {
            let expect = pv - if i == 2 { 1.0 } else { 0.0 };
            assert!((gv - expect).abs() < 1e-14);
        }
        let err = grad_check(|t, x| t.cross_entropy(x, 2), &logits).unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn softmax_then_nll_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = random(&[2, 5], &mut rng);
        let w = random(&[2, 5], &mut rng);
        let err = grad_check(
            move |t, x| {
                let s = t.softmax(x)?;
                let y = t.scale(s, 3.0)?;
                let z = t.softmax_nll(
                    y,
                    &[
                        NllPick { row: 0, col: 1, coef: 1.0 },
                        NllPick { row: 1, col: 4, coef: -0.5 },
                    ],
                )?;
                let extra = weighted_sum(t, s, &w)?;
                t.add(z, extra)
            },
            &logits,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn layernorm_gelu_bias_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = random(&[3, 6], &mut rng);
        let gamma = random(&[6], &mut rng);
        let beta = random(&[6], &mut rng);
        let w = random(&[3, 6], &mut rng);
        let (g2, b2, w2) = (gamma.clone(), beta.clone(), w.clone());
        let err = grad_check(
            move |t, x| {
                let g = t.leaf(g2.clone())?;
                let b = t.leaf(b2.clone())?;
                let y = t.layernorm(x, g, b)?;
                let y = t.gelu(y)?;
                let y = t.add_bias(y, b)?;
                weighted_sum(t, y, &w2)
            },
            &x0,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
        let err = grad_check(
            move |t, g| {
                let x = t.leaf(x0.clone())?;
                let b = t.leaf(beta.clone())?;
                let y = t.layernorm(x, g, b)?;
                weighted_sum(t, y, &w)
            },
            &gamma,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn layernorm_of_constant_rows_is_beta() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::filled(&[2, 4], 7.0)).unwrap();
        let g = t.leaf(Tensor::filled(&[4], 2.0)).unwrap();
        let b = t.leaf(Tensor::zeros(&[4])).unwrap();
        let y = t.layernorm(x, g, b).unwrap();
        assert!(t.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn embedding_backward_scatters_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let table = random(&[5, 3], &mut rng);
        let w = random(&[4, 3], &mut rng);
        let ids = [1usize, 3, 1, 0];
        let w2 = w.clone();
        let err = grad_check(
            move |t, x| {
                let e = t.embedding(x, &ids)?;
                weighted_sum(t, e, &w2)
            },
            &table,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");

        let mut t = Tape::new();
        let x = t.leaf(table).unwrap();
        let e = t.embedding(x, &ids).unwrap();
        let s = weighted_sum(&mut t, e, &w).unwrap();
        let g = t.backward(s).unwrap();
        let g = g.get(x).unwrap();
        // row 2 and row 4 are never looked up
        assert!(g.row(2).iter().chain(g.row(4)).all(|v| *v == 0.0));
        for c in 0..3 {
            assert!((g.row(1)[c] - (w.row(0)[c] + w.row(2)[c])).abs() < 1e-15);
        }
        assert!(t.embedding(x, &[5]).is_err());
    }

    #[test]
    fn attention_gradients_match_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q0 = random(&[5, 4], &mut rng);
        let k0 = random(&[5, 4], &mut rng);
        let v0 = random(&[5, 4], &mut rng);
        let w = random(&[5, 4], &mut rng);
        let segs = [Segment { start: 0, len: 3 }, Segment { start: 3, len: 2 }];
        for which in 0..3 {
            let (q, k, v, w) = (q0.clone(), k0.clone(), v0.clone(), w.clone());
            let point = [&q0, &k0, &v0][which].clone();
            let err = grad_check(
                move |t, x| {
                    let mut vars = [None, None, None];
                    for (i, src) in [&q, &k, &v].into_iter().enumerate() {
                        vars[i] = Some(if i == which { x } else { t.leaf(src.clone())? });
                    }
                    let y = t.attention(
                        vars[0].unwrap(),
                        vars[1].unwrap(),
                        vars[2].unwrap(),
                        &segs,
                        2,
                    )?;
                    weighted_sum(t, y, &w)
                },
                &point,
            )
            .unwrap();
            assert!(err <= 1e-6, "input {which}: {err}");
        }
    }

    #[test]
    fn attention_segments_are_isolated() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&[4, 2], &mut rng);
        let segs = [Segment { start: 0, len: 2 }, Segment { start: 2, len: 2 }];
        let run = |x: &Tensor| {
            let mut t = Tape::new();
            let v = t.leaf(x.clone()).unwrap();
            let y = t.attention(v, v, v, &segs, 1).unwrap();
            t.value(y).clone()
        };
        let base = run(&x);
        let mut poked = x.clone();
        poked.data_mut()[7] += 1.0;
        let after = run(&poked);
        assert_eq!(base.row(0), after.row(0));
        assert_eq!(base.row(1), after.row(1));
    }

    #[test]
    fn linear_function_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = random(&[6], &mut rng);
        let err = grad_check(
            |t, x| {
                let y = t.scale(x, 2.5)?;
                t.sum(y)
            },
            &p,
        )
        .unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn backward_is_linear_in_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = random(&[2, 4], &mut rng);
        let mk = |which: u8| {
            let mut t = Tape::new();
            let x = t.leaf(p.clone()).unwrap();
            let a = t.softmax_nll(x, &[NllPick { row: 0, col: 1, coef: 1.0 }]).unwrap();
            let b = t.softmax_nll(x, &[NllPick { row: 1, col: 2, coef: 1.0 }]).unwrap();
            let out = match which {
                0 => a,
                1 => b,
                _ => t.add(a, b).unwrap(),
            };
            t.backward(out).unwrap().get(x).unwrap().clone()
        };
        let (ga, gb, gab) = (mk(0), mk(1), mk(2));
        for i in 0..8 {
            assert!((ga.data()[i] + gb.data()[i] - gab.data()[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn dropout_zero_rate_is_identity_and_masks_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut t = Tape::new();
        let x = t.leaf(Tensor::filled(&[50], 1.0)).unwrap();
        assert_eq!(t.dropout(x, 0.0, &mut rng).unwrap(), x);
        let y = t.dropout(x, 0.5, &mut rng).unwrap();
        let s = t.sum(y).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), t.value(y).data());
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut t = Tape::new();
        assert!(matches!(
            t.leaf(Tensor::vector(vec![f64::NAN])),
            Err(Error::Numeric(_))
        ));
    }
}
