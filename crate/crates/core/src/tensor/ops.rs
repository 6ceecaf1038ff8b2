//! Differentiable operations recorded on a [`Graph`].
//!
//! Broadcasting is limited to three explicit cases: a trailing-axis vector
//! applied to every row (`*_row`), a per-row scalar column (`mul_col`), and a
//! constant scalar (`scale`, `add_scalar`).

use super::graph::{accumulate, Node};
use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Attention flavour, mirroring the outlier-mitigation options of the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionVariant {
    /// `softmax(QK^T / sqrt(d)) V`
    Standard,
    /// Standard attention plus a learned value bias added to every output row.
    ValueGating,
    /// Keys and values augmented with one learned slot each.
    AttentionBias,
}

/// Layout of a packed multi-sequence attention call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionSpec {
    pub n_seq: usize,
    pub seq_len: usize,
    pub heads: usize,
    pub variant: AttentionVariant,
}

pub(crate) enum Op<S: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sqr(Var),
    Matmul(Var, Var),
    MatmulNt(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    MeanLast(Var),
    Softmax { x: Var, temp: S },
    LogSoftmax { x: Var, temp: S, probs: Vec<S> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<S>, rstd: Vec<S> },
    L2Normalize { x: Var, eps: S, norms: Vec<S> },
    RowNorm(Var),
    Silu(Var),
    Gelu(Var),
    SwiGlu(Var, Var),
    SoftCrossEntropy { logits: Var, targets: Vec<S>, temp: S, probs: Vec<S> },
    Attention { q: Var, k: Var, v: Var, kb: Option<Var>, vb: Option<Var>, spec: AttentionSpec, probs: Vec<S> },
    Rope { x: Var, cos: Vec<S>, sin: Vec<S>, spec: RopeLayout },
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct RopeLayout {
    n_seq: usize,
    seq_len: usize,
    heads: usize,
    head_dim: usize,
}

impl<S: Scalar> Op<S> {
    pub(crate) fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | AddRow(a, b) | MulRow(a, b)
            | MulCol(a, b) | Matmul(a, b) | MatmulNt(a, b) | SwiGlu(a, b) => vec![*a, *b],
            Scale(x, _) | AddScalar(x) | Exp(x) | Log(x) | Sqr(x) | Transpose(x) | Reshape(x)
            | Sum(x) | Mean(x) | SumLast(x) | MeanLast(x) | RowNorm(x) | Silu(x) | Gelu(x) => {
                vec![*x]
            }
            Concat { parts, .. } => parts.clone(),
            Slice { x, .. }
            | GatherRows { x, .. }
            | Softmax { x, .. }
            | LogSoftmax { x, .. }
            | L2Normalize { x, .. }
            | Rope { x, .. } => vec![*x],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            SoftCrossEntropy { logits, .. } => vec![*logits],
            Attention { q, k, v, kb, vb, .. } => {
                let mut p = vec![*q, *k, *v];
                p.extend(kb.iter().copied());
                p.extend(vb.iter().copied());
                p
            }
        }
    }

    pub(crate) fn backward(
        &self,
        nodes: &[Node<S>],
        out: &Tensor<S>,
        g: &[S],
        grads: &mut [Option<Vec<S>>],
    ) {
        use Op::*;
        let val = |v: &Var| &nodes[v.0].value;
        match self {
            Leaf => {}
            Add(a, b) => {
                accumulate(nodes, grads, *a, |d| add_into(d, g));
                accumulate(nodes, grads, *b, |d| add_into(d, g));
            }
            Sub(a, b) => {
                accumulate(nodes, grads, *a, |d| add_into(d, g));
                accumulate(nodes, grads, *b, |d| {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g)
                });
            }
            Mul(a, b) => {
                let (av, bv) = (val(a).data(), val(b).data());
                accumulate(nodes, grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
                accumulate(nodes, grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
            Div(a, b) => {
                let (av, bv) = (val(a).data(), val(b).data());
                accumulate(nodes, grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] / bv[i];
                    }
                });
                accumulate(nodes, grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                    }
                });
            }
            AddRow(x, v) => {
                let n = val(v).len();
                accumulate(nodes, grads, *x, |d| add_into(d, g));
                accumulate(nodes, grads, *v, |d| {
                    for row in g.chunks(n) {
                        add_into(d, row);
                    }
                });
            }
            MulRow(x, v) => {
                let n = val(v).len();
                let (xv, vv) = (val(x).data(), val(v).data());
                accumulate(nodes, grads, *x, |d| {
                    for (drow, grow) in d.chunks_mut(n).zip(g.chunks(n)) {
                        for j in 0..n {
                            drow[j] += grow[j] * vv[j];
                        }
                    }
                });
                accumulate(nodes, grads, *v, |d| {
                    for (xrow, grow) in xv.chunks(n).zip(g.chunks(n)) {
                        for j in 0..n {
                            d[j] += grow[j] * xrow[j];
                        }
                    }
                });
            }
            MulCol(x, c) => {
                let (xv, cv) = (val(x).data(), val(c).data());
                let n = xv.len() / cv.len();
                accumulate(nodes, grads, *x, |d| {
                    for (i, (drow, grow)) in d.chunks_mut(n).zip(g.chunks(n)).enumerate() {
                        for j in 0..n {
                            drow[j] += grow[j] * cv[i];
                        }
                    }
                });
                accumulate(nodes, grads, *c, |d| {
                    for (i, (xrow, grow)) in xv.chunks(n).zip(g.chunks(n)).enumerate() {
                        d[i] += dot(xrow, grow);
                    }
                });
            }
            Scale(x, s) => accumulate(nodes, grads, *x, |d| {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *s)
            }),
            AddScalar(x) => accumulate(nodes, grads, *x, |d| add_into(d, g)),
            Exp(x) => {
                let y = out.data();
                accumulate(nodes, grads, *x, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * y[i];
                    }
                });
            }
            Log(x) => {
                let xv = val(x).data();
                accumulate(nodes, grads, *x, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] / xv[i];
                    }
                });
            }
            Sqr(x) => {
                let xv = val(x).data();
                let two = S::c(2.0);
                accumulate(nodes, grads, *x, |d| {
                    for i in 0..d.len() {
                        d[i] += two * g[i] * xv[i];
                    }
                });
            }
            Matmul(a, b) => {
                let (at, bt) = (val(a), val(b));
                let (m, k, n) = (at.shape()[0], at.shape()[1], bt.shape()[1]);
                // dA = dC B^T, dB = A^T dC
                accumulate(nodes, grads, *a, |d| {
                    S::gemm(m, n, k, S::one(), g, n as isize, 1, bt.data(), 1, n as isize, S::one(), d, k as isize, 1)
                });
                accumulate(nodes, grads, *b, |d| {
                    S::gemm(k, m, n, S::one(), at.data(), 1, k as isize, g, n as isize, 1, S::one(), d, n as isize, 1)
                });
            }
            MatmulNt(a, b) => {
                // C = A B^T with A: m x k, B: n x k
                let (at, bt) = (val(a), val(b));
                let (m, k, n) = (at.shape()[0], at.shape()[1], bt.shape()[0]);
                accumulate(nodes, grads, *a, |d| {
                    S::gemm(m, n, k, S::one(), g, n as isize, 1, bt.data(), k as isize, 1, S::one(), d, k as isize, 1)
                });
                accumulate(nodes, grads, *b, |d| {
                    S::gemm(n, m, k, S::one(), g, 1, n as isize, at.data(), k as isize, 1, S::one(), d, k as isize, 1)
                });
            }
            Transpose(x) => {
                let (r, c) = (val(x).shape()[0], val(x).shape()[1]);
                accumulate(nodes, grads, *x, |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Reshape(x) => accumulate(nodes, grads, *x, |d| add_into(d, g)),
            Concat { parts, axis } => {
                if *axis == 0 {
                    let mut offset = 0;
                    for p in parts {
                        let len = val(p).len();
                        accumulate(nodes, grads, *p, |d| add_into(d, &g[offset..offset + len]));
                        offset += len;
                    }
                } else {
                    let total = out.shape()[1];
                    let mut col = 0;
                    for p in parts {
                        let w = val(p).shape()[1];
                        accumulate(nodes, grads, *p, |d| {
                            for (drow, grow) in d.chunks_mut(w).zip(g.chunks(total)) {
                                add_into(drow, &grow[col..col + w]);
                            }
                        });
                        col += w;
                    }
                }
            }
            Slice { x, axis, start } => {
                let xs = val(x).shape();
                if *axis == 0 {
                    let c: usize = xs[1..].iter().product();
                    accumulate(nodes, grads, *x, |d| add_into(&mut d[start * c..start * c + g.len()], g));
                } else {
                    let (cols, w) = (xs[1], out.shape()[1]);
                    accumulate(nodes, grads, *x, |d| {
                        for (drow, grow) in d.chunks_mut(cols).zip(g.chunks(w)) {
                            add_into(&mut drow[*start..start + w], grow);
                        }
                    });
                }
            }
            GatherRows { x, idx } => {
                let c = val(x).rows_cols().1;
                accumulate(nodes, grads, *x, |d| {
                    for (r, &src) in idx.iter().enumerate() {
                        add_into(&mut d[src * c..(src + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                });
            }
            Sum(x) => accumulate(nodes, grads, *x, |d| d.iter_mut().for_each(|d| *d += g[0])),
            Mean(x) => {
                let n = S::c(val(x).len() as f64);
                accumulate(nodes, grads, *x, |d| d.iter_mut().for_each(|d| *d += g[0] / n));
            }
            SumLast(x) | MeanLast(x) => {
                let c = val(x).rows_cols().1;
                let scale = if matches!(self, MeanLast(_)) { S::one() / S::c(c as f64) } else { S::one() };
                accumulate(nodes, grads, *x, |d| {
                    for (i, drow) in d.chunks_mut(c).enumerate() {
                        drow.iter_mut().for_each(|d| *d += g[i] * scale);
                    }
                });
            }
            Softmax { x, temp } => {
                let c = last_dim(out);
                let y = out.data();
                accumulate(nodes, grads, *x, |d| {
                    for ((drow, yrow), grow) in d.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                        let s = dot(yrow, grow);
                        for j in 0..c {
                            drow[j] += yrow[j] * (grow[j] - s) / *temp;
                        }
                    }
                });
            }
            LogSoftmax { x, temp, probs } => {
                let c = last_dim(out);
                accumulate(nodes, grads, *x, |d| {
                    for ((drow, prow), grow) in d.chunks_mut(c).zip(probs.chunks(c)).zip(g.chunks(c)) {
                        let s: S = grow.iter().copied().sum();
                        for j in 0..c {
                            drow[j] += (grow[j] - prow[j] * s) / *temp;
                        }
                    }
                });
            }
            LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = last_dim(out);
                let gv = val(gamma).data();
                accumulate(nodes, grads, *gamma, |d| {
                    for (hrow, grow) in xhat.chunks(c).zip(g.chunks(c)) {
                        for j in 0..c {
                            d[j] += grow[j] * hrow[j];
                        }
                    }
                });
                accumulate(nodes, grads, *beta, |d| {
                    for grow in g.chunks(c) {
                        add_into(d, grow);
                    }
                });
                let inv_c = S::one() / S::c(c as f64);
                accumulate(nodes, grads, *x, |d| {
                    let mut dh = vec![S::zero(); c];
                    for (i, ((drow, hrow), grow)) in
                        d.chunks_mut(c).zip(xhat.chunks(c)).zip(g.chunks(c)).enumerate()
                    {
                        for j in 0..c {
                            dh[j] = grow[j] * gv[j];
                        }
                        let mean_dh = dh.iter().copied().sum::<S>() * inv_c;
                        let mean_dhh = dot(&dh, hrow) * inv_c;
                        for j in 0..c {
                            drow[j] += rstd[i] * (dh[j] - mean_dh - hrow[j] * mean_dhh);
                        }
                    }
                });
            }
            L2Normalize { x, eps, norms } => {
                let c = last_dim(out);
                let y = out.data();
                accumulate(nodes, grads, *x, |d| {
                    for (i, ((drow, yrow), grow)) in
                        d.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)).enumerate()
                    {
                        if norms[i] > *eps {
                            let s = dot(yrow, grow);
                            for j in 0..c {
                                drow[j] += (grow[j] - yrow[j] * s) / norms[i];
                            }
                        } else {
                            for j in 0..c {
                                drow[j] += grow[j] / *eps;
                            }
                        }
                    }
                });
            }
            RowNorm(x) => {
                let xv = val(x);
                let c = last_dim(xv);
                let n = out.data();
                accumulate(nodes, grads, *x, |d| {
                    for (i, (drow, xrow)) in d.chunks_mut(c).zip(xv.data().chunks(c)).enumerate() {
                        if n[i] > S::zero() {
                            for j in 0..c {
                                drow[j] += g[i] * xrow[j] / n[i];
                            }
                        }
                    }
                });
            }
            Silu(x) => {
                let xv = val(x).data();
                accumulate(nodes, grads, *x, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * silu_grad(xv[i]);
                    }
                });
            }
            Gelu(x) => {
                let xv = val(x).data();
                accumulate(nodes, grads, *x, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * gelu_grad(xv[i]);
                    }
                });
            }
            SwiGlu(gate, up) => {
                let (gv, uv) = (val(gate).data(), val(up).data());
                accumulate(nodes, grads, *gate, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * uv[i] * silu_grad(gv[i]);
                    }
                });
                accumulate(nodes, grads, *up, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * silu(gv[i]);
                    }
                });
            }
            SoftCrossEntropy { logits, targets, temp, probs } => {
                let c = last_dim(val(logits));
                let rows = probs.len() / c;
                let scale = g[0] / (S::c(rows as f64) * *temp);
                accumulate(nodes, grads, *logits, |d| {
                    for ((drow, prow), trow) in d.chunks_mut(c).zip(probs.chunks(c)).zip(targets.chunks(c)) {
                        let mass: S = trow.iter().copied().sum();
                        for j in 0..c {
                            drow[j] += scale * (prow[j] * mass - trow[j]);
                        }
                    }
                });
            }
            Attention { q, k, v, kb, vb, spec, probs } => {
                attention_backward(nodes, grads, g, (*q, *k, *v, *kb, *vb), spec, probs);
            }
            Rope { x, cos, sin, spec } => {
                accumulate(nodes, grads, *x, |d| rope_apply(d, g, cos, sin, spec, true));
            }
        }
    }
}

#[inline]
fn add_into<S: Scalar>(d: &mut [S], g: &[S]) {
    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
}

#[inline]
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).fold(S::zero(), |acc, (&x, &y)| acc + x * y)
}

fn last_dim<S: Scalar>(t: &Tensor<S>) -> usize {
    *t.shape().last().expect("rank >= 1")
}

#[inline]
fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

#[inline]
fn silu<S: Scalar>(x: S) -> S {
    x * sigmoid(x)
}

#[inline]
fn silu_grad<S: Scalar>(x: S) -> S {
    let s = sigmoid(x);
    s * (S::one() + x * (S::one() - s))
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

#[inline]
fn gelu<S: Scalar>(x: S) -> S {
    let inner = S::c(GELU_K) * (x + S::c(GELU_C) * x * x * x);
    S::c(0.5) * x * (S::one() + inner.tanh())
}

#[inline]
fn gelu_grad<S: Scalar>(x: S) -> S {
    let inner = S::c(GELU_K) * (x + S::c(GELU_C) * x * x * x);
    let t = inner.tanh();
    let dinner = S::c(GELU_K) * (S::one() + S::c(3.0 * GELU_C) * x * x);
    S::c(0.5) * (S::one() + t) + S::c(0.5) * x * (S::one() - t * t) * dinner
}

/// Row-wise `softmax(x / temp)` into `out`; returns nothing, rows of width `c`.
fn softmax_rows<S: Scalar>(x: &[S], c: usize, temp: S, out: &mut [S]) {
    for (xrow, orow) in x.chunks(c).zip(out.chunks_mut(c)) {
        let max = xrow.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
        let mut sum = S::zero();
        for j in 0..c {
            let e = ((xrow[j] - max) / temp).exp();
            orow[j] = e;
            sum += e;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
}

fn rope_apply<S: Scalar>(dst: &mut [S], src: &[S], cos: &[S], sin: &[S], spec: &RopeLayout, inverse: bool) {
    let d = spec.heads * spec.head_dim;
    let half = spec.head_dim / 2;
    for s in 0..spec.n_seq {
        for t in 0..spec.seq_len {
            let row = (s * spec.seq_len + t) * d;
            let tab = t * half;
            for h in 0..spec.heads {
                let base = row + h * spec.head_dim;
                for p in 0..half {
                    let (c, mut sn) = (cos[tab + p], sin[tab + p]);
                    if inverse {
                        sn = -sn;
                    }
                    let (a, b) = (src[base + 2 * p], src[base + 2 * p + 1]);
                    dst[base + 2 * p] += a * c - b * sn;
                    dst[base + 2 * p + 1] += a * sn + b * c;
                }
            }
        }
    }
}

type AttnInputs = (Var, Var, Var, Option<Var>, Option<Var>);

fn attention_backward<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut [Option<Vec<S>>],
    g: &[S],
    (q, k, v, kb, vb): AttnInputs,
    spec: &AttentionSpec,
    probs: &[S],
) {
    let qv = nodes[q.0].value.data();
    let kv = nodes[k.0].value.data();
    let vv = nodes[v.0].value.data();
    let d = nodes[q.0].value.shape()[1];
    let (t, heads) = (spec.seq_len, spec.heads);
    let hd = d / heads;
    let scale = S::one() / S::c(hd as f64).sqrt();
    let with_bias = spec.variant == AttentionVariant::AttentionBias;
    let width = if with_bias { t + 1 } else { t };
    let kbv = kb.map(|x| nodes[x.0].value.data());
    let vbv = vb.map(|x| nodes[x.0].value.data());

    let mut dq = vec![S::zero(); qv.len()];
    let mut dk = vec![S::zero(); kv.len()];
    let mut dv = vec![S::zero(); vv.len()];
    let mut dkb = vec![S::zero(); d];
    let mut dvb = vec![S::zero(); d];
    let mut dp = vec![S::zero(); t * width];

    for s in 0..spec.n_seq {
        let row0 = s * t * d;
        for h in 0..heads {
            let off = row0 + h * hd;
            let p = &probs[(s * heads + h) * t * width..(s * heads + h + 1) * t * width];
            // dP[:, :t] = dO V^T
            S::gemm(t, hd, t, S::one(), &g[off..], d as isize, 1, &vv[off..], 1, d as isize, S::zero(), &mut dp, width as isize, 1);
            // dV = P^T dO
            S::gemm(t, t, hd, S::one(), p, 1, width as isize, &g[off..], d as isize, 1, S::one(), &mut dv[off..], d as isize, 1);
            if with_bias {
                let vbh = &vbv.expect("value bias")[h * hd..(h + 1) * hd];
                for i in 0..t {
                    let go = &g[off + i * d..off + i * d + hd];
                    dp[i * width + t] = dot(go, vbh);
                    let pb = p[i * width + t];
                    for j in 0..hd {
                        dvb[h * hd + j] += pb * go[j];
                    }
                }
            }
            // dS = P * (dP - rowsum(dP * P)), reused in place
            for i in 0..t {
                let prow = &p[i * width..(i + 1) * width];
                let drow = &mut dp[i * width..(i + 1) * width];
                let sdot = dot(prow, drow);
                for j in 0..width {
                    drow[j] = prow[j] * (drow[j] - sdot) * scale;
                }
            }
            // dQ = dS K, dK = dS^T Q
            S::gemm(t, t, hd, S::one(), &dp, width as isize, 1, &kv[off..], d as isize, 1, S::one(), &mut dq[off..], d as isize, 1);
            S::gemm(t, t, hd, S::one(), &dp, 1, width as isize, &qv[off..], d as isize, 1, S::one(), &mut dk[off..], d as isize, 1);
            if with_bias {
                let kbh = &kbv.expect("key bias")[h * hd..(h + 1) * hd];
                for i in 0..t {
                    let ds = dp[i * width + t];
                    let qi = &qv[off + i * d..off + i * d + hd];
                    for j in 0..hd {
                        dq[off + i * d + j] += ds * kbh[j];
                        dkb[h * hd + j] += ds * qi[j];
                    }
                }
            }
        }
        if spec.variant == AttentionVariant::ValueGating {
            for i in 0..t {
                add_into(&mut dvb, &g[row0 + i * d..row0 + (i + 1) * d]);
            }
        }
    }
    accumulate(nodes, grads, q, |x| add_into(x, &dq));
    accumulate(nodes, grads, k, |x| add_into(x, &dk));
    accumulate(nodes, grads, v, |x| add_into(x, &dv));
    if let Some(kb) = kb {
        accumulate(nodes, grads, kb, |x| add_into(x, &dkb));
    }
    if let Some(vb) = vb {
        accumulate(nodes, grads, vb, |x| add_into(x, &dvb));
    }
}

impl<S: Scalar> Graph<S> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S, rec: Op<S>) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, rec))
    }

    fn unary(&mut self, x: Var, f: impl Fn(S) -> S, rec: Op<S>) -> Var {
        let out = self.value(x).map(f);
        self.push(out, rec)
    }

    fn matrix(&self, op: &'static str, x: Var) -> Result<(usize, usize)> {
        match self.shape(x) {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::invalid(op, format!("expected a matrix, got shape {other:?}"))),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn row_broadcast(&mut self, op: &'static str, x: Var, v: Var) -> Result<usize> {
        let (_, c) = self.matrix(op, x)?;
        if self.value(v).len() != c {
            return Err(Error::shape(op, self.shape(x), self.shape(v)));
        }
        Ok(c)
    }

    /// `x[m x n] + v[n]`, with `v` repeated for every row.
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let c = self.row_broadcast("add_row", x, v)?;
        let vv = self.value(v).data().to_vec();
        let out = Tensor::from_fn(self.shape(x).to_vec(), |i| self.value(x).data()[i] + vv[i % c]);
        Ok(self.push(out, Op::AddRow(x, v)))
    }

    /// `x[m x n] * v[n]`, with `v` repeated for every row.
    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let c = self.row_broadcast("mul_row", x, v)?;
        let vv = self.value(v).data().to_vec();
        let out = Tensor::from_fn(self.shape(x).to_vec(), |i| self.value(x).data()[i] * vv[i % c]);
        Ok(self.push(out, Op::MulRow(x, v)))
    }

    /// `x[m x n] * c[m]`, scaling each row by its own scalar.
    pub fn mul_col(&mut self, x: Var, c: Var) -> Result<Var> {
        let (r, n) = self.matrix("mul_col", x)?;
        if self.value(c).len() != r {
            return Err(Error::shape("mul_col", self.shape(x), self.shape(c)));
        }
        let cv = self.value(c).data().to_vec();
        let out = Tensor::from_fn(self.shape(x).to_vec(), |i| self.value(x).data()[i] * cv[i / n]);
        Ok(self.push(out, Op::MulCol(x, c)))
    }

    pub fn scale(&mut self, x: Var, s: S) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: S) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), Op::Log(x))
    }

    pub fn sqr(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Sqr(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, silu, Op::Silu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    /// Gated feed-forward activation `silu(gate) * up`.
    pub fn swiglu(&mut self, gate: Var, up: Var) -> Result<Var> {
        self.zip_map("swiglu", gate, up, |g, u| silu(g) * u, Op::SwiGlu(gate, up))
    }

    /// 2-D matrix product `a[m x k] @ b[k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix("matmul", a)?;
        let (k2, n) = self.matrix("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![S::zero(); m * n];
        S::gemm(m, k, n, S::one(), self.value(a).data(), k as isize, 1, self.value(b).data(), n as isize, 1, S::zero(), &mut out, n as isize, 1);
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(out, Op::Matmul(a, b)))
    }

    /// `a[m x k] @ b[n x k]^T` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix("matmul_nt", a)?;
        let (n, k2) = self.matrix("matmul_nt", b)?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![S::zero(); m * n];
        S::gemm(m, k, n, S::one(), self.value(a).data(), k as isize, 1, self.value(b).data(), 1, k as isize, S::zero(), &mut out, n as isize, 1);
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(out, Op::MatmulNt(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.matrix("transpose", x)?;
        let out = self.value(x).transpose()?;
        Ok(self.push(out, Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Concatenate matrices along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let (_, c0) = self.matrix("concat", first)?;
        let (r0, _) = self.matrix("concat", first)?;
        let mut rows = 0;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.matrix("concat", p)?;
            if (axis == 0 && c != c0) || (axis == 1 && r != r0) || axis > 1 {
                return Err(Error::shape("concat", self.shape(first), self.shape(p)));
            }
            rows += r;
            cols += c;
        }
        let out = if axis == 0 {
            let mut data = Vec::with_capacity(rows * c0);
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            Tensor::new(vec![rows, c0], data)?
        } else {
            let mut data = Vec::with_capacity(r0 * cols);
            for i in 0..r0 {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(i));
                }
            }
            Tensor::new(vec![r0, cols], data)?
        };
        Ok(self.push(out, Op::Concat { parts: parts.to_vec(), axis }))
    }

    /// Contiguous slice `[start, start + len)` of a matrix along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.matrix("slice", x)?;
        let extent = if axis == 0 { r } else { c };
        if axis > 1 || len == 0 || start + len > extent {
            return Err(Error::invalid("slice", format!("[{start}, {}) out of extent {extent} on axis {axis}", start + len)));
        }
        let v = self.value(x).data();
        let out = if axis == 0 {
            Tensor::new(vec![len, c], v[start * c..(start + len) * c].to_vec())?
        } else {
            let mut data = Vec::with_capacity(r * len);
            for row in v.chunks(c) {
                data.extend_from_slice(&row[start..start + len]);
            }
            Tensor::new(vec![r, len], data)?
        };
        Ok(self.push(out, Op::Slice { x, axis, start }))
    }

    /// Select rows by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.value(x).rows_cols();
        if idx.is_empty() {
            return Err(Error::invalid("gather_rows", "empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::invalid("gather_rows", format!("row {bad} out of {r}")));
        }
        let v = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&v[i * c..(i + 1) * c]);
        }
        let out = Tensor::new(vec![idx.len(), c], data)?;
        Ok(self.push(out, Op::GatherRows { x, idx: idx.to_vec() }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<S>() / S::c(v.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Reduce the trailing axis; result has one entry per row.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let (r, c) = self.value(x).rows_cols();
        let data: Vec<S> = self.value(x).data().chunks(c).map(|row| row.iter().copied().sum()).collect();
        self.push(Tensor::new(vec![r], data).expect("rows"), Op::SumLast(x))
    }

    pub fn mean_last(&mut self, x: Var) -> Var {
        let (r, c) = self.value(x).rows_cols();
        let n = S::c(c as f64);
        let data: Vec<S> = self.value(x).data().chunks(c).map(|row| row.iter().copied().sum::<S>() / n).collect();
        self.push(Tensor::new(vec![r], data).expect("rows"), Op::MeanLast(x))
    }

    fn check_finite(&self, op: &'static str, x: Var) -> Result<()> {
        if !self.value(x).is_finite() {
            return Err(Error::NonFinite(op.to_string()));
        }
        Ok(())
    }

    fn positive_temp(op: &'static str, temp: S) -> Result<()> {
        if !(temp > S::zero()) {
            return Err(Error::invalid(op, format!("temperature must be positive, got {temp}")));
        }
        Ok(())
    }

    /// `softmax(x / temp)` along the trailing axis, max-subtracted.
    pub fn softmax(&mut self, x: Var, temp: S) -> Result<Var> {
        Self::positive_temp("softmax", temp)?;
        self.check_finite("softmax", x)?;
        let xv = self.value(x);
        let c = last_dim(xv);
        let mut out = vec![S::zero(); xv.len()];
        softmax_rows(xv.data(), c, temp, &mut out);
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(out, Op::Softmax { x, temp }))
    }

    pub fn log_softmax(&mut self, x: Var, temp: S) -> Result<Var> {
        Self::positive_temp("log_softmax", temp)?;
        self.check_finite("log_softmax", x)?;
        let xv = self.value(x);
        let c = last_dim(xv);
        let mut probs = vec![S::zero(); xv.len()];
        softmax_rows(xv.data(), c, temp, &mut probs);
        let mut out = vec![S::zero(); xv.len()];
        for (xrow, orow) in xv.data().chunks(c).zip(out.chunks_mut(c)) {
            let max = xrow.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
            let lse = xrow.iter().map(|&v| ((v - max) / temp).exp()).sum::<S>().ln();
            for j in 0..c {
                orow[j] = (xrow[j] - max) / temp - lse;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(out, Op::LogSoftmax { x, temp, probs }))
    }

    /// Mean over rows of `-sum_k t_k log softmax(logits / temp)_k`.
    ///
    /// `targets` is a constant with the shape of `logits`; no gradient flows to it.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: &Tensor<S>, temp: S) -> Result<Var> {
        Self::positive_temp("soft_cross_entropy", temp)?;
        self.check_finite("soft_cross_entropy", logits)?;
        let lv = self.value(logits);
        if lv.shape() != targets.shape() {
            return Err(Error::shape("soft_cross_entropy", lv.shape(), targets.shape()));
        }
        let c = last_dim(lv);
        let rows = lv.len() / c;
        let mut probs = vec![S::zero(); lv.len()];
        softmax_rows(lv.data(), c, temp, &mut probs);
        let mut total = S::zero();
        for (xrow, trow) in lv.data().chunks(c).zip(targets.data().chunks(c)) {
            let max = xrow.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
            let lse = xrow.iter().map(|&v| ((v - max) / temp).exp()).sum::<S>().ln();
            for j in 0..c {
                if trow[j] != S::zero() {
                    total -= trow[j] * ((xrow[j] - max) / temp - lse);
                }
            }
        }
        let out = Tensor::scalar(total / S::c(rows as f64));
        Ok(self.push(
            out,
            Op::SoftCrossEntropy { logits, targets: targets.data().to_vec(), temp, probs },
        ))
    }

    /// Layer normalization over the trailing axis with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<Var> {
        let xv = self.value(x);
        let c = last_dim(xv);
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape("layer_norm", xv.shape(), self.shape(gamma)));
        }
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.len() / c;
        let mut xhat = vec![S::zero(); xv.len()];
        let mut rstd = vec![S::zero(); rows];
        let mut out = vec![S::zero(); xv.len()];
        let inv_c = S::one() / S::c(c as f64);
        for (i, xrow) in xv.data().chunks(c).enumerate() {
            let mean = xrow.iter().copied().sum::<S>() * inv_c;
            let var = xrow.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_c;
            let r = S::one() / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..c {
                let h = (xrow[j] - mean) * r;
                xhat[i * c + j] = h;
                out[i * c + j] = h * gv[j] + bv[j];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }))
    }

    /// Divide each trailing-axis slice by `max(||slice||_2, eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: S) -> Result<Var> {
        if !(eps > S::zero()) {
            return Err(Error::invalid("l2_normalize", "eps must be positive"));
        }
        let xv = self.value(x);
        let c = last_dim(xv);
        let mut norms = Vec::with_capacity(xv.len() / c);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(c) {
            let n = dot(row, row).sqrt();
            let denom = n.max(eps);
            norms.push(n);
            out.extend(row.iter().map(|&v| v / denom));
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(out, Op::L2Normalize { x, eps, norms }))
    }

    /// Euclidean norm of every row; the gradient at a zero row is taken as zero.
    pub fn row_norm(&mut self, x: Var) -> Var {
        let (r, c) = self.value(x).rows_cols();
        let data: Vec<S> = self.value(x).data().chunks(c).map(|row| dot(row, row).sqrt()).collect();
        self.push(Tensor::new(vec![r], data).expect("rows"), Op::RowNorm(x))
    }

    /// Fused multi-head attention over `n_seq` packed sequences.
    ///
    /// `q`, `k`, `v` are `[n_seq * seq_len, d]`. `key_bias`/`value_bias` are
    /// `[d]` vectors required by [`AttentionVariant::AttentionBias`] (both) and
    /// [`AttentionVariant::ValueGating`] (value bias only).
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        key_bias: Option<Var>,
        value_bias: Option<Var>,
        spec: AttentionSpec,
    ) -> Result<Var> {
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let (rows, d) = self.matrix("attention", q)?;
        if spec.heads == 0 || d % spec.heads != 0 || rows != spec.n_seq * spec.seq_len {
            return Err(Error::invalid("attention", format!("{spec:?} incompatible with shape [{rows}, {d}]")));
        }
        let (kb, vb) = match spec.variant {
            AttentionVariant::Standard => (None, None),
            AttentionVariant::ValueGating => {
                let vb = value_bias.ok_or_else(|| Error::Config("value gating requires a value bias".into()))?;
                (None, Some(vb))
            }
            AttentionVariant::AttentionBias => {
                let kb = key_bias.ok_or_else(|| Error::Config("attention bias requires a key bias".into()))?;
                let vb = value_bias.ok_or_else(|| Error::Config("attention bias requires a value bias".into()))?;
                (Some(kb), Some(vb))
            }
        };
        for b in kb.iter().chain(vb.iter()) {
            if self.value(*b).len() != d {
                return Err(Error::shape("attention", &[d], self.shape(*b)));
            }
        }

        let (t, heads) = (spec.seq_len, spec.heads);
        let hd = d / heads;
        let scale = S::one() / S::c(hd as f64).sqrt();
        let with_bias = spec.variant == AttentionVariant::AttentionBias;
        let width = if with_bias { t + 1 } else { t };
        let qv = self.value(q).data();
        let kv = self.value(k).data();
        let vv = self.value(v).data();
        let kbv = kb.map(|x| self.value(x).data());
        let vbv = vb.map(|x| self.value(x).data());
        let mut probs = vec![S::zero(); spec.n_seq * heads * t * width];
        let mut out = vec![S::zero(); rows * d];
        let mut logits = vec![S::zero(); t * width];

        for s in 0..spec.n_seq {
            let row0 = s * t * d;
            for h in 0..heads {
                let off = row0 + h * hd;
                S::gemm(t, hd, t, scale, &qv[off..], d as isize, 1, &kv[off..], 1, d as isize, S::zero(), &mut logits, width as isize, 1);
                if with_bias {
                    let kbh = &kbv.expect("key bias")[h * hd..(h + 1) * hd];
                    for i in 0..t {
                        logits[i * width + t] = dot(&qv[off + i * d..off + i * d + hd], kbh) * scale;
                    }
                }
                let p = &mut probs[(s * heads + h) * t * width..(s * heads + h + 1) * t * width];
                softmax_rows(&logits, width, S::one(), p);
                S::gemm(t, t, hd, S::one(), p, width as isize, 1, &vv[off..], d as isize, 1, S::zero(), &mut out[off..], d as isize, 1);
                if with_bias {
                    let vbh = &vbv.expect("value bias")[h * hd..(h + 1) * hd];
                    for i in 0..t {
                        let pb = p[i * width + t];
                        for j in 0..hd {
                            out[off + i * d + j] += pb * vbh[j];
                        }
                    }
                }
            }
            if spec.variant == AttentionVariant::ValueGating {
                let vb = vbv.expect("value bias");
                for i in 0..t {
                    add_into(&mut out[row0 + i * d..row0 + (i + 1) * d], vb);
                }
            }
        }
        let out = Tensor::new(vec![rows, d], out)?;
        Ok(self.push(out, Op::Attention { q, k, v, kb, vb, spec, probs }))
    }

    /// Rotate consecutive `(2p, 2p + 1)` pairs of every head by per-token angles.
    ///
    /// `cos`/`sin` are `[seq_len, head_dim / 2]` and shared by all heads and
    /// sequences.
    pub fn rope(&mut self, x: Var, cos: &[S], sin: &[S], n_seq: usize, heads: usize) -> Result<Var> {
        let (rows, d) = self.matrix("rope", x)?;
        if heads == 0 || d % heads != 0 || (d / heads) % 2 != 0 || n_seq == 0 || rows % n_seq != 0 {
            return Err(Error::invalid("rope", format!("cannot split [{rows}, {d}] into {n_seq} sequences of {heads} heads")));
        }
        let spec = RopeLayout { n_seq, seq_len: rows / n_seq, heads, head_dim: d / heads };
        if cos.len() != spec.seq_len * spec.head_dim / 2 || sin.len() != cos.len() {
            return Err(Error::invalid("rope", format!("angle table has {} entries, expected {}", cos.len(), spec.seq_len * spec.head_dim / 2)));
        }
        let mut out = vec![S::zero(); rows * d];
        rope_apply(&mut out, self.value(x).data(), cos, sin, &spec, false);
        let out = Tensor::new(vec![rows, d], out)?;
        Ok(self.push(out, Op::Rope { x, cos: cos.to_vec(), sin: sin.to_vec(), spec }))
    }
}
