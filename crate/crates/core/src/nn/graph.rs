//! Reverse-mode tape over dense row-major matrices.
//!
//! Every node holds a `[rows, cols]` value. Sequence ops (attention,
//! depthwise convolution, pooling) interpret rows as `batch * seq` frames.

use super::params::{Gradients, ParamId, ParamStore};
use super::scalar::{matmul, MatRef, Scalar};
use crate::error::{Error, Result};
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<F> {
    Input,
    Param,
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    AddRepeat { x: Var, c: Var },
    Scale(Var, F),
    Silu(Var),
    Glu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<F>, rstd: Vec<F> },
    Embedding { table: Var, ids: Vec<usize> },
    Attention { qkv: Var, batch: usize, seq: usize, heads: usize, probs: Vec<F> },
    DepthwiseConv { x: Var, w: Var, b: Var, batch: usize, seq: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<F>, probs: Vec<F> },
    MeanPool { x: Var, groups: Vec<(usize, usize)> },
    SpanMeanMax { x: Var, spans: Vec<(usize, usize)>, argmax: Vec<usize> },
}

struct Node<F> {
    value: Vec<F>,
    rows: usize,
    cols: usize,
    needs_grad: bool,
    op: Op<F>,
}

/// Computation graph for one forward pass.
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    param_vars: Vec<Option<Var>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_vars: Vec::new(),
        }
    }

    fn push(&mut self, value: Vec<F>, rows: usize, cols: usize, parents: &[Var], op: Op<F>) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        let needs_grad = match op {
            Op::Input => false,
            Op::Param => true,
            _ => parents.iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            rows,
            cols,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        (self.nodes[v.0].rows, self.nodes[v.0].cols)
    }

    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, value: Vec<F>, rows: usize, cols: usize) -> Var {
        assert_eq!(value.len(), rows * cols, "input shape mismatch");
        self.push(value, rows, cols, &[], Op::Input)
    }

    /// Load a parameter as a leaf. Each parameter maps to a single leaf per graph.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if self.param_vars.len() < store.len() {
            self.param_vars.resize(store.len(), None);
        }
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let e = store.get(id);
        let (rows, cols) = match e.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => (s[..s.len() - 1].iter().product(), s[s.len() - 1]),
        };
        let v = self.push(e.value.clone(), rows, cols, &[], Op::Param);
        self.param_vars[id.index()] = Some(v);
        v
    }

    /// `x @ w (+ b)`, with `w: [in, out]` and `b: [1, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, k) = self.shape(x);
        let (k2, m) = self.shape(w);
        assert_eq!(k, k2, "linear: input width {k} vs weight rows {k2}");
        let mut out = vec![F::zero(); n * m];
        if let Some(b) = b {
            assert_eq!(self.shape(b), (1, m));
            let bias = self.value(b);
            for row in out.chunks_mut(m) {
                row.copy_from_slice(bias);
            }
        }
        matmul(
            MatRef::new(self.value(x), n, k),
            MatRef::new(self.value(w), k, m),
            &mut out,
            b.is_some(),
        );
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(out, n, m, &parents, Op::Linear { x, w, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x + *y).collect();
        self.push(out, r, c, &[a, b], Op::Add(a, b))
    }

    /// `x[r] + c[r % c.rows]`.
    pub fn add_repeat(&mut self, x: Var, c: Var) -> Var {
        let (n, d) = self.shape(x);
        let (t, d2) = self.shape(c);
        assert_eq!(d, d2);
        assert_eq!(n % t, 0, "add_repeat: rows {n} not a multiple of {t}");
        let cv = self.value(c);
        let mut out = self.value(x).to_vec();
        for (r, row) in out.chunks_mut(d).enumerate() {
            let src = &cv[(r % t) * d..(r % t + 1) * d];
            row.iter_mut().zip(src).for_each(|(o, s)| *o = *o + *s);
        }
        self.push(out, n, d, &[x, c], Op::AddRepeat { x, c })
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = F::lit(s);
        let (r, c) = self.shape(x);
        let out = self.value(x).iter().map(|v| *v * s).collect();
        self.push(out, r, c, &[x], Op::Scale(x, s))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let out = self.value(x).iter().map(|v| *v * sigmoid(*v)).collect();
        self.push(out, r, c, &[x], Op::Silu(x))
    }

    /// Gated linear unit over the column halves: `a * sigmoid(b)`.
    pub fn glu(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(c % 2, 0, "glu needs an even width");
        let h = c / 2;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(r * h);
        for row in xv.chunks(c) {
            for j in 0..h {
                out.push(row[j] * sigmoid(row[h + j]));
            }
        }
        self.push(out, r, h, &[x], Op::Glu(x))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (n, d) = self.shape(x);
        assert_eq!(self.shape(gamma), (1, d));
        assert_eq!(self.shape(beta), (1, d));
        let eps = F::lit(1e-5);
        let df = F::lit(d as f64);
        let xv = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut out = vec![F::zero(); n * d];
        let mut mean = vec![F::zero(); n];
        let mut rstd = vec![F::zero(); n];
        for r in 0..n {
            let row = &xv[r * d..(r + 1) * d];
            let mu = row.iter().copied().sum::<F>() / df;
            let var = row.iter().map(|v| (*v - mu) * (*v - mu)).sum::<F>() / df;
            let rs = F::one() / (var + eps).sqrt();
            mean[r] = mu;
            rstd[r] = rs;
            let o = &mut out[r * d..(r + 1) * d];
            for j in 0..d {
                o[j] = (row[j] - mu) * rs * g[j] + b[j];
            }
        }
        self.push(out, n, d, &[x, gamma, beta], Op::LayerNorm { x, gamma, beta, mean, rstd })
    }

    /// Row gather from an embedding table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let (vocab, d) = self.shape(table);
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            assert!(i < vocab, "embedding index {i} out of range {vocab}");
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        self.push(out, ids.len(), d, &[table], Op::Embedding { table, ids: ids.to_vec() })
    }

    /// Multi-head scaled dot-product self-attention over packed `[q | k | v]` columns.
    pub fn attention(&mut self, qkv: Var, batch: usize, seq: usize, heads: usize) -> Var {
        let (n, c3) = self.shape(qkv);
        assert_eq!(n, batch * seq, "attention: rows != batch * seq");
        assert_eq!(c3 % 3, 0);
        let d = c3 / 3;
        assert_eq!(d % heads, 0, "model width not divisible by heads");
        let dh = d / heads;
        let scale = F::one() / F::lit(dh as f64).sqrt();
        let qv = self.value(qkv);
        let results = par::map_range(batch * heads, |bh| {
            let (b, h) = (bh / heads, bh % heads);
            let base = b * seq * c3 + h * dh;
            let q = MatRef::strided(qv, base, seq, dh, c3, 1);
            let k = MatRef::strided(qv, base + d, seq, dh, c3, 1);
            let v = MatRef::strided(qv, base + 2 * d, seq, dh, c3, 1);
            let mut p = vec![F::zero(); seq * seq];
            super::scalar::gemm_into(q, k.t(), &mut p, seq, false);
            for row in p.chunks_mut(seq) {
                let mut mx = F::neg_infinity();
                for x in row.iter_mut() {
                    *x = *x * scale;
                    mx = mx.max(*x);
                }
                let mut s = F::zero();
                for x in row.iter_mut() {
                    *x = (*x - mx).exp();
                    s = s + *x;
                }
                let inv = F::one() / s;
                row.iter_mut().for_each(|x| *x = *x * inv);
            }
            let mut o = vec![F::zero(); seq * dh];
            super::scalar::gemm_into(MatRef::new(&p, seq, seq), v, &mut o, dh, false);
            (p, o)
        });
        let mut out = vec![F::zero(); n * d];
        let mut probs = Vec::with_capacity(batch * heads * seq * seq);
        for (bh, (p, o)) in results.into_iter().enumerate() {
            let (b, h) = (bh / heads, bh % heads);
            for t in 0..seq {
                let dst = (b * seq + t) * d + h * dh;
                out[dst..dst + dh].copy_from_slice(&o[t * dh..(t + 1) * dh]);
            }
            probs.extend_from_slice(&p);
        }
        self.push(out, n, d, &[qkv], Op::Attention { qkv, batch, seq, heads, probs })
    }

    /// Per-channel 1-D convolution along time with zero "same" padding.
    /// `w: [kernel, channels]`, `b: [1, channels]`.
    pub fn depthwise_conv(&mut self, x: Var, w: Var, b: Var, batch: usize, seq: usize) -> Var {
        let (n, d) = self.shape(x);
        assert_eq!(n, batch * seq);
        let (k, d2) = self.shape(w);
        assert_eq!(d, d2);
        assert_eq!(k % 2, 1, "kernel size must be odd");
        let pad = k / 2;
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let mut out = vec![F::zero(); n * d];
        par::for_each_chunk_mut(&mut out, seq * d, |bi, chunk| {
            for t in 0..seq {
                let o = &mut chunk[t * d..(t + 1) * d];
                o.copy_from_slice(bv);
                for j in 0..k {
                    let src = t as isize + j as isize - pad as isize;
                    if src < 0 || src >= seq as isize {
                        continue;
                    }
                    let xr = &xv[(bi * seq + src as usize) * d..(bi * seq + src as usize + 1) * d];
                    let wr = &wv[j * d..(j + 1) * d];
                    for c in 0..d {
                        o[c] = o[c] + wr[c] * xr[c];
                    }
                }
            }
        });
        self.push(out, n, d, &[x, w, b], Op::DepthwiseConv { x, w, b, batch, seq })
    }

    /// Weighted sum of per-row softmax cross-entropies: `sum_r w_r * CE_r`.
    /// Rows with zero weight contribute nothing.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[F]) -> Var {
        let (n, c) = self.shape(logits);
        assert_eq!(targets.len(), n);
        assert_eq!(weights.len(), n);
        let lv = self.value(logits);
        let mut probs = vec![F::zero(); n * c];
        let mut total = F::zero();
        for r in 0..n {
            let row = &lv[r * c..(r + 1) * c];
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let p = &mut probs[r * c..(r + 1) * c];
            let mut s = F::zero();
            for j in 0..c {
                p[j] = (row[j] - mx).exp();
                s = s + p[j];
            }
            let inv = F::one() / s;
            p.iter_mut().for_each(|x| *x = *x * inv);
            if weights[r] != F::zero() {
                assert!(targets[r] < c, "target {} out of range {c}", targets[r]);
                let lse = mx + s.ln();
                total = total + weights[r] * (lse - row[targets[r]]);
            }
        }
        self.push(
            vec![total],
            1,
            1,
            &[logits],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        )
    }

    /// Mean over row groups `[start, end)`.
    pub fn mean_pool(&mut self, x: Var, groups: &[(usize, usize)]) -> Var {
        let (n, d) = self.shape(x);
        let xv = self.value(x);
        let mut out = vec![F::zero(); groups.len() * d];
        for (g, &(s, e)) in groups.iter().enumerate() {
            assert!(s < e && e <= n, "empty or out-of-range group");
            let inv = F::one() / F::lit((e - s) as f64);
            let o = &mut out[g * d..(g + 1) * d];
            for r in s..e {
                for j in 0..d {
                    o[j] = o[j] + xv[r * d + j];
                }
            }
            o.iter_mut().for_each(|v| *v = *v * inv);
        }
        self.push(out, groups.len(), d, &[x], Op::MeanPool { x, groups: groups.to_vec() })
    }

    /// Per span `[start, end)`: concat(mean, elementwise max).
    pub fn span_mean_max(&mut self, x: Var, spans: &[(usize, usize)]) -> Var {
        let (n, d) = self.shape(x);
        let xv = self.value(x);
        let mut out = vec![F::zero(); spans.len() * 2 * d];
        let mut argmax = vec![0usize; spans.len() * d];
        for (g, &(s, e)) in spans.iter().enumerate() {
            assert!(s < e && e <= n, "empty or out-of-range span");
            let inv = F::one() / F::lit((e - s) as f64);
            for j in 0..d {
                let mut sum = F::zero();
                let mut best = F::neg_infinity();
                let mut arg = s;
                for r in s..e {
                    let v = xv[r * d + j];
                    sum = sum + v;
                    if v > best {
                        best = v;
                        arg = r;
                    }
                }
                out[g * 2 * d + j] = sum * inv;
                out[g * 2 * d + d + j] = best;
                argmax[g * d + j] = arg;
            }
        }
        self.push(out, spans.len(), 2 * d, &[x], Op::SpanMeanMax { x, spans: spans.to_vec(), argmax })
    }

    /// Reverse sweep from the scalar `loss`, seeded with `seed` (1 for a plain gradient).
    pub fn backward_scaled(&self, loss: Var, seed: F) -> NodeGrads<F> {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![seed]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Param) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }
        NodeGrads { grads }
    }

    pub fn backward(&self, loss: Var) -> NodeGrads<F> {
        self.backward_scaled(loss, F::one())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn acc(grads: &mut [Option<Vec<F>>], v: Var, contrib: Vec<F>) {
        match &mut grads[v.0] {
            Some(g) => g.iter_mut().zip(contrib).for_each(|(a, b)| *a = *a + b),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Vec<F>>], v: Var, f: impl FnOnce(&mut [F])) {
        let len = self.nodes[v.0].value.len();
        let slot = grads[v.0].get_or_insert_with(|| vec![F::zero(); len]);
        f(slot);
    }

    fn backprop_node(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Input | Op::Param => {}
            Op::Linear { x, w, b } => {
                let (n, k) = self.shape(*x);
                let m = node.cols;
                let gm = MatRef::new(g, n, m);
                if self.wants(*x) {
                    self.acc_with(grads, *x, |dx| {
                        matmul(gm, MatRef::new(self.value(*w), k, m).t(), dx, true);
                    });
                }
                if self.wants(*w) {
                    self.acc_with(grads, *w, |dw| {
                        matmul(MatRef::new(self.value(*x), n, k).t(), gm, dw, true);
                    });
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        self.acc_with(grads, *b, |db| {
                            for row in g.chunks(m) {
                                db.iter_mut().zip(row).for_each(|(a, r)| *a = *a + *r);
                            }
                        });
                    }
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    Self::acc(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    Self::acc(grads, *b, g.to_vec());
                }
            }
            Op::AddRepeat { x, c } => {
                if self.wants(*x) {
                    Self::acc(grads, *x, g.to_vec());
                }
                if self.wants(*c) {
                    let (t, d) = self.shape(*c);
                    self.acc_with(grads, *c, |dc| {
                        for (r, row) in g.chunks(d).enumerate() {
                            let dst = &mut dc[(r % t) * d..(r % t + 1) * d];
                            dst.iter_mut().zip(row).for_each(|(a, b)| *a = *a + *b);
                        }
                    });
                }
            }
            Op::Scale(x, s) => {
                if self.wants(*x) {
                    Self::acc(grads, *x, g.iter().map(|v| *v * *s).collect());
                }
            }
            Op::Silu(x) => {
                let xv = self.value(*x);
                let d = xv
                    .iter()
                    .zip(g)
                    .map(|(v, gv)| {
                        let s = sigmoid(*v);
                        *gv * s * (F::one() + *v * (F::one() - s))
                    })
                    .collect();
                Self::acc(grads, *x, d);
            }
            Op::Glu(x) => {
                let (r, c) = self.shape(*x);
                let h = c / 2;
                let xv = self.value(*x);
                let mut d = vec![F::zero(); r * c];
                for row in 0..r {
                    for j in 0..h {
                        let a = xv[row * c + j];
                        let s = sigmoid(xv[row * c + h + j]);
                        let gv = g[row * h + j];
                        d[row * c + j] = gv * s;
                        d[row * c + h + j] = gv * a * s * (F::one() - s);
                    }
                }
                Self::acc(grads, *x, d);
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let (n, d) = self.shape(*x);
                let df = F::lit(d as f64);
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let mut dx = vec![F::zero(); n * d];
                let mut dgamma = vec![F::zero(); d];
                let mut dbeta = vec![F::zero(); d];
                let mut xhat = vec![F::zero(); d];
                let mut dxhat = vec![F::zero(); d];
                for r in 0..n {
                    let row = &xv[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mut s1 = F::zero();
                    let mut s2 = F::zero();
                    for j in 0..d {
                        xhat[j] = (row[j] - mean[r]) * rstd[r];
                        dxhat[j] = gr[j] * gv[j];
                        s1 = s1 + dxhat[j];
                        s2 = s2 + dxhat[j] * xhat[j];
                        dgamma[j] = dgamma[j] + gr[j] * xhat[j];
                        dbeta[j] = dbeta[j] + gr[j];
                    }
                    let m1 = s1 / df;
                    let m2 = s2 / df;
                    for j in 0..d {
                        dx[r * d + j] = rstd[r] * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                if self.wants(*x) {
                    Self::acc(grads, *x, dx);
                }
                if self.wants(*gamma) {
                    Self::acc(grads, *gamma, dgamma);
                }
                if self.wants(*beta) {
                    Self::acc(grads, *beta, dbeta);
                }
            }
            Op::Embedding { table, ids } => {
                let d = node.cols;
                self.acc_with(grads, *table, |dt| {
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut dt[id * d..(id + 1) * d];
                        dst.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, b)| *a = *a + *b);
                    }
                });
            }
            Op::Attention { qkv, batch, seq, heads, probs } => {
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let d = node.cols;
                let c3 = 3 * d;
                let dh = d / heads;
                let scale = F::one() / F::lit(dh as f64).sqrt();
                let qv = self.value(*qkv);
                let parts = par::map_range(batch * heads, |bh| {
                    let (b, h) = (bh / heads, bh % heads);
                    let base = b * seq * c3 + h * dh;
                    let q = MatRef::strided(qv, base, seq, dh, c3, 1);
                    let k = MatRef::strided(qv, base + d, seq, dh, c3, 1);
                    let v = MatRef::strided(qv, base + 2 * d, seq, dh, c3, 1);
                    let p = &probs[bh * seq * seq..(bh + 1) * seq * seq];
                    let dout = MatRef::strided(g, b * seq * d + h * dh, seq, dh, d, 1);
                    // dP = dO V^T
                    let mut dp = vec![F::zero(); seq * seq];
                    super::scalar::gemm_into(dout, v.t(), &mut dp, seq, false);
                    // dS = P * (dP - rowsum(dP * P)), folded with the score scale
                    for t in 0..seq {
                        let pr = &p[t * seq..(t + 1) * seq];
                        let dr = &mut dp[t * seq..(t + 1) * seq];
                        let dot = pr.iter().zip(dr.iter()).fold(F::zero(), |a, (x, y)| a + *x * *y);
                        for j in 0..seq {
                            dr[j] = pr[j] * (dr[j] - dot) * scale;
                        }
                    }
                    // packed [dq | dk | dv] per head, each [seq, dh]
                    let mut dq = vec![F::zero(); seq * dh];
                    let mut dk = vec![F::zero(); seq * dh];
                    let mut dv = vec![F::zero(); seq * dh];
                    let ds = MatRef::new(&dp, seq, seq);
                    super::scalar::gemm_into(ds, k, &mut dq, dh, false);
                    super::scalar::gemm_into(ds.t(), q, &mut dk, dh, false);
                    super::scalar::gemm_into(MatRef::new(p, seq, seq).t(), dout, &mut dv, dh, false);
                    (dq, dk, dv)
                });
                self.acc_with(grads, *qkv, |dst| {
                    for (bh, (dq, dk, dv)) in parts.into_iter().enumerate() {
                        let (b, h) = (bh / heads, bh % heads);
                        for t in 0..seq {
                            let row = (b * seq + t) * c3 + h * dh;
                            for (off, src) in [(0, &dq), (d, &dk), (2 * d, &dv)] {
                                let s = &src[t * dh..(t + 1) * dh];
                                dst[row + off..row + off + dh]
                                    .iter_mut()
                                    .zip(s)
                                    .for_each(|(a, b)| *a = *a + *b);
                            }
                        }
                    }
                });
            }
            Op::DepthwiseConv { x, w, b, batch, seq } => {
                let (batch, seq) = (*batch, *seq);
                let d = node.cols;
                let (k, _) = self.shape(*w);
                let pad = k / 2;
                let xv = self.value(*x);
                let wv = self.value(*w);
                if self.wants(*x) {
                    self.acc_with(grads, *x, |dx| {
                        par::for_each_chunk_mut(dx, seq * d, |bi, chunk| {
                            for t in 0..seq {
                                let gr = &g[(bi * seq + t) * d..(bi * seq + t + 1) * d];
                                for j in 0..k {
                                    let src = t as isize + j as isize - pad as isize;
                                    if src < 0 || src >= seq as isize {
                                        continue;
                                    }
                                    let dr = &mut chunk[src as usize * d..(src as usize + 1) * d];
                                    let wr = &wv[j * d..(j + 1) * d];
                                    for c in 0..d {
                                        dr[c] = dr[c] + wr[c] * gr[c];
                                    }
                                }
                            }
                        });
                    });
                }
                if self.wants(*w) {
                    self.acc_with(grads, *w, |dw| {
                        for bi in 0..batch {
                            for t in 0..seq {
                                let gr = &g[(bi * seq + t) * d..(bi * seq + t + 1) * d];
                                for j in 0..k {
                                    let src = t as isize + j as isize - pad as isize;
                                    if src < 0 || src >= seq as isize {
                                        continue;
                                    }
                                    let xr = &xv[(bi * seq + src as usize) * d..(bi * seq + src as usize + 1) * d];
                                    let dwr = &mut dw[j * d..(j + 1) * d];
                                    for c in 0..d {
                                        dwr[c] = dwr[c] + xr[c] * gr[c];
                                    }
                                }
                            }
                        }
                    });
                }
                if self.wants(*b) {
                    self.acc_with(grads, *b, |db| {
                        for row in g.chunks(d) {
                            db.iter_mut().zip(row).for_each(|(a, r)| *a = *a + *r);
                        }
                    });
                }
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let (n, c) = self.shape(*logits);
                let g0 = g[0];
                self.acc_with(grads, *logits, |dl| {
                    for r in 0..n {
                        let w = weights[r];
                        if w == F::zero() {
                            continue;
                        }
                        let s = g0 * w;
                        let p = &probs[r * c..(r + 1) * c];
                        let dr = &mut dl[r * c..(r + 1) * c];
                        for j in 0..c {
                            dr[j] = dr[j] + s * p[j];
                        }
                        dr[targets[r]] = dr[targets[r]] - s;
                    }
                });
            }
            Op::MeanPool { x, groups } => {
                let d = node.cols;
                self.acc_with(grads, *x, |dx| {
                    for (gi, &(s, e)) in groups.iter().enumerate() {
                        let inv = F::one() / F::lit((e - s) as f64);
                        let gr = &g[gi * d..(gi + 1) * d];
                        for r in s..e {
                            for j in 0..d {
                                dx[r * d + j] = dx[r * d + j] + gr[j] * inv;
                            }
                        }
                    }
                });
            }
            Op::SpanMeanMax { x, spans, argmax } => {
                let d = node.cols / 2;
                self.acc_with(grads, *x, |dx| {
                    for (gi, &(s, e)) in spans.iter().enumerate() {
                        let inv = F::one() / F::lit((e - s) as f64);
                        let gr = &g[gi * 2 * d..(gi + 1) * 2 * d];
                        for r in s..e {
                            for j in 0..d {
                                dx[r * d + j] = dx[r * d + j] + gr[j] * inv;
                            }
                        }
                        for j in 0..d {
                            let r = argmax[gi * d + j];
                            dx[r * d + j] = dx[r * d + j] + gr[d + j];
                        }
                    }
                });
            }
        }
    }

    /// Collect parameter gradients into store order, rejecting non-finite values.
    pub fn param_grads(&self, node_grads: &NodeGrads<F>, store: &ParamStore<F>) -> Result<Gradients<F>> {
        let mut out = Gradients::zeros_like(store);
        for (pi, slot) in self.param_vars.iter().enumerate() {
            let Some(var) = slot else { continue };
            if let Some(g) = &node_grads.grads[var.0] {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient(store.entries()[pi].name.clone()));
                }
                out.values[pi].copy_from_slice(g);
            }
        }
        Ok(out)
    }
}

/// Per-node gradients from one reverse sweep.
pub struct NodeGrads<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> NodeGrads<F> {
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads[v.0].as_deref()
    }
}

