//! Pre-norm Conformer block: half-step feed-forward, multi-head
//! self-attention, depthwise convolution module, half-step feed-forward,
//! final layer norm. The convolution module normalises with a layer norm so
//! every utterance is processed independently of its batch.

use rand::Rng;

use crate::nn::{Graph, ParamId, ParamStore, Scalar, Var};

#[derive(Clone, Copy, Debug)]
pub struct BlockDims {
    pub model_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub kernel: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct FeedForward {
    norm: Norm,
    up: Dense,
    down: Dense,
}

#[derive(Clone, Debug)]
pub struct ConformerBlock {
    dims: BlockDims,
    ff1: FeedForward,
    attn_norm: Norm,
    qkv: Dense,
    attn_out: Dense,
    conv_norm: Norm,
    pointwise_in: Dense,
    depthwise_w: ParamId,
    depthwise_b: ParamId,
    depthwise_norm: Norm,
    pointwise_out: Dense,
    ff2: FeedForward,
    final_norm: Norm,
}

pub(crate) fn norm<F: Scalar>(store: &mut ParamStore<F>, prefix: &str, d: usize) -> Norm {
    Norm {
        gamma: store.filled(format!("{prefix}.gamma"), vec![1, d], 1.0),
        beta: store.zeros(format!("{prefix}.beta"), vec![1, d]),
    }
}

pub(crate) fn dense<F: Scalar, R: Rng>(store: &mut ParamStore<F>, prefix: &str, din: usize, dout: usize, rng: &mut R) -> Dense {
    let bound = 1.0 / (din as f64).sqrt();
    Dense {
        w: store.uniform(format!("{prefix}.weight"), vec![din, dout], bound, rng),
        b: store.zeros(format!("{prefix}.bias"), vec![1, dout]),
    }
}

impl Norm {
    pub(crate) fn apply<F: Scalar>(&self, g: &mut Graph<F>, s: &ParamStore<F>, x: Var) -> Var {
        let gamma = g.param(s, self.gamma);
        let beta = g.param(s, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

impl Dense {
    pub(crate) fn apply<F: Scalar>(&self, g: &mut Graph<F>, s: &ParamStore<F>, x: Var) -> Var {
        let w = g.param(s, self.w);
        let b = g.param(s, self.b);
        g.linear(x, w, Some(b))
    }
}

impl FeedForward {
    fn new<F: Scalar, R: Rng>(store: &mut ParamStore<F>, prefix: &str, d: usize, ff: usize, rng: &mut R) -> Self {
        FeedForward {
            norm: norm(store, &format!("{prefix}.norm"), d),
            up: dense(store, &format!("{prefix}.up"), d, ff, rng),
            down: dense(store, &format!("{prefix}.down"), ff, d, rng),
        }
    }

    fn apply<F: Scalar>(&self, g: &mut Graph<F>, s: &ParamStore<F>, x: Var) -> Var {
        let h = self.norm.apply(g, s, x);
        let h = self.up.apply(g, s, h);
        let h = g.silu(h);
        self.down.apply(g, s, h)
    }
}

impl ConformerBlock {
    /// Register the block's parameters under `prefix`.
    pub fn new<F: Scalar, R: Rng>(store: &mut ParamStore<F>, prefix: &str, dims: BlockDims, rng: &mut R) -> Self {
        let d = dims.model_dim;
        assert_eq!(d % dims.num_heads, 0, "model_dim must be divisible by num_heads");
        assert_eq!(dims.kernel % 2, 1, "conv kernel must be odd");
        let ff1 = FeedForward::new(store, &format!("{prefix}.ff1"), d, dims.ff_dim, rng);
        let attn_norm = norm(store, &format!("{prefix}.attn.norm"), d);
        let qkv = dense(store, &format!("{prefix}.attn.qkv"), d, 3 * d, rng);
        let attn_out = dense(store, &format!("{prefix}.attn.out"), d, d, rng);
        let conv_norm = norm(store, &format!("{prefix}.conv.norm"), d);
        let pointwise_in = dense(store, &format!("{prefix}.conv.pointwise_in"), d, 2 * d, rng);
        let kbound = 1.0 / (dims.kernel as f64).sqrt();
        let depthwise_w = store.uniform(format!("{prefix}.conv.depthwise.weight"), vec![dims.kernel, d], kbound, rng);
        let depthwise_b = store.zeros(format!("{prefix}.conv.depthwise.bias"), vec![1, d]);
        let depthwise_norm = norm(store, &format!("{prefix}.conv.depthwise_norm"), d);
        let pointwise_out = dense(store, &format!("{prefix}.conv.pointwise_out"), d, d, rng);
        let ff2 = FeedForward::new(store, &format!("{prefix}.ff2"), d, dims.ff_dim, rng);
        let final_norm = norm(store, &format!("{prefix}.final_norm"), d);
        ConformerBlock {
            dims,
            ff1,
            attn_norm,
            qkv,
            attn_out,
            conv_norm,
            pointwise_in,
            depthwise_w,
            depthwise_b,
            depthwise_norm,
            pointwise_out,
            ff2,
            final_norm,
        }
    }

    /// `x: [batch * seq, model_dim]`.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, s: &ParamStore<F>, x: Var, batch: usize, seq: usize) -> Var {
        let h = self.ff1.apply(g, s, x);
        let h = g.scale(h, 0.5);
        let x = g.add(x, h);

        let h = self.attn_norm.apply(g, s, x);
        let h = self.qkv.apply(g, s, h);
        let h = g.attention(h, batch, seq, self.dims.num_heads);
        let h = self.attn_out.apply(g, s, h);
        let x = g.add(x, h);

        let h = self.conv_norm.apply(g, s, x);
        let h = self.pointwise_in.apply(g, s, h);
        let h = g.glu(h);
        let w = g.param(s, self.depthwise_w);
        let b = g.param(s, self.depthwise_b);
        let h = g.depthwise_conv(h, w, b, batch, seq);
        let h = self.depthwise_norm.apply(g, s, h);
        let h = g.silu(h);
        let h = self.pointwise_out.apply(g, s, h);
        let x = g.add(x, h);

        let h = self.ff2.apply(g, s, x);
        let h = g.scale(h, 0.5);
        let x = g.add(x, h);
        self.final_norm.apply(g, s, x)
    }
}

/// Sinusoidal position table `[seq, d]`.
pub fn sinusoidal_positions(seq: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; seq * d];
    for t in 0..seq {
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            out[t * d + 2 * i] = (t as f64 * freq).sin();
            out[t * d + 2 * i + 1] = (t as f64 * freq).cos();
        }
    }
    out
}
