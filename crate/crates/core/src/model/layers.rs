//! Pre-norm transformer blocks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{Binder, ParamId, ParamStore};
use super::ModelConfig;
use crate::error::Result;
use crate::tensor::{Tensor, Var};

/// Registers parameters under a common name prefix with Xavier-uniform init.
pub(crate) struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    pub fn xavier(&mut self, name: String, fan_in: usize, fan_out: usize) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(&[fan_in, fan_out], |_| rng.gen_range(-bound..bound));
        self.store.add(name, t)
    }

    pub fn constant(&mut self, name: String, len: usize, value: f64) -> ParamId {
        self.store.add(name, Tensor::full(&[len], value))
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn new(init: &mut Init<'_>, prefix: &str, d: usize) -> Self {
        Self {
            gain: init.constant(format!("{prefix}.gain"), d, 1.0),
            bias: init.constant(format!("{prefix}.bias"), d, 0.0),
        }
    }

    fn forward(&self, b: &Binder<'_>, x: Var, eps: f64) -> Result<Var> {
        b.graph().layer_norm(x, b.param(self.gain), b.param(self.bias), eps)
    }

    const fn numel(d: usize) -> usize {
        2 * d
    }
}

#[derive(Clone, Debug)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    fn new(init: &mut Init<'_>, prefix: &str, d_in: usize, d_out: usize) -> Self {
        Self {
            weight: init.xavier(format!("{prefix}.weight"), d_in, d_out),
            bias: init.constant(format!("{prefix}.bias"), d_out, 0.0),
        }
    }

    fn forward(&self, b: &Binder<'_>, x: Var) -> Result<Var> {
        let g = b.graph();
        g.add_bias(g.matmul(x, b.param(self.weight))?, b.param(self.bias))
    }

    const fn numel(d_in: usize, d_out: usize) -> usize {
        d_in * d_out + d_out
    }
}

#[derive(Clone, Debug)]
struct Attention {
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    n_heads: usize,
}

impl Attention {
    fn new(init: &mut Init<'_>, prefix: &str, c: &ModelConfig) -> Self {
        let d = c.d_model;
        Self {
            query: Linear::new(init, &format!("{prefix}.query"), d, d),
            key: Linear::new(init, &format!("{prefix}.key"), d, d),
            value: Linear::new(init, &format!("{prefix}.value"), d, d),
            output: Linear::new(init, &format!("{prefix}.output"), d, d),
            n_heads: c.n_heads,
        }
    }

    fn split_heads(&self, b: &Binder<'_>, x: Var) -> Result<Var> {
        let g = b.graph();
        let s = g.shape(x);
        let (batch, len, d) = (s[0], s[1], s[2]);
        let x = g.reshape(x, &[batch, len, self.n_heads, d / self.n_heads])?;
        g.permute(x, &[0, 2, 1, 3])
    }

    /// `allowed[b, i, j]` says whether query `i` of row `b` may attend to key `j`.
    fn forward(&self, b: &Binder<'_>, queries: Var, keys: Var, allowed: &[bool]) -> Result<Var> {
        let g = b.graph();
        let qs = g.shape(queries);
        let (batch, tq, d) = (qs[0], qs[1], qs[2]);
        let tk = g.shape(keys)[1];
        let head_dim = d / self.n_heads;

        let q = self.split_heads(b, self.query.forward(b, queries)?)?;
        let k = self.split_heads(b, self.key.forward(b, keys)?)?;
        let v = self.split_heads(b, self.value.forward(b, keys)?)?;

        let scores = g.scale(g.batch_matmul_bt(q, k)?, 1.0 / (head_dim as f64).sqrt());
        let mut mask = Vec::with_capacity(batch * self.n_heads * tq * tk);
        for row in allowed.chunks(tq * tk) {
            for _ in 0..self.n_heads {
                mask.extend_from_slice(row);
            }
        }
        let weights = b.dropout(g.masked_softmax(scores, &mask)?)?;
        let context = g.permute(g.batch_matmul(weights, v)?, &[0, 2, 1, 3])?;
        let context = g.reshape(context, &[batch, tq, d])?;
        self.output.forward(b, context)
    }

    const fn numel(d: usize) -> usize {
        4 * Linear::numel(d, d)
    }
}

#[derive(Clone, Debug)]
struct FeedForward {
    inner: Linear,
    outer: Linear,
}

impl FeedForward {
    fn new(init: &mut Init<'_>, prefix: &str, c: &ModelConfig) -> Self {
        Self {
            inner: Linear::new(init, &format!("{prefix}.inner"), c.d_model, c.d_ff),
            outer: Linear::new(init, &format!("{prefix}.outer"), c.d_ff, c.d_model),
        }
    }

    fn forward(&self, b: &Binder<'_>, x: Var) -> Result<Var> {
        let h = b.dropout(b.graph().gelu(self.inner.forward(b, x)?))?;
        self.outer.forward(b, h)
    }

    const fn numel(d: usize, d_ff: usize) -> usize {
        Linear::numel(d, d_ff) + Linear::numel(d_ff, d)
    }
}

/// `x + dropout(sublayer(norm(x)))`.
fn residual(
    b: &Binder<'_>,
    x: Var,
    norm: &Norm,
    eps: f64,
    sublayer: impl FnOnce(Var) -> Result<Var>,
) -> Result<Var> {
    let h = sublayer(norm.forward(b, x, eps)?)?;
    b.graph().add(x, b.dropout(h)?)
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    norm_attn: Norm,
    self_attn: Attention,
    norm_ff: Norm,
    ff: FeedForward,
}

#[derive(Clone, Debug)]
pub(crate) struct Encoder {
    layers: Vec<EncoderLayer>,
    final_norm: Norm,
    eps: f64,
}

impl Encoder {
    pub fn new(init: &mut Init<'_>, prefix: &str, c: &ModelConfig) -> Self {
        let layers = (0..c.n_enc_layers)
            .map(|i| {
                let p = format!("{prefix}.layers.{i}");
                EncoderLayer {
                    norm_attn: Norm::new(init, &format!("{p}.norm_attn"), c.d_model),
                    self_attn: Attention::new(init, &format!("{p}.self_attn"), c),
                    norm_ff: Norm::new(init, &format!("{p}.norm_ff"), c.d_model),
                    ff: FeedForward::new(init, &format!("{p}.ff"), c),
                }
            })
            .collect();
        Self {
            layers,
            final_norm: Norm::new(init, &format!("{prefix}.final_norm"), c.d_model),
            eps: c.layer_norm_eps,
        }
    }

    /// `x: [B, S, d]`, `key_mask: [B × S]` real-token mask.
    pub fn forward(&self, b: &Binder<'_>, mut x: Var, key_mask: &[bool]) -> Result<Var> {
        let s = b.graph().shape(x);
        let (batch, len) = (s[0], s[1]);
        let mut allowed = Vec::with_capacity(batch * len * len);
        for row in key_mask.chunks(len) {
            for _ in 0..len {
                allowed.extend_from_slice(row);
            }
        }
        for layer in &self.layers {
            x = residual(b, x, &layer.norm_attn, self.eps, |h| layer.self_attn.forward(b, h, h, &allowed))?;
            x = residual(b, x, &layer.norm_ff, self.eps, |h| layer.ff.forward(b, h))?;
        }
        self.final_norm.forward(b, x, self.eps)
    }

    pub const fn layer_numel(d: usize, d_ff: usize) -> usize {
        2 * Norm::numel(d) + Attention::numel(d) + FeedForward::numel(d, d_ff)
    }

    pub const fn numel(c: &ModelConfig) -> usize {
        c.n_enc_layers * Self::layer_numel(c.d_model, c.d_ff) + Norm::numel(c.d_model)
    }
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    norm_self: Norm,
    self_attn: Attention,
    norm_cross: Norm,
    cross_attn: Attention,
    norm_ff: Norm,
    ff: FeedForward,
}

/// Causal decoder stack with cross-attention. `projection` is `None` when the
/// output projection is the transposed shared embedding.
#[derive(Clone, Debug)]
pub(crate) struct Decoder {
    layers: Vec<DecoderLayer>,
    final_norm: Norm,
    projection: Option<ParamId>,
    eps: f64,
}

impl Decoder {
    pub fn new(init: &mut Init<'_>, prefix: &str, c: &ModelConfig, own_projection: bool) -> Self {
        let layers = (0..c.n_dec_layers)
            .map(|i| {
                let p = format!("{prefix}.layers.{i}");
                DecoderLayer {
                    norm_self: Norm::new(init, &format!("{p}.norm_self"), c.d_model),
                    self_attn: Attention::new(init, &format!("{p}.self_attn"), c),
                    norm_cross: Norm::new(init, &format!("{p}.norm_cross"), c.d_model),
                    cross_attn: Attention::new(init, &format!("{p}.cross_attn"), c),
                    norm_ff: Norm::new(init, &format!("{p}.norm_ff"), c.d_model),
                    ff: FeedForward::new(init, &format!("{p}.ff"), c),
                }
            })
            .collect();
        let final_norm = Norm::new(init, &format!("{prefix}.final_norm"), c.d_model);
        let projection =
            own_projection.then(|| init.xavier(format!("{prefix}.projection"), c.d_model, c.vocab_size));
        Self { layers, final_norm, projection, eps: c.layer_norm_eps }
    }

    pub fn projection(&self) -> Option<ParamId> {
        self.projection
    }

    /// `x: [B, T, d]` embedded decoder input; returns logits `[B, T, V]`.
    pub fn forward(
        &self,
        b: &Binder<'_>,
        mut x: Var,
        target_mask: &[bool],
        memory: Var,
        memory_mask: &[bool],
        embedding: ParamId,
    ) -> Result<Var> {
        let g = b.graph();
        let s = g.shape(x);
        let (batch, len) = (s[0], s[1]);
        let mem_len = g.shape(memory)[1];

        let mut causal = Vec::with_capacity(batch * len * len);
        let mut cross = Vec::with_capacity(batch * len * mem_len);
        for r in 0..batch {
            let tmask = &target_mask[r * len..(r + 1) * len];
            let mmask = &memory_mask[r * mem_len..(r + 1) * mem_len];
            for i in 0..len {
                causal.extend((0..len).map(|j| j <= i && tmask[j]));
                cross.extend_from_slice(mmask);
            }
        }
        for layer in &self.layers {
            x = residual(b, x, &layer.norm_self, self.eps, |h| layer.self_attn.forward(b, h, h, &causal))?;
            x = residual(b, x, &layer.norm_cross, self.eps, |h| {
                layer.cross_attn.forward(b, h, memory, &cross)
            })?;
            x = residual(b, x, &layer.norm_ff, self.eps, |h| layer.ff.forward(b, h))?;
        }
        let h = self.final_norm.forward(b, x, self.eps)?;
        let proj = match self.projection {
            Some(p) => b.param(p),
            None => g.transpose(b.param(embedding))?,
        };
        g.matmul(h, proj)
    }

    pub const fn layer_numel(d: usize, d_ff: usize) -> usize {
        3 * Norm::numel(d) + 2 * Attention::numel(d) + FeedForward::numel(d, d_ff)
    }

    pub const fn numel(c: &ModelConfig, own_projection: bool) -> usize {
        let proj = if own_projection { c.d_model * c.vocab_size } else { 0 };
        c.n_dec_layers * Self::layer_numel(c.d_model, c.d_ff) + Norm::numel(c.d_model) + proj
    }
}
