//! Configurable micro-transformer and the two assemblies under comparison:
//! a baseline encoder-decoder, and a multitask model in which one shared
//! encoder feeds both a translation decoder and a causal-LM decoder.

mod config;
mod layers;
mod params;

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::ModelConfig;
pub use params::{Binder, ParamId, ParamStore};

use layers::{Decoder, Encoder, Init};

use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};
use crate::text::{Batch, TokenMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Encoder + translation decoder.
    Baseline,
    /// Shared encoder + translation decoder + CLM decoder.
    #[serde(alias = "multitask")]
    Mtl,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Baseline => "baseline",
            ModelKind::Mtl => "mtl",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderKind {
    Translation,
    Clm,
}

/// Sinusoidal position table, `[len, d]` row-major.
pub fn positional_encoding(len: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; len * d];
    for pos in 0..len {
        for i in (0..d).step_by(2) {
            let angle = pos as f64 / 10_000f64.powf(i as f64 / d as f64);
            pe[pos * d + i] = angle.sin();
            if i + 1 < d {
                pe[pos * d + i + 1] = angle.cos();
            }
        }
    }
    pe
}

#[derive(Clone, Debug)]
pub struct NmtModel {
    config: ModelConfig,
    kind: ModelKind,
    params: ParamStore,
    embedding: ParamId,
    encoder: Encoder,
    decoder: Decoder,
    clm_decoder: Option<Decoder>,
}

impl NmtModel {
    /// Deterministic initialization from `config.seed`. Parameters are
    /// registered embedding, encoder, translation decoder, then CLM decoder,
    /// so a baseline and a multitask model built from the same config start
    /// with identical weights in every slot they share.
    pub fn new(config: ModelConfig, kind: ModelKind) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut init = Init { store: &mut params, rng: &mut rng };
        let embedding = init.xavier("embedding".into(), config.vocab_size, config.d_model);
        let encoder = Encoder::new(&mut init, "encoder", &config);
        let decoder = Decoder::new(&mut init, "decoder", &config, false);
        let clm_decoder = (kind == ModelKind::Mtl)
            .then(|| Decoder::new(&mut init, "clm_decoder", &config, !config.tie_clm_projection));
        Ok(Self { config, kind, params, embedding, encoder, decoder, clm_decoder })
    }

    pub fn baseline(config: ModelConfig) -> Result<Self> {
        Self::new(config, ModelKind::Baseline)
    }

    pub fn multitask(config: ModelConfig) -> Result<Self> {
        Self::new(config, ModelKind::Mtl)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Closed-form parameter count:
    ///
    /// ```text
    /// attn  = 4 (d² + d)              norm = 2d
    /// ff    = 2 d d_ff + d_ff + d
    /// enc   = L_enc (2 norm + attn + ff) + norm
    /// dec   = L_dec (3 norm + 2 attn + ff) + norm     (+ d V if it owns its projection)
    /// total = V d + enc + dec [+ dec_clm]
    /// ```
    pub fn expected_numel(config: &ModelConfig, kind: ModelKind) -> usize {
        let base = config.vocab_size * config.d_model + Encoder::numel(config) + Decoder::numel(config, false);
        match kind {
            ModelKind::Baseline => base,
            ModelKind::Mtl => base + Decoder::numel(config, !config.tie_clm_projection),
        }
    }

    /// Sets the embedding and every output projection to zero so that all
    /// predictive distributions start exactly uniform.
    pub fn zero_output_projections(&mut self) {
        let mut ids = vec![self.embedding];
        ids.extend(self.clm_decoder.as_ref().and_then(Decoder::projection));
        for id in ids {
            self.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn embed(&self, b: &Binder<'_>, tokens: &TokenMatrix) -> Result<Var> {
        if tokens.cols > self.config.max_len {
            return Err(Error::shape(
                "embed",
                format!("sequence length {} exceeds max_len {}", tokens.cols, self.config.max_len),
            ));
        }
        let g = b.graph();
        let d = self.config.d_model;
        let e = g.embedding(b.param(self.embedding), &tokens.ids, &[tokens.rows, tokens.cols])?;
        let e = g.scale(e, (d as f64).sqrt());
        let pe = positional_encoding(tokens.cols, d);
        let pe = Tensor::new(vec![tokens.rows, tokens.cols, d], pe.repeat(tokens.rows))?;
        b.dropout(g.add(e, g.constant(pe))?)
    }

    /// Encoder states `[B, S, d]`.
    pub fn encode(&self, b: &Binder<'_>, source: &TokenMatrix) -> Result<Var> {
        let x = self.embed(b, source)?;
        self.encoder.forward(b, x, &source.mask)
    }

    fn decoder(&self, which: DecoderKind) -> Result<&Decoder> {
        match which {
            DecoderKind::Translation => Ok(&self.decoder),
            DecoderKind::Clm => self
                .clm_decoder
                .as_ref()
                .ok_or_else(|| Error::Config("baseline model has no CLM decoder".into())),
        }
    }

    /// Logits `[B, T, V]` for a teacher-forced decoder input given encoder states.
    pub fn decode(
        &self,
        b: &Binder<'_>,
        which: DecoderKind,
        input: &TokenMatrix,
        memory: Var,
        memory_mask: &[bool],
    ) -> Result<Var> {
        let dec = self.decoder(which)?;
        let ms = b.graph().shape(memory);
        if ms.len() != 3 || ms[0] != input.rows || ms[2] != self.config.d_model || memory_mask.len() != ms[0] * ms[1] {
            return Err(Error::shape(
                "decode",
                format!("memory {ms:?} with mask of {} for {} input rows", memory_mask.len(), input.rows),
            ));
        }
        let x = self.embed(b, input)?;
        dec.forward(b, x, &input.mask, memory, memory_mask, self.embedding)
    }

    /// Logits for `P(target | source)` under teacher forcing.
    pub fn translation_logits(&self, b: &Binder<'_>, batch: &Batch) -> Result<Var> {
        let memory = self.encode(b, &batch.source)?;
        self.decode(b, DecoderKind::Translation, &batch.decoder_input, memory, &batch.source.mask)
    }

    /// Logits for `P(x_t | x_<t)` from the CLM decoder.
    pub fn clm_logits(&self, b: &Binder<'_>, batch: &Batch) -> Result<Var> {
        self.decoder(DecoderKind::Clm)?;
        let memory = self.encode(b, &batch.source)?;
        self.decode(b, DecoderKind::Clm, &batch.decoder_input, memory, &batch.source.mask)
    }

    /// Names of every parameter belonging to the given decoder.
    pub fn decoder_param_names(&self, which: DecoderKind) -> Vec<&str> {
        let prefix = match which {
            DecoderKind::Translation => "decoder.",
            DecoderKind::Clm => "clm_decoder.",
        };
        self.params.names().iter().filter(|n| n.starts_with(prefix)).map(String::as_str).collect()
    }

    pub fn encoder_param_names(&self) -> Vec<&str> {
        self.params.names().iter().filter(|n| n.starts_with("encoder.")).map(String::as_str).collect()
    }

    /// Copies every tensor whose name also exists in `other`.
    pub fn copy_shared_from(&mut self, other: &NmtModel) -> Result<usize> {
        let mut copied = 0;
        for id in other.params.ids() {
            let name = other.params.name(id);
            if let Some(dst) = self.params.by_name_mut(name) {
                if dst.shape() != other.params.get(id).shape() {
                    return Err(Error::shape("copy_shared_from", format!("parameter `{name}`")));
                }
                *dst = other.params.get(id).clone();
                copied += 1;
            }
        }
        Ok(copied)
    }
}

/// Parameters excluded from optimization.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FreezeSpec {
    names: BTreeSet<String>,
}

impl FreezeSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn from_names<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self { names: names.into_iter().map(Into::into).collect() }
    }

    /// Every parameter of encoder layers `0..n`.
    pub fn first_encoder_layers(model: &NmtModel, n: usize) -> Self {
        let prefixes: Vec<String> = (0..n).map(|i| format!("encoder.layers.{i}.")).collect();
        Self::from_names(
            model.params.names().iter().filter(|name| prefixes.iter().any(|p| name.starts_with(p))).cloned(),
        )
    }

    /// Freezes the first half of the encoder layers.
    pub fn default_for(model: &NmtModel) -> Self {
        Self::first_encoder_layers(model, model.config.n_enc_layers / 2)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.contains(name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Trainable parameters after removing `spec`; every frozen name must exist.
pub fn apply_freeze(model: &NmtModel, spec: &FreezeSpec) -> Result<Vec<ParamId>> {
    if let Some(missing) = spec.names().find(|n| model.params.id(n).is_none()) {
        return Err(Error::Config(format!("cannot freeze unknown parameter `{missing}`")));
    }
    Ok(model.params.ids().filter(|&id| !spec.contains(model.params.name(id))).collect())
}
