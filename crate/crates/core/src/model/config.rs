use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_eps() -> f64 {
    1e-5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    #[serde(default)]
    pub dropout_rate: f64,
    #[serde(default)]
    pub seed: u64,
    /// When false (default) the CLM decoder owns its output projection;
    /// when true it shares the transposed embedding like the translation decoder.
    #[serde(default)]
    pub tie_clm_projection: bool,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
}

impl ModelConfig {
    /// CPU-sized default: 64-wide, 4 heads, 4 + 4 layers.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 4,
            n_dec_layers: 4,
            d_ff: 256,
            vocab_size,
            max_len: 64,
            dropout_rate: 0.0,
            seed: 0,
            tie_clm_projection: false,
            layer_norm_eps: default_eps(),
        }
    }

    /// Full-size layout of the 12 + 12 layer pretrained model family.
    pub fn paper_scale(vocab_size: usize) -> Self {
        Self {
            d_model: 1024,
            n_heads: 16,
            n_enc_layers: 12,
            n_dec_layers: 12,
            d_ff: 4096,
            vocab_size,
            max_len: 1024,
            dropout_rate: 0.1,
            ..Self::desk(vocab_size)
        }
    }

    /// Tiny layout used by tests.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            d_model: 8,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ff: 16,
            vocab_size,
            max_len: 16,
            ..Self::desk(vocab_size)
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("layer_norm_eps must be positive".into()));
        }
        Ok(())
    }

    /// Digest of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        crate::fingerprint(&serde_json::to_string(self).expect("config serializes"))
    }
}
