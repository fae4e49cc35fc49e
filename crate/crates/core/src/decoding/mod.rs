//! Greedy and beam-search decoding with length-normalized scoring.

mod scorer;
mod search;

use serde::{Deserialize, Serialize};

pub use scorer::{log_softmax, ModelScorer, StepScorer};
pub use search::{beam_search, greedy_decode, translate};

use crate::error::{Error, Result};
use crate::text::{TokenId, EOS_ID};

/// Length normalization applied to a summed log-probability.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyForm {
    /// `len^α`
    #[default]
    Power,
    /// `((5 + len) / 6)^α`
    Gnmt,
}

impl PenaltyForm {
    pub fn factor(self, length: usize, alpha: f64) -> f64 {
        match self {
            PenaltyForm::Power => (length as f64).powf(alpha),
            PenaltyForm::Gnmt => ((5.0 + length as f64) / 6.0).powf(alpha),
        }
    }
}

/// What beam candidates compete on while the search is running.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMode {
    /// Live candidates compete on raw log-probability; finished hypotheses
    /// leave the beam for a separate pool and the penalty only ranks them.
    #[default]
    Raw,
    /// Live candidates and finished hypotheses share one beam ranked by the
    /// penalized score; the search ends once every survivor is finished.
    Penalized,
}

fn default_beam() -> usize {
    2
}

fn default_alpha() -> f64 {
    1.2
}

fn default_eos() -> TokenId {
    EOS_ID
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    #[serde(default = "default_beam")]
    pub beam_size: usize,
    #[serde(default = "default_alpha")]
    pub length_penalty: f64,
    pub max_decode_len: usize,
    #[serde(default = "default_eos")]
    pub eos_id: TokenId,
    #[serde(default)]
    pub penalty_form: PenaltyForm,
    #[serde(default)]
    pub prune: PruneMode,
}

impl DecodeConfig {
    /// Beam 2, length penalty 1.2.
    pub fn paper(max_decode_len: usize) -> Self {
        Self {
            beam_size: default_beam(),
            length_penalty: default_alpha(),
            max_decode_len,
            eos_id: EOS_ID,
            penalty_form: PenaltyForm::Power,
            prune: PruneMode::Raw,
        }
    }

    pub fn greedy(max_decode_len: usize) -> Self {
        Self { beam_size: 1, ..Self::paper(max_decode_len) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Config("beam_size must be at least 1".into()));
        }
        if self.max_decode_len == 0 {
            return Err(Error::Config("max_decode_len must be at least 1".into()));
        }
        if !self.length_penalty.is_finite() {
            return Err(Error::Config("length_penalty must be finite".into()));
        }
        Ok(())
    }

    pub fn score(&self, logprob_sum: f64, length: usize) -> Result<f64> {
        if length == 0 {
            return Err(Error::Config("cannot score an empty hypothesis".into()));
        }
        Ok(logprob_sum / self.penalty_form.factor(length, self.length_penalty))
    }
}

/// `logprob_sum / length^α`.
pub fn score_hypothesis(logprob_sum: f64, length: usize, alpha: f64) -> Result<f64> {
    if length == 0 {
        return Err(Error::Config("cannot score an empty hypothesis".into()));
    }
    Ok(logprob_sum / PenaltyForm::Power.factor(length, alpha))
}

/// Decoded token ids, excluding the start token and including EOS when the
/// hypothesis ended on it.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<TokenId>,
    pub logprob_sum: f64,
    pub score: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Tokens with a trailing EOS removed.
    pub fn content(&self, eos_id: TokenId) -> &[TokenId] {
        match self.tokens.split_last() {
            Some((&last, rest)) if last == eos_id => rest,
            _ => &self.tokens,
        }
    }
}
