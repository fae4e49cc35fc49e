use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::synthetic::{Relation, SyntheticSpec};
use crate::decoding::DecodeConfig;
use crate::error::{Error, Result};
use crate::evaluation::BleuConfig;
use crate::model::{ModelConfig, ModelKind};
use crate::text::{validate_language, SplitSizes, TokenizeMode};
use crate::training::{OptimizerConfig, TrainConfig};

/// Translation from `source` into `target`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Direction {
    pub source: String,
    pub target: String,
}

impl Direction {
    pub fn new(source: &str, target: &str) -> Self {
        Self { source: source.to_owned(), target: target.to_owned() }
    }

    /// Directory-safe name, `src-tgt`.
    pub fn slug(&self) -> String {
        format!("{}-{}", self.source, self.target)
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}→{}", self.source, self.target)
    }
}

impl FromStr for Direction {
    type Err = Error;

    /// Accepts `src-tgt` or `src→tgt`.
    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once('-')
            .or_else(|| s.split_once('→'))
            .ok_or_else(|| Error::Config(format!("direction `{s}` is not of the form src-tgt")))?;
        Ok(Self::new(a.trim(), b.trim()))
    }
}

/// Model hyperparameters; the vocabulary size and seed are filled in later.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    #[serde(default)]
    pub dropout_rate: f64,
    #[serde(default)]
    pub tie_clm_projection: bool,
    pub layer_norm_eps: f64,
}

impl ModelShape {
    pub fn from_config(c: &ModelConfig) -> Self {
        Self {
            d_model: c.d_model,
            n_heads: c.n_heads,
            n_enc_layers: c.n_enc_layers,
            n_dec_layers: c.n_dec_layers,
            d_ff: c.d_ff,
            max_len: c.max_len,
            dropout_rate: c.dropout_rate,
            tie_clm_projection: c.tie_clm_projection,
            layer_norm_eps: c.layer_norm_eps,
        }
    }

    pub fn config(&self, vocab_size: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_enc_layers: self.n_enc_layers,
            n_dec_layers: self.n_dec_layers,
            d_ff: self.d_ff,
            vocab_size,
            max_len: self.max_len,
            dropout_rate: self.dropout_rate,
            seed,
            tie_clm_projection: self.tie_clm_projection,
            layer_norm_eps: self.layer_norm_eps,
        }
    }
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub tokenize: TokenizeMode,
    #[serde(default = "one")]
    pub min_count: usize,
    /// Language code to sentence-aligned file; exactly two languages.
    pub parallel: BTreeMap<String, PathBuf>,
    /// Language code to monolingual file. Needed by the multitask regime.
    #[serde(default)]
    pub monolingual: BTreeMap<String, PathBuf>,
    pub parallel_split: SplitSizes,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub monolingual_split: Option<SplitSizes>,
    /// When set, `prepare` writes generated corpora to the paths above first.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
}

impl DataConfig {
    pub fn languages(&self) -> Vec<&str> {
        self.parallel.keys().map(String::as_str).collect()
    }
}

/// Settings that differ for the multitask regime.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub translation_batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clm_batch_size: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Drives splits, initialization, data order and dropout.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub directions: Vec<Direction>,
    /// Encoder layers kept frozen; half the encoder when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub freeze_encoder_layers: Option<usize>,
    pub data: DataConfig,
    pub model: ModelShape,
    pub train: TrainConfig,
    #[serde(default)]
    pub mtl: RegimeOverrides,
    pub optimizer: OptimizerConfig,
    pub decode: DecodeConfig,
    #[serde(default)]
    pub evaluation: BleuConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Copy task, one direction.
    Smoke,
    /// Synthetic language pair at CPU scale.
    Desk,
    /// Published hyperparameters, including the 16-vs-2 batch asymmetry.
    PaperFaithful,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smoke" => Ok(Preset::Smoke),
            "desk" => Ok(Preset::Desk),
            "paper-faithful" => Ok(Preset::PaperFaithful),
            _ => Err(Error::Config(format!("unknown preset `{s}` (expected smoke, desk or paper-faithful)"))),
        }
    }
}

fn synthetic_data(out_dir: &Path, spec: SyntheticSpec, split: SplitSizes, mono: SplitSizes) -> DataConfig {
    let data = out_dir.join("data");
    let langs = ["lx", "ly"];
    DataConfig {
        tokenize: TokenizeMode::Word,
        min_count: 1,
        parallel: langs.iter().map(|l| (l.to_string(), data.join(format!("parallel.{l}")))).collect(),
        monolingual: langs.iter().map(|l| (l.to_string(), data.join(format!("mono.{l}")))).collect(),
        parallel_split: split,
        monolingual_split: Some(mono),
        synthetic: Some(spec),
    }
}

impl ExperimentConfig {
    pub fn preset(preset: Preset, out_dir: impl Into<PathBuf>) -> Self {
        let out_dir = out_dir.into();
        match preset {
            Preset::Smoke => {
                let spec = SyntheticSpec {
                    relation: Relation::Copy,
                    words: 44,
                    pairs: 240,
                    monolingual: 200,
                    min_len: 2,
                    max_len: 8,
                };
                let mut train = TrainConfig::new(16, 16);
                train.steps = Some(300);
                train.log_interval = 50;
                Self {
                    seed: 0,
                    directions: vec![Direction::new("lx", "ly")],
                    freeze_encoder_layers: Some(0),
                    data: synthetic_data(&out_dir, spec, SplitSizes::new(200, 20, 20), SplitSizes::new(200, 0, 0)),
                    out_dir,
                    model: ModelShape::from_config(&ModelConfig::desk(0)),
                    train,
                    mtl: RegimeOverrides::default(),
                    optimizer: OptimizerConfig::desk(),
                    decode: DecodeConfig::paper(16),
                    evaluation: BleuConfig::default(),
                }
            }
            Preset::Desk => {
                let spec = SyntheticSpec {
                    relation: Relation::SubstituteSwap,
                    words: 40,
                    pairs: 1040,
                    monolingual: 200,
                    min_len: 3,
                    max_len: 8,
                };
                let mut train = TrainConfig::new(8, 8);
                train.steps = Some(300);
                train.log_interval = 50;
                Self {
                    seed: 0,
                    directions: vec![Direction::new("lx", "ly"), Direction::new("ly", "lx")],
                    freeze_encoder_layers: None,
                    data: synthetic_data(&out_dir, spec, SplitSizes::new(1000, 20, 20), SplitSizes::new(200, 0, 0)),
                    out_dir,
                    model: ModelShape::from_config(&ModelConfig::desk(0)),
                    train,
                    mtl: RegimeOverrides::default(),
                    optimizer: OptimizerConfig::with_lr(1e-3),
                    decode: DecodeConfig::paper(16),
                    evaluation: BleuConfig::default(),
                }
            }
            Preset::PaperFaithful => {
                let corpus = PathBuf::from("corpus");
                let langs = ["src", "tgt"];
                let mut train = TrainConfig::new(16, 2);
                train.log_interval = 500;
                train.checkpoint_interval = Some(5000);
                Self {
                    seed: 0,
                    directions: vec![Direction::new("src", "tgt"), Direction::new("tgt", "src")],
                    freeze_encoder_layers: None,
                    data: DataConfig {
                        tokenize: TokenizeMode::Word,
                        min_count: 1,
                        parallel: langs.iter().map(|l| (l.to_string(), corpus.join(format!("parallel.{l}")))).collect(),
                        monolingual: langs.iter().map(|l| (l.to_string(), corpus.join(format!("mono.{l}")))).collect(),
                        parallel_split: SplitSizes::paper_parallel(),
                        monolingual_split: Some(SplitSizes::paper_monolingual()),
                        synthetic: None,
                    },
                    out_dir,
                    model: ModelShape::from_config(&ModelConfig::paper_scale(0)),
                    train,
                    mtl: RegimeOverrides { translation_batch_size: Some(2), clm_batch_size: Some(2) },
                    optimizer: OptimizerConfig::paper(),
                    decode: DecodeConfig::paper(256),
                    evaluation: BleuConfig::default(),
                }
            }
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses a config file; relative paths are taken relative to its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.out_dir);
        cfg.data.parallel.values_mut().chain(cfg.data.monolingual.values_mut()).for_each(resolve);
        Ok(cfg)
    }

    pub fn languages(&self) -> Vec<&str> {
        self.data.languages()
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        self.model.config(vocab_size, self.seed)
    }

    /// Training settings for one regime, seeded from the global seed.
    pub fn train_config(&self, kind: ModelKind) -> TrainConfig {
        let mut t = self.train.clone();
        t.seed = self.seed;
        if kind == ModelKind::Mtl {
            t.translation_batch_size = self.mtl.translation_batch_size.unwrap_or(t.translation_batch_size);
            t.clm_batch_size = self.mtl.clm_batch_size.unwrap_or(t.clm_batch_size);
        }
        t
    }

    pub fn freeze_layers(&self) -> usize {
        self.freeze_encoder_layers.unwrap_or(self.model.n_enc_layers / 2)
    }

    /// Structural checks that need no file access.
    pub fn validate(&self) -> Result<()> {
        let langs = self.languages();
        if langs.len() != 2 {
            return Err(Error::Config(format!("data.parallel must name exactly two languages, got {langs:?}")));
        }
        for l in langs.iter().copied().chain(self.data.monolingual.keys().map(String::as_str)) {
            validate_language(l)?;
        }
        if let Some(l) = self.data.monolingual.keys().find(|l| !langs.contains(&l.as_str())) {
            return Err(Error::Config(format!("monolingual corpus for unregistered language `{l}`")));
        }
        if !self.data.monolingual.is_empty() && self.data.monolingual_split.is_none() {
            return Err(Error::Config("data.monolingual_split is required with monolingual corpora".into()));
        }
        if self.directions.is_empty() {
            return Err(Error::Config("no directions configured".into()));
        }
        for (i, d) in self.directions.iter().enumerate() {
            if !langs.contains(&d.source.as_str()) || !langs.contains(&d.target.as_str()) || d.source == d.target {
                return Err(Error::Config(format!("direction {d} does not pair the registered languages {langs:?}")));
            }
            if self.directions[..i].contains(d) {
                return Err(Error::Config(format!("direction {d} listed twice")));
            }
        }
        if self.data.parallel_split.train == 0 {
            return Err(Error::Config("parallel_split.train must be at least 1".into()));
        }
        if self.data.parallel_split.test == 0 {
            return Err(Error::Config("parallel_split.test must be at least 1".into()));
        }
        if self.train.seed != 0 && self.train.seed != self.seed {
            return Err(Error::Config("train.seed differs from the global seed; set only `seed`".into()));
        }
        if self.freeze_layers() > self.model.n_enc_layers {
            return Err(Error::Config(format!(
                "cannot freeze {} of {} encoder layers",
                self.freeze_layers(),
                self.model.n_enc_layers
            )));
        }
        if let Some(s) = &self.data.synthetic {
            s.validate()?;
        }
        // vocabulary size is unknown here; any positive value checks the rest
        self.model_config(8).validate()?;
        self.train_config(ModelKind::Baseline).validate()?;
        self.train_config(ModelKind::Mtl).validate()?;
        self.optimizer.validate()?;
        self.decode.validate()?;
        self.evaluation.validate()
    }

    /// Every referenced corpus file must exist.
    pub fn validate_files(&self) -> Result<()> {
        for (lang, path) in self.data.parallel.iter().chain(&self.data.monolingual) {
            if !path.is_file() {
                return Err(Error::Config(format!("corpus file for `{lang}` not found: {}", path.display())));
            }
        }
        Ok(())
    }
}
