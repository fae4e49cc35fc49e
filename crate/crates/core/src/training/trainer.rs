use std::path::{Path, PathBuf};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, clip_grad_norm, AdamState, OptimizerConfig};
use super::checkpoint::{config_fingerprint, save_checkpoint, Checkpoint};
use super::log::{MetricLog, MetricRow};
use super::loss::{compute_losses, translation_loss, LossBreakdown, TaskBatches};
use crate::error::{Error, Result};
use crate::model::{apply_freeze, Binder, FreezeSpec, ModelKind, NmtModel, ParamId};
use crate::tensor::Graph;
use crate::text::{batch_order, monolingual_batch, parallel_batch, Batch, ParallelExample, TokenSequence, Vocabulary};

/// How translation and CLM batches share optimizer steps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixingMode {
    /// Every step sums one translation batch and one CLM batch per language.
    #[default]
    Joint,
    /// Even steps train translation, odd steps train both CLM sides.
    RoundRobin,
}

fn one() -> f64 {
    1.0
}

fn default_epochs() -> u64 {
    1
}

fn default_log_interval() -> u64 {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Fixed step budget; when absent the run lasts `epochs` passes over the
    /// translation training split.
    #[serde(default)]
    pub steps: Option<u64>,
    #[serde(default = "default_epochs")]
    pub epochs: u64,
    pub translation_batch_size: usize,
    pub clm_batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub checkpoint_interval: Option<u64>,
    #[serde(default = "default_log_interval")]
    pub log_interval: u64,
    #[serde(default)]
    pub mixing: MixingMode,
    #[serde(default = "one")]
    pub clm_weight: f64,
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl TrainConfig {
    pub fn new(translation_batch_size: usize, clm_batch_size: usize) -> Self {
        Self {
            steps: None,
            epochs: 1,
            translation_batch_size,
            clm_batch_size,
            seed: 0,
            checkpoint_interval: None,
            log_interval: default_log_interval(),
            mixing: MixingMode::Joint,
            clm_weight: 1.0,
            clip_norm: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("translation_batch_size", self.translation_batch_size as u64),
            ("clm_batch_size", self.clm_batch_size as u64),
            ("epochs", self.epochs),
            ("log_interval", self.log_interval),
            ("steps", self.steps.unwrap_or(1)),
            ("checkpoint_interval", self.checkpoint_interval.unwrap_or(1)),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !(self.clm_weight >= 0.0 && self.clm_weight.is_finite()) {
            return Err(Error::Config(format!("clm_weight must be finite and non-negative, got {}", self.clm_weight)));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }

    /// Step budget for a translation split of `n_train` pairs.
    pub fn total_steps(&self, n_train: usize) -> u64 {
        self.steps.unwrap_or_else(|| {
            let per_epoch = n_train.div_ceil(self.translation_batch_size) as u64;
            let factor = if self.mixing == MixingMode::RoundRobin { 2 } else { 1 };
            self.epochs * per_epoch * factor
        })
    }
}

/// Position in an endlessly reshuffled pass over a dataset.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamCursor {
    pub epoch: u64,
    pub position: usize,
}

/// Batches of indices over `0..n`; every epoch uses a fresh seeded shuffle,
/// so the cursor alone determines what comes next.
struct BatchStream {
    n: usize,
    batch_size: usize,
    seed: u64,
    cursor: StreamCursor,
    order: Vec<Vec<usize>>,
}

impl BatchStream {
    fn new(n: usize, batch_size: usize, seed: u64, cursor: StreamCursor) -> Result<Self> {
        let order = batch_order(n, batch_size, Self::epoch_seed(seed, cursor.epoch))?;
        Ok(Self { n, batch_size, seed, cursor, order })
    }

    fn epoch_seed(seed: u64, epoch: u64) -> u64 {
        seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15)
    }

    fn next(&mut self) -> Result<Vec<usize>> {
        if self.cursor.position == self.order.len() {
            self.cursor = StreamCursor { epoch: self.cursor.epoch + 1, position: 0 };
            self.order = batch_order(self.n, self.batch_size, Self::epoch_seed(self.seed, self.cursor.epoch))?;
        }
        let chunk = self.order[self.cursor.position].clone();
        self.cursor.position += 1;
        Ok(chunk)
    }
}

/// Corpora for one training run, already tokenized.
#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    pub vocab: &'a Vocabulary,
    pub translation: &'a [ParallelExample],
    pub validation: &'a [ParallelExample],
    pub source_mono: &'a [TokenSequence],
    pub target_mono: &'a [TokenSequence],
}

const TRANSLATION: usize = 0;
const SOURCE_MONO: usize = 1;
const TARGET_MONO: usize = 2;

/// Owns a model together with its optimizer state and data cursors.
pub struct Trainer {
    model: NmtModel,
    optimizer: OptimizerConfig,
    config: TrainConfig,
    trainable: Vec<ParamId>,
    adam: AdamState,
    step: u64,
    cursors: [StreamCursor; 3],
}

impl Trainer {
    pub fn new(model: NmtModel, optimizer: OptimizerConfig, config: TrainConfig, freeze: &FreezeSpec) -> Result<Self> {
        optimizer.validate()?;
        config.validate()?;
        let trainable = apply_freeze(&model, freeze)?;
        let adam = AdamState::new(model.params());
        Ok(Self { model, optimizer, config, trainable, adam, step: 0, cursors: Default::default() })
    }

    /// Continues from a checkpoint; the seed must match the one it was written with.
    pub fn resume(ckpt: Checkpoint, optimizer: OptimizerConfig, config: TrainConfig, freeze: &FreezeSpec) -> Result<Self> {
        if ckpt.seed != config.seed {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained with seed {}, config has {}",
                ckpt.seed, config.seed
            )));
        }
        let cursors: [StreamCursor; 3] = ckpt
            .cursors
            .clone()
            .try_into()
            .map_err(|_| Error::Checkpoint("expected three data cursors".into()))?;
        let mut trainer = Self::new(ckpt.model()?, optimizer, config, freeze)?;
        trainer.adam = ckpt.adam;
        trainer.step = ckpt.step;
        trainer.cursors = cursors;
        Ok(trainer)
    }

    pub fn model(&self) -> &NmtModel {
        &self.model
    }

    pub fn into_model(self) -> NmtModel {
        self.model
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let params = self.model.params();
        Checkpoint {
            config: self.model.config().clone(),
            kind: self.model.kind(),
            fingerprint: config_fingerprint(self.model.config(), self.model.kind()),
            step: self.step,
            seed: self.config.seed,
            cursors: self.cursors.to_vec(),
            params: params.ids().map(|id| (params.name(id).to_string(), params.get(id).clone())).collect(),
            adam: self.adam.clone(),
        }
    }

    /// One forward over `batches`, one backward of the summed loss, one Adam
    /// update of the non-frozen parameters.
    pub fn train_step(&mut self, batches: &TaskBatches<'_>) -> Result<LossBreakdown> {
        // dropout masks depend only on (seed, step), which keeps resumed runs exact
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.step);
        let g = Graph::new();
        let binder = Binder::training(&g, self.model.params(), self.model.config().dropout_rate, &mut rng);
        let losses = compute_losses(&self.model, &binder, batches, self.config.clm_weight)?;
        let mut grads = g.backward(losses.total)?;
        let mut grads = binder.param_grads(&mut grads);
        drop(binder);
        if let Some(max_norm) = self.config.clip_norm {
            clip_grad_norm(&self.trainable, &mut grads, max_norm);
        }
        adam_step(self.model.params_mut(), &self.trainable, &grads, &mut self.adam, &self.optimizer)?;
        self.step += 1;
        Ok(losses.breakdown)
    }

    fn streams(&self, data: &TrainData<'_>) -> Result<[Option<BatchStream>; 3]> {
        let c = &self.config;
        let stream = |n: usize, bs: usize, salt: u64, which: usize| -> Result<Option<BatchStream>> {
            if n == 0 {
                return Ok(None);
            }
            BatchStream::new(n, bs, c.seed.wrapping_add(salt), self.cursors[which]).map(Some)
        };
        Ok([
            stream(data.translation.len(), c.translation_batch_size, 0, TRANSLATION)?,
            stream(data.source_mono.len(), c.clm_batch_size, 1, SOURCE_MONO)?,
            stream(data.target_mono.len(), c.clm_batch_size, 2, TARGET_MONO)?,
        ])
    }

    /// Trains until `total_steps`, logging every `log_interval` steps and at
    /// the end, and checkpointing to `checkpoint_path` every
    /// `checkpoint_interval` steps and at the end.
    pub fn run(
        &mut self,
        data: &TrainData<'_>,
        total_steps: u64,
        log: &mut MetricLog,
        checkpoint_path: Option<&Path>,
    ) -> Result<()> {
        if data.translation.is_empty() {
            return Err(Error::Data("translation training split is empty".into()));
        }
        let multitask = self.model.kind() == ModelKind::Mtl;
        if multitask && (data.source_mono.is_empty() || data.target_mono.is_empty()) {
            return Err(Error::Data("multitask training needs monolingual text for both languages".into()));
        }
        let max_len = self.model.config().max_len;
        let validation = data
            .validation
            .chunks(self.config.translation_batch_size)
            .map(|chunk| parallel_batch(&chunk.iter().collect::<Vec<_>>(), data.vocab, max_len))
            .collect::<Result<Vec<Batch>>>()?;
        let mut streams = self.streams(data)?;
        let checkpoint_path: Option<PathBuf> = checkpoint_path.map(Path::to_path_buf);

        while self.step < total_steps {
            let (do_translation, do_clm) = match (multitask, self.config.mixing) {
                (false, _) => (true, false),
                (true, MixingMode::Joint) => (true, true),
                (true, MixingMode::RoundRobin) => (self.step % 2 == 0, self.step % 2 == 1),
            };
            let translation = if do_translation {
                let idx = streams[TRANSLATION].as_mut().expect("checked non-empty").next()?;
                let picked: Vec<&ParallelExample> = idx.iter().map(|&i| &data.translation[i]).collect();
                Some(parallel_batch(&picked, data.vocab, max_len)?)
            } else {
                None
            };
            let mut mono = |which: usize, seqs: &[TokenSequence]| -> Result<Option<Batch>> {
                if !do_clm {
                    return Ok(None);
                }
                let idx = streams[which].as_mut().expect("checked non-empty").next()?;
                let picked: Vec<&TokenSequence> = idx.iter().map(|&i| &seqs[i]).collect();
                monolingual_batch(&picked, data.vocab, max_len).map(Some)
            };
            let clm_source = mono(SOURCE_MONO, data.source_mono)?;
            let clm_target = mono(TARGET_MONO, data.target_mono)?;
            let batches = TaskBatches {
                translation: translation.as_ref(),
                clm_source: clm_source.as_ref(),
                clm_target: clm_target.as_ref(),
            };
            let losses = self.train_step(&batches)?;
            for (slot, stream) in self.cursors.iter_mut().zip(&streams) {
                if let Some(s) = stream {
                    *slot = s.cursor;
                }
            }

            let last = self.step == total_steps;
            if self.step % self.config.log_interval == 0 || last {
                let validation_loss =
                    if validation.is_empty() { None } else { Some(translation_loss(&self.model, &validation)?) };
                log::info!(
                    "step {} l_t {:.4} l_clm {:.4} l_mtl {:.4} val {}",
                    self.step,
                    losses.l_t.unwrap_or(0.0),
                    losses.l_clm,
                    losses.l_mtl,
                    validation_loss.map_or("-".into(), |v| format!("{v:.4}"))
                );
                log.push(MetricRow { step: self.step, losses, validation: validation_loss })?;
            }
            if let Some(path) = &checkpoint_path {
                let due = self.config.checkpoint_interval.is_some_and(|k| self.step % k == 0);
                if due || last {
                    save_checkpoint(&self.checkpoint(), path)?;
                }
            }
        }
        Ok(())
    }
}
