//! Experiment pipeline: prepare, train, translate, evaluate and the
//! baseline-versus-multitask comparison. Every stage writes under the
//! configured output directory and is skipped on rerun when its fingerprint
//! and outputs are unchanged.

mod config;
mod manifest;
mod synthetic;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use config::{DataConfig, Direction, ExperimentConfig, ModelShape, Preset, RegimeOverrides};
pub use manifest::{file_sha256, stage_fingerprint, Manifest, StageRecord, Workspace, MANIFEST_FILE};
pub use synthetic::{generate, Relation, SyntheticCorpus, SyntheticSpec};

use crate::decoding::{translate, DecodeConfig};
use crate::error::{Error, Result};
use crate::evaluation::{compare_report, corpus_bleu, score_corpus, BleuConfig, BleuReport, ComparisonReport, CorpusMode};
use crate::model::{FreezeSpec, ModelKind, NmtModel};
use crate::text::{
    encode_lines, encode_pairs, read_lines, MonolingualCorpus, ParallelCorpus, ParallelExample, SplitIndices,
    TextPair, TokenSequence, Vocabulary,
};
use crate::training::{load_checkpoint, read_checkpoint, MetricLog, TrainData, Trainer};
use synthetic::write_lines;

const VOCAB_FILE: &str = "prepare/vocab.txt";
const SPLITS_FILE: &str = "prepare/splits.json";
const PREPARE: &str = "prepare";

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.tsv";
pub const RUN_FILE: &str = "run.json";
pub const HYPOTHESES_FILE: &str = "test.hyp";
pub const BLEU_FILE: &str = "bleu.json";
pub const REPORT_TABLE_FILE: &str = "report.txt";
pub const REPORT_TSV_FILE: &str = "report.tsv";

/// Runs `f`, labelling a failure with `stage` unless it already carries one.
fn in_stage<T>(stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().map_err(|e| match e {
        e @ Error::Stage { .. } => e,
        e => Error::stage(stage, e),
    })
}

/// The config with the output directory factored out of every path, so two
/// output directories holding the same experiment share fingerprints.
fn portable(cfg: &ExperimentConfig) -> ExperimentConfig {
    let mut c = cfg.clone();
    let strip = |p: &mut PathBuf| {
        if let Ok(rel) = p.strip_prefix(&cfg.out_dir) {
            *p = Path::new("$OUT").join(rel);
        }
    };
    c.data.parallel.values_mut().chain(c.data.monolingual.values_mut()).for_each(strip);
    c.out_dir = PathBuf::from("$OUT");
    c
}

pub fn config_fingerprint(cfg: &ExperimentConfig) -> String {
    stage_fingerprint(&portable(cfg))
}

fn workspace(cfg: &ExperimentConfig) -> Result<Workspace> {
    Workspace::open(&cfg.out_dir, config_fingerprint(cfg), cfg.seed)
}

fn test_file(lang: &str) -> String {
    format!("prepare/test.{lang}")
}

/// Line indices of every split, written by `prepare` and reused by all
/// later stages.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub parallel: SplitIndices,
    pub monolingual: BTreeMap<String, SplitIndices>,
}

#[derive(Clone, Debug)]
pub struct Prepared {
    pub vocab: Vocabulary,
    pub splits: Splits,
    pub fingerprint: String,
}

/// Offsets the split seed per corpus so equally sized files are not split
/// identically.
fn split_seed(seed: u64, corpus: usize) -> u64 {
    seed.wrapping_add((corpus as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Builds the vocabulary over every configured corpus and draws the splits.
pub fn cmd_prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    in_stage(PREPARE, || {
        cfg.validate()?;
        let ws = workspace(cfg)?;
        let langs = cfg.languages();
        if let Some(spec) = &cfg.data.synthetic {
            let corpus = generate(spec, cfg.seed)?;
            for (i, lang) in langs.iter().enumerate() {
                write_lines(&cfg.data.parallel[*lang], &corpus.parallel[i])?;
                if let Some(path) = cfg.data.monolingual.get(*lang) {
                    write_lines(path, &corpus.monolingual[i])?;
                }
            }
        }
        cfg.validate_files()?;
        let input_hashes = cfg
            .data
            .parallel
            .iter()
            .map(|(l, p)| (format!("parallel.{l}"), p))
            .chain(cfg.data.monolingual.iter().map(|(l, p)| (format!("monolingual.{l}"), p)))
            .map(|(k, p)| Ok((k, file_sha256(p)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let fingerprint = stage_fingerprint(&(PREPARE, &portable(cfg).data, cfg.seed, &input_hashes));

        if ws.is_cached(PREPARE, &fingerprint)? {
            log::info!("prepare: cached");
        } else {
            let parallel: Vec<Vec<String>> =
                langs.iter().map(|l| read_lines(&cfg.data.parallel[*l])).collect::<Result<_>>()?;
            if parallel[0].len() != parallel[1].len() {
                return Err(Error::Data(format!(
                    "parallel corpora differ in length: {} lines for `{}`, {} for `{}`",
                    parallel[0].len(),
                    langs[0],
                    parallel[1].len(),
                    langs[1]
                )));
            }
            let name = cfg.data.parallel[langs[0]].display();
            let parallel_idx = SplitIndices::sample(parallel[0].len(), cfg.data.parallel_split, cfg.seed)
                .map_err(|e| Error::Data(format!("parallel corpus {name}: {e}")))?;
            let mut mono_lines = Vec::new();
            let mut mono_idx = BTreeMap::new();
            for (i, (lang, path)) in cfg.data.monolingual.iter().enumerate() {
                let lines = read_lines(path)?;
                let sizes = cfg.data.monolingual_split.expect("validated");
                let idx = SplitIndices::sample(lines.len(), sizes, split_seed(cfg.seed, i + 1))
                    .map_err(|e| Error::Data(format!("monolingual corpus {}: {e}", path.display())))?;
                mono_idx.insert(lang.clone(), idx);
                mono_lines.push(lines);
            }
            let all = parallel.iter().chain(&mono_lines).flatten().map(String::as_str);
            let vocab = Vocabulary::build(all, &langs, cfg.data.tokenize, cfg.data.min_count)?;
            std::fs::create_dir_all(ws.path(PREPARE)).map_err(|e| Error::io(ws.path(PREPARE), e))?;
            vocab.save(&ws.path(VOCAB_FILE))?;
            let splits = Splits { parallel: parallel_idx, monolingual: mono_idx };
            let json = serde_json::to_string_pretty(&splits).expect("splits serialize") + "\n";
            std::fs::write(ws.path(SPLITS_FILE), json).map_err(|e| Error::io(ws.path(SPLITS_FILE), e))?;
            let mut outputs = vec![VOCAB_FILE.to_string(), SPLITS_FILE.to_string()];
            for (i, lang) in langs.iter().enumerate() {
                let test: Vec<String> = splits.parallel.test.iter().map(|&j| parallel[i][j].clone()).collect();
                write_lines(&ws.path(&test_file(lang)), &test)?;
                outputs.push(test_file(lang));
            }
            let outputs: Vec<&str> = outputs.iter().map(String::as_str).collect();
            ws.record(PREPARE, &fingerprint, &outputs)?;
            log::info!("prepare: vocabulary of {} tokens", vocab.len());
        }

        let vocab = Vocabulary::load(&ws.path(VOCAB_FILE), cfg.data.tokenize)?;
        let text = std::fs::read_to_string(ws.path(SPLITS_FILE)).map_err(|e| Error::io(ws.path(SPLITS_FILE), e))?;
        let splits = serde_json::from_str(&text).map_err(|e| Error::Data(format!("{SPLITS_FILE}: {e}")))?;
        Ok(Prepared { vocab, splits, fingerprint })
    })
}

/// Encoded splits for one direction.
pub struct DirectionData {
    pub train: Vec<ParallelExample>,
    pub validation: Vec<ParallelExample>,
    pub source_mono: Vec<TokenSequence>,
    pub target_mono: Vec<TokenSequence>,
}

pub fn load_direction(cfg: &ExperimentConfig, prepared: &Prepared, direction: &Direction) -> Result<DirectionData> {
    let langs = cfg.languages();
    let lines: Vec<Vec<String>> = langs.iter().map(|l| read_lines(&cfg.data.parallel[*l])).collect::<Result<_>>()?;
    let corpus = ParallelCorpus::from_lines(langs[0], langs[1], &lines[0], &lines[1], prepared.splits.parallel.clone())?;
    let flip = direction.source != langs[0];
    let oriented = |pairs: &[TextPair]| -> Vec<TextPair> {
        pairs
            .iter()
            .map(|p| {
                if flip {
                    TextPair { source: p.target.clone(), target: p.source.clone() }
                } else {
                    p.clone()
                }
            })
            .collect()
    };
    let encode = |pairs: &[TextPair]| encode_pairs(&oriented(pairs), &prepared.vocab, &direction.source, &direction.target);
    let mono = |lang: &str| -> Result<Vec<TokenSequence>> {
        match (cfg.data.monolingual.get(lang), prepared.splits.monolingual.get(lang)) {
            (Some(path), Some(idx)) => {
                let corpus = MonolingualCorpus::from_lines(lang, &read_lines(path)?, idx.clone())?;
                encode_lines(&corpus.train, &prepared.vocab, lang)
            }
            _ => Ok(Vec::new()),
        }
    };
    Ok(DirectionData {
        train: encode(&corpus.train)?,
        validation: encode(&corpus.validation)?,
        source_mono: mono(&direction.source)?,
        target_mono: mono(&direction.target)?,
    })
}

/// Sidecar next to a checkpoint tying it to its vocabulary and stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunInfo {
    pub fingerprint: String,
    pub vocab_fingerprint: String,
    pub direction: Direction,
    pub kind: ModelKind,
}

pub fn run_dir(cfg: &ExperimentConfig, direction: &Direction, kind: ModelKind) -> PathBuf {
    cfg.out_dir.join(direction.slug()).join(kind.as_str())
}

fn stage_name(direction: &Direction, kind: ModelKind, what: &str) -> String {
    format!("{}/{}/{what}", direction.slug(), kind.as_str())
}

fn freeze_spec<'a>(names: impl Iterator<Item = &'a str>, layers: usize) -> FreezeSpec {
    let prefixes: Vec<String> = (0..layers).map(|i| format!("encoder.layers.{i}.")).collect();
    FreezeSpec::from_names(names.filter(|n| prefixes.iter().any(|p| n.starts_with(p))))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub fingerprint: String,
    pub cached: bool,
}

fn train_stage(
    ws: &Workspace,
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    direction: &Direction,
    kind: ModelKind,
) -> Result<TrainOutcome> {
    let stage = stage_name(direction, kind, "train");
    in_stage(&stage, || {
        if !cfg.directions.contains(direction) {
            return Err(Error::Config(format!("direction {direction} is not configured")));
        }
        match kind {
            ModelKind::Baseline if !cfg.data.monolingual.is_empty() => {
                log::warn!("{stage}: baseline training ignores the configured monolingual corpora");
            }
            ModelKind::Mtl => {
                for lang in [&direction.source, &direction.target] {
                    if !cfg.data.monolingual.contains_key(lang) {
                        return Err(Error::Config(format!(
                            "multitask training needs monolingual corpora for both `{}` and `{}`; `{lang}` is missing",
                            direction.source, direction.target
                        )));
                    }
                }
            }
            _ => {}
        }
        let model_cfg = cfg.model_config(prepared.vocab.len());
        let train_cfg = cfg.train_config(kind);
        let fingerprint = stage_fingerprint(&(
            "train",
            &prepared.fingerprint,
            direction,
            kind,
            &model_cfg,
            &train_cfg,
            &cfg.optimizer,
            cfg.freeze_layers(),
        ));
        let dir = run_dir(cfg, direction, kind);
        let slug = direction.slug();
        let rel_file = |f: &str| format!("{slug}/{}/{f}", kind.as_str());
        if ws.is_cached(&stage, &fingerprint)? {
            log::info!("{stage}: cached");
            return Ok(TrainOutcome { run_dir: dir, fingerprint, cached: true });
        }
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let (ckpt_path, metrics_path, run_path) =
            (dir.join(CHECKPOINT_FILE), dir.join(METRICS_FILE), dir.join(RUN_FILE));
        let info = RunInfo {
            fingerprint: fingerprint.clone(),
            vocab_fingerprint: prepared.vocab.fingerprint(),
            direction: direction.clone(),
            kind,
        };
        let resumable = std::fs::read_to_string(&run_path)
            .ok()
            .and_then(|t| serde_json::from_str::<RunInfo>(&t).ok())
            .is_some_and(|old| old == info)
            && ckpt_path.is_file()
            && metrics_path.is_file();

        let data = load_direction(cfg, prepared, direction)?;
        let (mut trainer, mut log) = if resumable {
            let ckpt = load_checkpoint(&ckpt_path, &model_cfg, kind)?;
            let freeze = freeze_spec(ckpt.params.iter().map(|(n, _)| n.as_str()), cfg.freeze_layers());
            let step = ckpt.step;
            log::info!("{stage}: resuming from step {step}");
            (Trainer::resume(ckpt, cfg.optimizer.clone(), train_cfg.clone(), &freeze)?, MetricLog::resume(&metrics_path, step)?)
        } else {
            let text = serde_json::to_string_pretty(&info).expect("run info serializes") + "\n";
            std::fs::write(&run_path, text).map_err(|e| Error::io(&run_path, e))?;
            let model = NmtModel::new(model_cfg, kind)?;
            let freeze = freeze_spec(model.params().names().iter().map(String::as_str), cfg.freeze_layers());
            (Trainer::new(model, cfg.optimizer.clone(), train_cfg.clone(), &freeze)?, MetricLog::create(&metrics_path)?)
        };
        let (source_mono, target_mono): (&[TokenSequence], &[TokenSequence]) = match kind {
            ModelKind::Baseline => (&[], &[]),
            ModelKind::Mtl => (&data.source_mono, &data.target_mono),
        };
        let train_data = TrainData {
            vocab: &prepared.vocab,
            translation: &data.train,
            validation: &data.validation,
            source_mono,
            target_mono,
        };
        let total = train_cfg.total_steps(data.train.len());
        trainer.run(&train_data, total, &mut log, Some(&ckpt_path))?;
        ws.record(&stage, &fingerprint, &[&rel_file(CHECKPOINT_FILE), &rel_file(METRICS_FILE), &rel_file(RUN_FILE)])?;
        log::info!("{stage}: done after {total} steps");
        Ok(TrainOutcome { run_dir: dir, fingerprint, cached: false })
    })
}

/// Trains one regime for one direction (every configured direction when
/// `direction` is `None`).
pub fn cmd_train(cfg: &ExperimentConfig, kind: ModelKind, direction: Option<&Direction>) -> Result<Vec<TrainOutcome>> {
    let prepared = cmd_prepare(cfg)?;
    let ws = workspace(cfg)?;
    let directions: Vec<&Direction> = match direction {
        Some(d) => vec![d],
        None => cfg.directions.iter().collect(),
    };
    directions.into_iter().map(|d| train_stage(&ws, cfg, &prepared, d, kind)).collect()
}

pub struct TranslateJob<'a> {
    pub checkpoint: &'a Path,
    pub vocab: &'a Vocabulary,
    pub input: &'a Path,
    pub output: &'a Path,
    pub direction: &'a Direction,
    pub decode: &'a DecodeConfig,
}

/// Beam-decodes every line of `input` into one line of `output`. Returns
/// the number of lines written.
pub fn cmd_translate(job: &TranslateJob<'_>) -> Result<usize> {
    job.decode.validate()?;
    let ckpt = read_checkpoint(job.checkpoint)?;
    let vocab_fp = job.vocab.fingerprint();
    let sidecar = job.checkpoint.with_file_name(RUN_FILE);
    if sidecar.is_file() {
        let text = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let info: RunInfo =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", sidecar.display())))?;
        if info.vocab_fingerprint != vocab_fp {
            return Err(Error::FingerprintMismatch { expected: vocab_fp, found: info.vocab_fingerprint });
        }
    }
    if ckpt.config.vocab_size != job.vocab.len() {
        return Err(Error::Config(format!(
            "checkpoint expects a vocabulary of {} tokens, got {}",
            ckpt.config.vocab_size,
            job.vocab.len()
        )));
    }
    let model = ckpt.model()?;
    let text = std::fs::read_to_string(job.input).map_err(|e| Error::io(job.input, e))?;
    let mut out = Vec::new();
    for line in text.lines() {
        let source = job.vocab.encode(line, &job.direction.source)?;
        let hyp = translate(&model, job.vocab, &source, &job.direction.target, job.decode)?;
        out.push(job.vocab.decode(hyp.content(job.decode.eos_id))?);
    }
    write_lines(job.output, &out)?;
    Ok(out.len())
}

fn read_text_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_owned).collect())
}

/// Corpus BLEU of whitespace-tokenized, line-aligned files. In macro mode
/// `bleu` holds the mean sentence score.
pub fn cmd_evaluate(hypotheses: &Path, references: &Path, cfg: &BleuConfig) -> Result<BleuReport> {
    let hyp = read_text_lines(hypotheses)?;
    let refs = read_text_lines(references)?;
    if hyp.len() != refs.len() {
        return Err(Error::Data(format!(
            "line-count mismatch: {} has {} lines, {} has {}",
            hypotheses.display(),
            hyp.len(),
            references.display(),
            refs.len()
        )));
    }
    let tok = |lines: &[String]| -> Vec<Vec<String>> {
        lines.iter().map(|l| l.split_whitespace().map(str::to_owned).collect()).collect()
    };
    let (hyp, refs) = (tok(&hyp), tok(&refs));
    let pairs = || hyp.iter().zip(&refs).map(|(h, r)| (h.as_slice(), r.as_slice()));
    let mut report = corpus_bleu(pairs(), cfg)?;
    if cfg.mode == CorpusMode::Macro {
        report.bleu = score_corpus(pairs(), cfg)?;
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BleuRecord {
    bleu: f64,
    rendered: String,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub report: ComparisonReport,
    /// Stages that ran, in order.
    pub executed: Vec<String>,
    /// Stages skipped because their outputs were current.
    pub cached: Vec<String>,
}

/// Decodes the test split and scores it; both steps are cached stages.
fn translate_and_score(
    ws: &Workspace,
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    direction: &Direction,
    kind: ModelKind,
    trained: &TrainOutcome,
    outcome: &mut ExperimentOutcome,
) -> Result<f64> {
    let base = format!("{}/{}", direction.slug(), kind.as_str());
    let source = ws.path(&test_file(&direction.source));
    let reference = ws.path(&test_file(&direction.target));
    let hyp_rel = format!("{base}/{HYPOTHESES_FILE}");
    let bleu_rel = format!("{base}/{BLEU_FILE}");

    let stage = stage_name(direction, kind, "translate");
    let translate_fp = in_stage(&stage, || {
        let fp = stage_fingerprint(&("translate", &trained.fingerprint, &cfg.decode, file_sha256(&source)?));
        if ws.is_cached(&stage, &fp)? {
            outcome.cached.push(stage.clone());
        } else {
            let n = cmd_translate(&TranslateJob {
                checkpoint: &trained.run_dir.join(CHECKPOINT_FILE),
                vocab: &prepared.vocab,
                input: &source,
                output: &ws.path(&hyp_rel),
                direction,
                decode: &cfg.decode,
            })?;
            ws.record(&stage, &fp, &[&hyp_rel])?;
            log::info!("{stage}: {n} sentences");
            outcome.executed.push(stage.clone());
        }
        Ok(fp)
    })?;

    let stage = stage_name(direction, kind, "evaluate");
    in_stage(&stage, || {
        let fp = stage_fingerprint(&("evaluate", &translate_fp, &cfg.evaluation, file_sha256(&reference)?));
        let path = ws.path(&bleu_rel);
        if ws.is_cached(&stage, &fp)? {
            outcome.cached.push(stage.clone());
        } else {
            let report = cmd_evaluate(&ws.path(&hyp_rel), &reference, &cfg.evaluation)?;
            let record = BleuRecord { bleu: report.bleu, rendered: report.render() };
            let text = serde_json::to_string_pretty(&record).expect("bleu serializes") + "\n";
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            ws.record(&stage, &fp, &[&bleu_rel])?;
            log::info!("{stage}: {}", record.rendered);
            outcome.executed.push(stage.clone());
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let record: BleuRecord = serde_json::from_str(&text).map_err(|e| Error::Data(format!("{bleu_rel}: {e}")))?;
        Ok(record.bleu)
    })
}

/// For every direction: train both regimes on identical splits, vocabulary
/// and initialization, decode the test split with each, score both and
/// tabulate the comparison.
pub fn cmd_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let prepared = cmd_prepare(cfg)?;
    let ws = workspace(cfg)?;
    let mut outcome =
        ExperimentOutcome { report: ComparisonReport { rows: Vec::new() }, executed: Vec::new(), cached: Vec::new() };
    let (mut baseline, mut mtl) = (Vec::new(), Vec::new());
    for direction in &cfg.directions {
        for kind in [ModelKind::Baseline, ModelKind::Mtl] {
            let trained = train_stage(&ws, cfg, &prepared, direction, kind)?;
            let stage = stage_name(direction, kind, "train");
            if trained.cached { outcome.cached.push(stage) } else { outcome.executed.push(stage) }
            let bleu = translate_and_score(&ws, cfg, &prepared, direction, kind, &trained, &mut outcome)?;
            let scores = if kind == ModelKind::Baseline { &mut baseline } else { &mut mtl };
            scores.push((direction.to_string(), bleu));
        }
    }
    let labels: Vec<String> = cfg.directions.iter().map(Direction::to_string).collect();
    let report = in_stage("report", || {
        let report = compare_report(&baseline, &mtl, &labels)?;
        for (file, text) in [(REPORT_TABLE_FILE, report.render_table()), (REPORT_TSV_FILE, report.render_tsv())] {
            std::fs::write(ws.path(file), text).map_err(|e| Error::io(ws.path(file), e))?;
        }
        Ok(report)
    })?;
    outcome.report = report;
    Ok(outcome)
}
