use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mtnmt::decoding::{DecodeConfig, PenaltyForm};
use mtnmt::evaluation::{BleuConfig, CorpusMode};
use mtnmt::harness::{
    cmd_evaluate, cmd_experiment, cmd_prepare, cmd_train, cmd_translate, Direction, ExperimentConfig, Preset,
    TranslateJob,
};
use mtnmt::model::ModelKind;
use mtnmt::text::{TokenizeMode, Vocabulary};

/// Baseline and multitask (translation + causal LM) finetuning of small
/// encoder-decoder transformers.
#[derive(Parser)]
#[command(name = "mtnmt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the vocabulary and split manifests.
    Prepare(Source),
    /// Train one regime for one or all configured directions.
    Train {
        #[command(flatten)]
        source: Source,
        #[arg(long, value_enum)]
        mode: Mode,
        /// Direction as `src-tgt`; every configured direction when omitted.
        #[arg(long)]
        direction: Option<String>,
    },
    /// Beam-decode a file, one translation per input line.
    Translate(TranslateArgs),
    /// Corpus BLEU of a hypothesis file against a reference file.
    Evaluate {
        #[arg(long)]
        hypotheses: PathBuf,
        #[arg(long)]
        references: PathBuf,
        #[arg(long, value_enum, default_value = "micro")]
        aggregate: Aggregate,
    },
    /// Prepare, train both regimes, translate, evaluate and compare.
    Experiment(Source),
    /// Print the resolved configuration as TOML.
    Config(Source),
}

#[derive(Args)]
struct Source {
    /// Experiment config (TOML).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Smoke,
    Desk,
    PaperFaithful,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Baseline,
    Mtl,
}

#[derive(Clone, Copy, ValueEnum)]
enum Aggregate {
    Micro,
    Macro,
}

#[derive(Args)]
struct TranslateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Vocabulary written by `prepare`.
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// `src-tgt`.
    #[arg(long)]
    direction: String,
    #[arg(long, default_value = "word")]
    tokenize: String,
    #[arg(long, default_value_t = 2)]
    beam_size: usize,
    #[arg(long, default_value_t = 1.2)]
    length_penalty: f64,
    #[arg(long, default_value_t = 64)]
    max_decode_len: usize,
    /// Use the GNMT length penalty instead of `len^alpha`.
    #[arg(long)]
    gnmt_penalty: bool,
}

impl Source {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match (&self.config, self.preset) {
            (Some(path), _) => {
                let mut cfg = ExperimentConfig::load(path)?;
                if let Some(out) = &self.out_dir {
                    cfg.out_dir = out.clone();
                }
                cfg
            }
            (None, Some(p)) => {
                let preset = match p {
                    PresetArg::Smoke => Preset::Smoke,
                    PresetArg::Desk => Preset::Desk,
                    PresetArg::PaperFaithful => Preset::PaperFaithful,
                };
                let name = p.to_possible_value().expect("no skipped variants");
                let out = self.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs").join(name.get_name()));
                ExperimentConfig::preset(preset, out)
            }
            (None, None) => bail!("pass --config <path> or --preset <name>"),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare(source) => {
            let cfg = source.load()?;
            let prepared = cmd_prepare(&cfg)?;
            let s = &prepared.splits;
            println!(
                "vocabulary: {} tokens; parallel split {}/{}/{}; output in {}",
                prepared.vocab.len(),
                s.parallel.train.len(),
                s.parallel.validation.len(),
                s.parallel.test.len(),
                cfg.out_dir.display()
            );
        }
        Command::Train { source, mode, direction } => {
            let cfg = source.load()?;
            let kind = match mode {
                Mode::Baseline => ModelKind::Baseline,
                Mode::Mtl => ModelKind::Mtl,
            };
            let direction = direction.map(|d| d.parse::<Direction>()).transpose()?;
            for out in cmd_train(&cfg, kind, direction.as_ref())? {
                let note = if out.cached { " (cached)" } else { "" };
                println!("{}{note}", out.run_dir.display());
            }
        }
        Command::Translate(args) => {
            let mode = match args.tokenize.as_str() {
                "word" => TokenizeMode::Word,
                "char" => TokenizeMode::Char,
                other => bail!("unknown tokenize mode `{other}` (expected word or char)"),
            };
            let vocab = Vocabulary::load(&args.vocab, mode)?;
            let direction: Direction = args.direction.parse()?;
            let decode = DecodeConfig {
                beam_size: args.beam_size,
                length_penalty: args.length_penalty,
                penalty_form: if args.gnmt_penalty { PenaltyForm::Gnmt } else { PenaltyForm::Power },
                ..DecodeConfig::paper(args.max_decode_len)
            };
            let n = cmd_translate(&TranslateJob {
                checkpoint: &args.checkpoint,
                vocab: &vocab,
                input: &args.input,
                output: &args.output,
                direction: &direction,
                decode: &decode,
            })?;
            log::info!("translated {n} lines into {}", args.output.display());
        }
        Command::Evaluate { hypotheses, references, aggregate } => {
            let mode = match aggregate {
                Aggregate::Micro => CorpusMode::Micro,
                Aggregate::Macro => CorpusMode::Macro,
            };
            let report = cmd_evaluate(&hypotheses, &references, &BleuConfig { mode, ..BleuConfig::default() })?;
            println!("{}", report.render());
        }
        Command::Experiment(source) => {
            let cfg = source.load()?;
            let outcome = cmd_experiment(&cfg)?;
            log::info!("{} stages run, {} cached", outcome.executed.len(), outcome.cached.len());
            print!("{}", outcome.report.render_table());
        }
        Command::Config(source) => {
            print!("{}", source.load()?.to_toml().context("rendering config")?);
        }
    }
    Ok(())
}

/// The error and its causes on one line, skipping causes already quoted by
/// their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut out = err.to_string();
    for cause in err.chain().skip(1) {
        let c = cause.to_string();
        if !out.contains(&c) {
            out.push_str(": ");
            out.push_str(&c);
        }
    }
    out
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::FAILURE
        }
    }
}
