use std::fs;
use std::path::Path;

use mtnmt::evaluation::BleuConfig;
use mtnmt::harness::*;
use mtnmt::model::{ModelConfig, ModelKind};
use mtnmt::text::{TokenizeMode, Vocabulary};
use mtnmt::Error;

/// Desk preset shrunk to a tiny model and a few steps.
fn tiny(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::preset(Preset::Desk, out);
    cfg.model = ModelShape::from_config(&ModelConfig::tiny(0));
    cfg.train.steps = Some(6);
    cfg.train.log_interval = 3;
    cfg.decode.max_decode_len = 8;
    cfg
}

fn read(p: impl AsRef<Path>) -> String {
    fs::read_to_string(p).unwrap()
}

#[test]
fn presets_round_trip_through_toml() {
    for p in [Preset::Smoke, Preset::Desk, Preset::PaperFaithful] {
        let cfg = ExperimentConfig::preset(p, "out");
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg, "{text}");
    }
    let paper = ExperimentConfig::preset(Preset::PaperFaithful, "out");
    assert_eq!(paper.train_config(ModelKind::Baseline).translation_batch_size, 16);
    assert_eq!(paper.train_config(ModelKind::Mtl).translation_batch_size, 2);
    assert_eq!((paper.optimizer.lr, paper.decode.beam_size, paper.decode.length_penalty), (1e-5, 2, 1.2));
    assert_eq!(paper.freeze_layers(), 6);
    let desk = ExperimentConfig::preset(Preset::Desk, "out");
    assert_eq!(desk.train_config(ModelKind::Baseline), desk.train_config(ModelKind::Mtl));
    assert!("fast".parse::<Preset>().is_err());
}

#[test]
fn config_rejects_unknown_keys_and_bad_references() {
    let text = ExperimentConfig::preset(Preset::Desk, "out").to_toml().unwrap();
    let typo = text.replacen("seed = 0", "seed = 0\nsed = 1", 1);
    assert!(ExperimentConfig::from_toml(&typo).unwrap_err().to_string().contains("sed"));
    let typo = text.replacen("beam_size", "beam_sise", 1);
    assert!(ExperimentConfig::from_toml(&typo).is_err());

    let mut cfg = ExperimentConfig::preset(Preset::Desk, "out");
    cfg.directions.push(Direction::new("lx", "zz"));
    assert!(cfg.validate().is_err());
    let mut cfg = ExperimentConfig::preset(Preset::Desk, "out");
    cfg.directions.push(cfg.directions[0].clone());
    assert!(cfg.validate().is_err());
    let mut cfg = ExperimentConfig::preset(Preset::PaperFaithful, "/nonexistent");
    cfg.validate().unwrap();
    assert!(cfg.validate_files().is_err());
    cfg.freeze_encoder_layers = Some(13);
    assert!(cfg.validate().is_err());
    assert_eq!("ab-cd".parse::<Direction>().unwrap(), Direction::new("ab", "cd"));
    assert_eq!("ab→cd".parse::<Direction>().unwrap().to_string(), "ab→cd");
}

#[test]
fn load_resolves_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::preset(Preset::PaperFaithful, "runs/a");
    let path = dir.path().join("exp.toml");
    fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    let loaded = ExperimentConfig::load(&path).unwrap();
    assert_eq!(loaded.out_dir, dir.path().join("runs/a"));
    assert_eq!(loaded.data.parallel["src"], dir.path().join("corpus/parallel.src"));
}

#[test]
fn synthetic_relation_is_substitution_plus_local_swap() {
    let spec = SyntheticSpec {
        relation: Relation::SubstituteSwap,
        words: 10,
        pairs: 50,
        monolingual: 5,
        min_len: 1,
        max_len: 7,
    };
    let c = generate(&spec, 3).unwrap();
    assert_eq!(c, generate(&spec, 3).unwrap());
    let mut mapping = std::collections::HashMap::new();
    for (x, y) in c.parallel[0].iter().zip(&c.parallel[1]) {
        let xs: Vec<&str> = x.split(' ').collect();
        let mut ys: Vec<&str> = y.split(' ').collect();
        assert_eq!(xs.len(), ys.len());
        for pair in ys.chunks_mut(2) {
            pair.reverse();
        }
        for (a, b) in xs.iter().zip(&ys) {
            assert_eq!(*mapping.entry(*a).or_insert(*b), *b);
        }
    }
    assert_eq!(c.monolingual[1].len(), 5);
    let copy = generate(&SyntheticSpec { relation: Relation::Copy, ..spec }, 3).unwrap();
    assert_eq!(copy.parallel[0], copy.parallel[1]);
}

#[test]
fn prepare_writes_exact_deterministic_splits() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let p = cmd_prepare(&cfg).unwrap();
    let s = &p.splits;
    assert_eq!((s.parallel.train.len(), s.parallel.validation.len(), s.parallel.test.len()), (1000, 20, 20));
    assert_eq!(s.monolingual["lx"].train.len(), 200);
    assert_eq!(p.vocab.len(), 4 + 2 + 80);
    assert_eq!(read(dir.path().join("prepare/test.lx")).lines().count(), 20);

    let manifest = read(dir.path().join(MANIFEST_FILE));
    let again = cmd_prepare(&cfg).unwrap();
    assert_eq!(again.splits, p.splits);
    assert_eq!(read(dir.path().join(MANIFEST_FILE)), manifest);

    let other = tempfile::tempdir().unwrap();
    let q = cmd_prepare(&tiny(other.path())).unwrap();
    assert_eq!((q.splits, q.fingerprint), (p.splits, p.fingerprint));
}

#[test]
fn prepare_rejects_oversize_split_naming_the_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.data.monolingual_split.as_mut().unwrap().train = 500;
    let err = cmd_prepare(&cfg).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Stage { ref stage, .. } if stage == "prepare"));
    assert!(msg.contains("mono.lx") && msg.contains("500"), "{msg}");
}

#[test]
fn regime_requirements_on_monolingual_data() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.directions.truncate(1);
    cfg.data.synthetic = None;
    cmd_prepare(&tiny(dir.path())).unwrap();
    cfg.data.monolingual.remove("ly");
    cfg.data.monolingual_split = Some(mtnmt::text::SplitSizes::new(100, 0, 0));
    let err = cmd_train(&cfg, ModelKind::Mtl, None).unwrap_err().to_string();
    assert!(err.contains("lx-ly/mtl/train") && err.contains("`ly` is missing"), "{err}");
    // baseline only warns about the configured corpora
    let out = cmd_train(&cfg, ModelKind::Baseline, None).unwrap();
    assert!(out[0].run_dir.join(CHECKPOINT_FILE).is_file());
}

#[test]
fn translate_contract() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let d = cfg.directions[0].clone();
    let trained = cmd_train(&cfg, ModelKind::Baseline, Some(&d)).unwrap().remove(0);
    let vocab = Vocabulary::load(&dir.path().join("prepare/vocab.txt"), TokenizeMode::Word).unwrap();
    let ckpt = trained.run_dir.join(CHECKPOINT_FILE);
    let job = |input: &Path, output: &Path, vocab: &Vocabulary| {
        cmd_translate(&TranslateJob {
            checkpoint: &ckpt,
            vocab,
            input,
            output,
            direction: &d,
            decode: &cfg.decode,
        })
    };

    let empty = dir.path().join("empty.txt");
    fs::write(&empty, "").unwrap();
    let out = dir.path().join("empty.out");
    assert_eq!(job(&empty, &out, &vocab).unwrap(), 0);
    assert_eq!(read(&out), "");

    let input = dir.path().join("prepare/test.lx");
    let (a, b) = (dir.path().join("a.out"), dir.path().join("b.out"));
    assert_eq!(job(&input, &a, &vocab).unwrap(), 20);
    job(&input, &b, &vocab).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_eq!(read(&a).lines().count(), 20);

    let other = Vocabulary::build(["x0 x1 y0 y1 q"], &["lx", "ly"], TokenizeMode::Word, 1).unwrap();
    assert!(matches!(job(&input, &a, &other), Err(Error::FingerprintMismatch { .. })));
}

#[test]
fn evaluate_contract() {
    let dir = tempfile::tempdir().unwrap();
    let (h, r) = (dir.path().join("h.txt"), dir.path().join("r.txt"));
    fs::write(&h, "a b c d\nthe cat sat down\n").unwrap();
    let report = cmd_evaluate(&h, &h, &BleuConfig::default()).unwrap();
    assert_eq!(report.bleu, 1.0);
    assert!(report.render().starts_with("BLEU = 100.00"));

    // NLTK 3.10.3 corpus_bleu with method 4 on the same pairs
    fs::write(&h, "the cat sat on the mat\na b c d e f\nx y z\nhello world\none two three four five\n").unwrap();
    fs::write(&r, "the cat is on the mat\na b c d e f\nx q z w\nhello there world\none two four three five six\n")
        .unwrap();
    let report = cmd_evaluate(&h, &r, &BleuConfig::default()).unwrap();
    assert!((report.bleu - 0.42356028085714803).abs() < 1e-9);

    fs::write(&r, "one line\n").unwrap();
    assert!(cmd_evaluate(&h, &r, &BleuConfig::default()).unwrap_err().to_string().contains("line-count"));
}

#[test]
fn experiment_caches_stages_and_labels_failures() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let first = cmd_experiment(&cfg).unwrap();
    assert_eq!(first.executed.len(), 12);
    assert!(first.cached.is_empty());
    let rows = &first.report.rows;
    assert_eq!(rows.iter().map(|r| r.direction.as_str()).collect::<Vec<_>>(), ["lx→ly", "ly→lx"]);
    for r in rows {
        assert_eq!(r.delta, r.mtl - r.baseline);
    }
    let table = read(dir.path().join(REPORT_TABLE_FILE));
    assert_eq!(table, first.report.render_table());

    let second = cmd_experiment(&cfg).unwrap();
    assert!(second.executed.is_empty());
    assert_eq!(second.cached.len(), 12);
    assert_eq!(second.report, first.report);
    assert_eq!(read(dir.path().join(REPORT_TABLE_FILE)), table);

    // a damaged output invalidates only its own stage
    fs::write(dir.path().join("lx-ly/mtl/test.hyp"), "tampered\n").unwrap();
    let third = cmd_experiment(&cfg).unwrap();
    assert_eq!(third.executed, ["lx-ly/mtl/translate"]);
    assert_eq!(third.report, first.report);

    let mut broken = cfg.clone();
    broken.decode.max_decode_len = 0;
    assert!(cmd_experiment(&broken).is_err());
    fs::write(dir.path().join("lx-ly/baseline/checkpoint.bin"), b"garbage").unwrap();
    let err = cmd_experiment(&cfg).unwrap_err();
    assert!(err.to_string().contains("lx-ly/baseline/train"), "{err}");
}
