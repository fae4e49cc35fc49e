mod common;

use mtnmt::model::{Binder, FreezeSpec, ModelConfig, NmtModel, ParamStore};
use mtnmt::tensor::{Graph, Tensor};
use mtnmt::text::{monolingual_batch, parallel_batch, Batch, PAD_ID};
use mtnmt::training::*;
use mtnmt::Error;

fn small_config(v: usize) -> ModelConfig {
    ModelConfig { n_enc_layers: 2, n_dec_layers: 1, ..ModelConfig::tiny(v) }
}

fn batches(toy: &common::Toy, start: usize, n: usize) -> (Batch, Batch, Batch) {
    let max_len = 16;
    let pairs: Vec<_> = toy.pairs[start..start + n].iter().collect();
    let src: Vec<_> = toy.source_mono[start..start + n].iter().collect();
    let tgt: Vec<_> = toy.target_mono[start..start + n].iter().collect();
    (
        parallel_batch(&pairs, &toy.vocab, max_len).unwrap(),
        monolingual_batch(&src, &toy.vocab, max_len).unwrap(),
        monolingual_batch(&tgt, &toy.vocab, max_len).unwrap(),
    )
}

fn scalar_store(x: f64) -> ParamStore {
    let mut store = ParamStore::new();
    store.insert("x", Tensor::scalar(x)).unwrap();
    store
}

#[test]
fn adam_matches_hand_recurrence() {
    // f(x) = (x - 3)², x0 = 0.5, lr 0.1; values from an independent recurrence
    let expected = [
        (0.5999999998, -0.4999999999999999, 0.025000000000000022),
        (0.6998728116191738, -0.9300000000399997, 0.04801500000384004),
        (0.7995260661370407, -1.2970254377121648, 0.06912932533475095),
    ];
    let mut store = scalar_store(0.5);
    let cfg = OptimizerConfig::with_lr(0.1);
    let mut state = AdamState::new(&store);
    let ids: Vec<_> = store.ids().collect();
    for (x, m, v) in expected {
        let g = 2.0 * (store.get(ids[0]).item() - 3.0);
        adam_step(&mut store, &ids, &[Some(vec![g])], &mut state, &cfg).unwrap();
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
        assert!(rel(store.get(ids[0]).item(), x) < 1e-12);
        assert!(rel(state.moments[0].m[0], m) < 1e-12);
        assert!(rel(state.moments[0].v[0], v) < 1e-12);
    }
}

#[test]
fn adam_first_step_moves_by_lr() {
    let cfg = OptimizerConfig::desk();
    for g in [1e-3, -0.7, 5.0, -1234.5] {
        let mut store = scalar_store(1.0);
        let ids: Vec<_> = store.ids().collect();
        let mut state = AdamState::new(&store);
        adam_step(&mut store, &ids, &[Some(vec![g])], &mut state, &cfg).unwrap();
        let update = 1.0 - store.get(ids[0]).item();
        assert_eq!(update.signum(), g.signum());
        // exactly lr·|g| / (|g| + eps)
        assert!((update.abs() - cfg.lr).abs() <= cfg.lr * cfg.eps / g.abs() + 1e-15);
    }
}

#[test]
fn adam_zero_gradient_is_a_no_op() {
    let mut store = scalar_store(2.5);
    let ids: Vec<_> = store.ids().collect();
    let mut state = AdamState::new(&store);
    for _ in 0..5 {
        adam_step(&mut store, &ids, &[Some(vec![0.0])], &mut state, &OptimizerConfig::desk()).unwrap();
    }
    assert_eq!(store.get(ids[0]).item(), 2.5);
}

#[test]
fn adam_rejects_non_finite_gradients() {
    let mut store = ParamStore::new();
    store.insert("a", Tensor::scalar(1.0)).unwrap();
    store.insert("b.weight", Tensor::zeros(&[3])).unwrap();
    let before = store.clone();
    let ids: Vec<_> = store.ids().collect();
    let mut state = AdamState::new(&store);
    let grads = [Some(vec![0.5]), Some(vec![0.0, f64::NAN, 1.0])];
    match adam_step(&mut store, &ids, &grads, &mut state, &OptimizerConfig::desk()) {
        Err(Error::NonFiniteGradient { name, index, .. }) => assert_eq!((name.as_str(), index), ("b.weight", 1)),
        other => panic!("expected non-finite gradient error, got {other:?}"),
    }
    assert_eq!(store, before);
    assert_eq!(state.moments[0].step, 0);
}

#[test]
fn optimizer_config_validation() {
    assert!(OptimizerConfig::with_lr(0.0).validate().is_err());
    assert!(OptimizerConfig { beta2: 1.0, ..OptimizerConfig::desk() }.validate().is_err());
    assert!(OptimizerConfig { eps: 0.0, ..OptimizerConfig::desk() }.validate().is_err());
    assert_eq!(OptimizerConfig::paper().lr, 1e-5);
}

#[test]
fn clipping_bounds_the_global_norm() {
    let store = {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::zeros(&[2])).unwrap();
        s.insert("b", Tensor::zeros(&[1])).unwrap();
        s
    };
    let ids: Vec<_> = store.ids().collect();
    let mut grads = vec![Some(vec![3.0, 0.0]), Some(vec![4.0])];
    assert_eq!(clip_grad_norm(&ids, &mut grads, 1.0), 5.0);
    let flat: Vec<f64> = grads.into_iter().flatten().flatten().collect();
    for (a, b) in flat.iter().zip([0.6, 0.0, 0.8]) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn joint_loss_is_the_sum_of_task_losses() {
    let toy = common::toy(120, 120, 8, 1);
    let model = NmtModel::multitask(small_config(toy.vocab.len())).unwrap();
    for k in 0..100 {
        let (t, s, c) = batches(&toy, k, 1 + k % 3);
        let l = evaluate_losses(&model, &TaskBatches::joint(&t, &s, &c), 1.0).unwrap();
        let (lt, ls, lc) = (l.l_t.unwrap(), l.l_clm_src.unwrap(), l.l_clm_tgt.unwrap());
        assert!(lt > 0.0 && ls > 0.0 && lc > 0.0);
        assert_eq!(l.l_clm, ls + lc);
        assert!((l.l_mtl - (lt + l.l_clm)).abs() <= 1e-12 * l.l_mtl);
    }
}

#[test]
fn uniform_model_losses_equal_ln_v() {
    let toy = common::toy(8, 8, 13, 2);
    assert_eq!(toy.vocab.len(), 32);
    let mut model = NmtModel::multitask(small_config(32)).unwrap();
    model.zero_output_projections();
    let (t, s, c) = batches(&toy, 0, 4);
    let l = evaluate_losses(&model, &TaskBatches::joint(&t, &s, &c), 1.0).unwrap();
    let ln32 = 32f64.ln();
    for x in [l.l_t.unwrap(), l.l_clm_src.unwrap(), l.l_clm_tgt.unwrap()] {
        assert!((x - ln32).abs() / ln32 < 1e-6, "{x}");
    }
    assert!((ln32 - 3.4657).abs() < 1e-4);
}

#[test]
fn baseline_breakdown_and_contract() {
    let toy = common::toy(8, 8, 8, 3);
    let model = NmtModel::baseline(small_config(toy.vocab.len())).unwrap();
    let (t, s, c) = batches(&toy, 0, 3);
    let l = evaluate_losses(&model, &TaskBatches::translation(&t), 1.0).unwrap();
    assert_eq!((l.l_clm_src, l.l_clm_tgt, l.l_clm), (None, None, 0.0));
    assert_eq!(l.l_mtl, l.l_t.unwrap());
    assert!(matches!(evaluate_losses(&model, &TaskBatches::joint(&t, &s, &c), 1.0), Err(Error::Config(_))));
    assert!(matches!(evaluate_losses(&model, &TaskBatches::default(), 1.0), Err(Error::Data(_))));
}

#[test]
fn clm_weight_scales_only_the_auxiliary_term() {
    let toy = common::toy(8, 8, 8, 4);
    let model = NmtModel::multitask(small_config(toy.vocab.len())).unwrap();
    let (t, s, c) = batches(&toy, 0, 3);
    let l = evaluate_losses(&model, &TaskBatches::joint(&t, &s, &c), 0.25).unwrap();
    assert!((l.l_mtl - (l.l_t.unwrap() + 0.25 * l.l_clm)).abs() < 1e-12);
}

/// Gradients of `loss` for every parameter, computed in a fresh graph.
fn grads_of(model: &NmtModel, pick: impl Fn(&Graph, &Binder<'_>) -> mtnmt::tensor::Var) -> Vec<Option<Vec<f64>>> {
    let g = Graph::new();
    let b = Binder::new(&g, model.params());
    let root = pick(&g, &b);
    let mut grads = g.backward(root).unwrap();
    b.param_grads(&mut grads)
}

#[test]
fn joint_gradient_is_sum_of_task_gradients() {
    let toy = common::toy(8, 8, 8, 5);
    let model = NmtModel::multitask(small_config(toy.vocab.len())).unwrap();
    let (t, s, c) = batches(&toy, 0, 4);
    let ce = |g: &Graph, logits, batch: &Batch| g.cross_entropy(logits, &batch.labels.ids, PAD_ID).unwrap();
    let joint = grads_of(&model, |_, b| {
        compute_losses(&model, b, &TaskBatches::joint(&t, &s, &c), 1.0).map(|l| l.total).unwrap()
    });
    let gt = grads_of(&model, |g, b| ce(g, model.translation_logits(b, &t).unwrap(), &t));
    let gs = grads_of(&model, |g, b| ce(g, model.clm_logits(b, &s).unwrap(), &s));
    let gc = grads_of(&model, |g, b| ce(g, model.clm_logits(b, &c).unwrap(), &c));

    let params = model.params();
    let mut checked = 0;
    for id in params.ids().filter(|&id| params.name(id).starts_with("encoder.")) {
        let j = joint[id.index()].as_ref().unwrap();
        let parts = [&gt, &gs, &gc].map(|g| g[id.index()].clone().unwrap());
        for (k, &jk) in j.iter().enumerate() {
            let sum = parts[0][k] + parts[1][k] + parts[2][k];
            let scale = jk.abs().max(sum.abs()).max(1e-300);
            assert!((jk - sum).abs() <= 1e-10 * scale || (jk - sum).abs() < 1e-18, "{}[{k}]", params.name(id));
            checked += 1;
        }
    }
    assert!(checked > 0);

    let zero = |g: &Option<Vec<f64>>| g.as_ref().map_or(true, |v| v.iter().all(|&x| x == 0.0));
    for name in model.decoder_param_names(mtnmt::model::DecoderKind::Clm) {
        assert!(zero(&gt[params.id(name).unwrap().index()]), "l_t reached {name}");
    }
    for name in model.decoder_param_names(mtnmt::model::DecoderKind::Translation) {
        assert!(zero(&gs[params.id(name).unwrap().index()]), "l_clm reached {name}");
        assert!(zero(&gc[params.id(name).unwrap().index()]), "l_clm reached {name}");
    }
}

#[test]
fn loss_decreases_on_a_fixed_batch() {
    let toy = common::toy(8, 8, 8, 6);
    let model = NmtModel::multitask(small_config(toy.vocab.len())).unwrap();
    let mut trainer =
        Trainer::new(model, OptimizerConfig::desk(), TrainConfig::new(4, 4), &FreezeSpec::none()).unwrap();
    let (t, s, c) = batches(&toy, 0, 4);
    let b = TaskBatches::joint(&t, &s, &c);
    let first = trainer.train_step(&b).unwrap().l_mtl;
    let mut last = first;
    for _ in 0..20 {
        last = trainer.train_step(&b).unwrap().l_mtl;
    }
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn frozen_layers_stay_bit_identical() {
    let toy = common::toy(40, 40, 8, 7);
    let config = ModelConfig { n_enc_layers: 4, ..small_config(toy.vocab.len()) };
    let model = NmtModel::multitask(config).unwrap();
    let freeze = FreezeSpec::default_for(&model);
    assert!(freeze.names().all(|n| n.starts_with("encoder.layers.0.") || n.starts_with("encoder.layers.1.")));
    let initial = model.params().clone();
    let mut trainer = Trainer::new(model, OptimizerConfig::desk(), TrainConfig::new(4, 4), &freeze).unwrap();
    let data = TrainData {
        vocab: &toy.vocab,
        translation: &toy.pairs,
        validation: &[],
        source_mono: &toy.source_mono,
        target_mono: &toy.target_mono,
    };
    trainer.run(&data, 100, &mut MetricLog::in_memory(), None).unwrap();
    let after = trainer.model().params();
    for id in after.ids() {
        let name = after.name(id);
        if freeze.contains(name) {
            assert_eq!(after.get(id), initial.get(id), "{name} moved");
        } else {
            assert_ne!(after.get(id), initial.get(id), "{name} did not move");
        }
    }
}

#[test]
fn freezing_unknown_names_is_an_error() {
    let model = NmtModel::baseline(small_config(16)).unwrap();
    let spec = FreezeSpec::from_names(["encoder.layers.9.ff.inner.weight"]);
    assert!(Trainer::new(model, OptimizerConfig::desk(), TrainConfig::new(2, 2), &spec).is_err());
}

fn run(toy: &common::Toy, config: &TrainConfig, model: NmtModel, steps: u64) -> (Trainer, String) {
    let data = TrainData {
        vocab: &toy.vocab,
        translation: &toy.pairs,
        validation: &toy.validation,
        source_mono: &toy.source_mono,
        target_mono: &toy.target_mono,
    };
    let mut trainer = Trainer::new(model, OptimizerConfig::desk(), config.clone(), &FreezeSpec::none()).unwrap();
    let mut log = MetricLog::in_memory();
    trainer.run(&data, steps, &mut log, None).unwrap();
    (trainer, log.render())
}

#[test]
fn identical_seeds_give_identical_logs() {
    let toy = common::toy(12, 5, 8, 8);
    let config = TrainConfig { log_interval: 3, seed: 11, ..TrainConfig::new(4, 2) };
    let model = || NmtModel::multitask(small_config(toy.vocab.len())).unwrap();
    let (a, log_a) = run(&toy, &config, model(), 20);
    let (b, log_b) = run(&toy, &config, model(), 20);
    assert_eq!(log_a, log_b);
    assert_eq!(a.model().params(), b.model().params());
    assert_eq!(log_a.lines().count(), 1 + 7);

    let other = TrainConfig { seed: 12, ..config };
    let (_, log_c) = run(&toy, &other, model(), 20);
    assert_ne!(log_a, log_c);
}

#[test]
fn resume_matches_uninterrupted_training() {
    let toy = common::toy(12, 5, 8, 9);
    let dir = tempfile::tempdir().unwrap();
    for dropout_rate in [0.0, 0.2] {
        let model = || {
            NmtModel::multitask(ModelConfig { dropout_rate, ..small_config(toy.vocab.len()) }).unwrap()
        };
        let config = TrainConfig { log_interval: 10, checkpoint_interval: Some(100), ..TrainConfig::new(4, 2) };
        let (straight, straight_log) = run(&toy, &config, model(), 200);

        let data = TrainData {
            vocab: &toy.vocab,
            translation: &toy.pairs,
            validation: &toy.validation,
            source_mono: &toy.source_mono,
            target_mono: &toy.target_mono,
        };
        let ckpt_path = dir.path().join("run.ckpt");
        let log_path = dir.path().join("metrics.tsv");
        let mut first =
            Trainer::new(model(), OptimizerConfig::desk(), config.clone(), &FreezeSpec::none()).unwrap();
        let mut log = MetricLog::create(&log_path).unwrap();
        first.run(&data, 100, &mut log, Some(&ckpt_path)).unwrap();
        // simulate a crash that already logged past the checkpoint
        first.run(&data, 120, &mut log, None).unwrap();
        drop(log);

        let ckpt = load_checkpoint(&ckpt_path, straight.model().config(), straight.model().kind()).unwrap();
        assert_eq!(ckpt.step, 100);
        let mut resumed = Trainer::resume(ckpt, OptimizerConfig::desk(), config.clone(), &FreezeSpec::none()).unwrap();
        let mut log = MetricLog::resume(&log_path, 100).unwrap();
        resumed.run(&data, 200, &mut log, Some(&ckpt_path)).unwrap();

        assert_eq!(resumed.model().params(), straight.model().params(), "dropout {dropout_rate}");
        assert_eq!(std::fs::read_to_string(&log_path).unwrap(), straight_log);
        assert_eq!(read_checkpoint(&ckpt_path).unwrap().step, 200);
    }
}

#[test]
fn checkpoint_round_trip_and_rejections() {
    let toy = common::toy(12, 5, 8, 10);
    let config = TrainConfig::new(4, 2);
    let (trainer, _) = run(&toy, &config, NmtModel::multitask(small_config(toy.vocab.len())).unwrap(), 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    let ckpt = trainer.checkpoint();
    save_checkpoint(&ckpt, &path).unwrap();
    let loaded = load_checkpoint(&path, trainer.model().config(), trainer.model().kind()).unwrap();
    assert_eq!(loaded, ckpt);
    assert_eq!(loaded.model().unwrap().params(), trainer.model().params());
    assert_eq!(loaded.adam.moments[0].step, 3);

    let wider = ModelConfig { d_model: 16, ..trainer.model().config().clone() };
    assert!(matches!(
        load_checkpoint(&path, &wider, trainer.model().kind()),
        Err(Error::FingerprintMismatch { .. })
    ));
    assert!(load_checkpoint(&path, trainer.model().config(), mtnmt::model::ModelKind::Baseline).is_err());

    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(read_checkpoint(&path), Err(Error::Checkpoint(_))));
    std::fs::write(&path, &bytes[..20]).unwrap();
    assert!(matches!(read_checkpoint(&path), Err(Error::Checkpoint(_))));
    assert!(matches!(read_checkpoint(&dir.path().join("missing")), Err(Error::Io { .. })));
}

#[test]
fn round_robin_alternates_tasks() {
    let toy = common::toy(12, 5, 8, 11);
    let config = TrainConfig { log_interval: 1, mixing: MixingMode::RoundRobin, ..TrainConfig::new(4, 2) };
    let (_, log) = run(&toy, &config, NmtModel::multitask(small_config(toy.vocab.len())).unwrap(), 4);
    let rows = MetricLog::parse(&log).unwrap();
    assert_eq!(rows.len(), 4);
    for row in &rows {
        let translation_step = row.step % 2 == 1;
        assert_eq!(row.losses.l_t.is_some(), translation_step);
        assert_eq!(row.losses.l_clm_src.is_some(), !translation_step);
    }
    assert_eq!(config.total_steps(12), 6);
}

#[test]
fn baseline_ignores_monolingual_data_and_multitask_requires_it() {
    let toy = common::toy(12, 5, 8, 12);
    let config = TrainConfig { log_interval: 1, ..TrainConfig::new(4, 2) };
    let (_, log) = run(&toy, &config, NmtModel::baseline(small_config(toy.vocab.len())).unwrap(), 2);
    assert!(MetricLog::parse(&log).unwrap().iter().all(|r| r.losses.l_clm_src.is_none()));

    let model = NmtModel::multitask(small_config(toy.vocab.len())).unwrap();
    let mut trainer = Trainer::new(model, OptimizerConfig::desk(), config, &FreezeSpec::none()).unwrap();
    let data = TrainData {
        vocab: &toy.vocab,
        translation: &toy.pairs,
        validation: &[],
        source_mono: &[],
        target_mono: &toy.target_mono,
    };
    assert!(matches!(trainer.run(&data, 2, &mut MetricLog::in_memory(), None), Err(Error::Data(_))));
}

#[test]
fn train_config_validation_and_epochs() {
    assert!(TrainConfig::new(0, 2).validate().is_err());
    assert!(TrainConfig { log_interval: 0, ..TrainConfig::new(2, 2) }.validate().is_err());
    assert!(TrainConfig { clip_norm: Some(0.0), ..TrainConfig::new(2, 2) }.validate().is_err());
    let c = TrainConfig { epochs: 2, ..TrainConfig::new(16, 2) };
    assert_eq!(c.total_steps(100), 14);
    assert_eq!(TrainConfig { steps: Some(5), ..c }.total_steps(100), 5);
    let parsed: TrainConfig = toml::from_str("translation_batch_size = 16\nclm_batch_size = 2\n").unwrap();
    assert_eq!(parsed, TrainConfig::new(16, 2));
    assert!(toml::from_str::<TrainConfig>("translation_batch_size = 1\nclm_batch_size = 1\nlr = 3\n").is_err());
}

#[test]
fn metric_rows_round_trip() {
    let row = MetricRow {
        step: 7,
        losses: LossBreakdown { l_t: Some(1.5), l_clm_src: None, l_clm_tgt: Some(0.25), l_clm: 0.25, l_mtl: 1.75 },
        validation: Some(2.0),
    };
    let line = row.to_line();
    assert_eq!(line, "7\t1.50000000\t-\t0.25000000\t1.75000000\t2.00000000");
    assert_eq!(MetricRow::parse(&line).unwrap(), row);
    assert!(MetricRow::parse("1\t2").is_err());
    assert!(MetricLog::parse("no header\n").is_err());
}
