use mtnmt::model::{Binder, DecoderKind, ModelConfig, ModelKind, NmtModel};
use mtnmt::tensor::{grad_check, GradCheckConfig, Graph, Tensor};
use mtnmt::text::{Batch, TokenMatrix, EOS_ID, PAD_ID};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const V: usize = 16;

fn rows(seed: u64, lens: &[usize]) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    lens.iter().map(|&n| (0..n).map(|_| rng.gen_range(4..V as u32)).collect()).collect()
}

fn batch(seed: u64) -> Batch {
    let src = rows(seed, &[5, 3]);
    let tgt = rows(seed + 100, &[4, 2]);
    let input: Vec<Vec<u32>> = tgt.iter().map(|t| [&[4u32][..], t].concat()).collect();
    let labels: Vec<Vec<u32>> = tgt.iter().map(|t| [&t[..], &[EOS_ID][..]].concat()).collect();
    Batch {
        source: TokenMatrix::from_rows(&src).unwrap(),
        decoder_input: TokenMatrix::from_rows(&input).unwrap(),
        labels: TokenMatrix::from_rows(&labels).unwrap(),
    }
}

fn logits(model: &NmtModel, b: &Batch, which: DecoderKind) -> Tensor {
    let g = Graph::new();
    let binder = Binder::inference(&g, model.params());
    let out = match which {
        DecoderKind::Translation => model.translation_logits(&binder, b),
        DecoderKind::Clm => model.clm_logits(&binder, b),
    }
    .unwrap();
    g.value(out)
}

fn model_grad_check(model: &NmtModel, tol: f64, loss: impl Fn(&NmtModel, &Binder<'_>) -> mtnmt::Result<mtnmt::tensor::Var>) {
    let inputs: Vec<Tensor> = model.params().ids().map(|id| model.params().get(id).clone()).collect();
    let report = grad_check(
        |g, vars| {
            let b = Binder::from_vars(g, model.params(), vars)?;
            loss(model, &b)
        },
        &inputs,
        GradCheckConfig::with_tolerance(tol),
    )
    .unwrap();
    let worst = report.worst().unwrap();
    assert!(
        report.passed(),
        "max rel error {} at `{}`[{}]: analytic {} numeric {}",
        worst.max_rel_error,
        model.params().name(model.params().ids().nth(worst.input).unwrap()),
        worst.worst_index,
        worst.analytic,
        worst.numeric
    );
}

#[test]
fn parameter_count_matches_enumeration() {
    // d=8, heads=2, 2+2 layers, d_ff=16, V=32, enumerated shape by shape
    let mut c = ModelConfig::tiny(32);
    c.n_enc_layers = 2;
    c.n_dec_layers = 2;
    let (d, f, v) = (8usize, 16usize, 32usize);
    let linear = |i: usize, o: usize| i * o + o;
    let norm = 2 * d;
    let attn = 4 * linear(d, d);
    let ff = linear(d, f) + linear(f, d);
    let enc_layer = [norm, attn, norm, ff].iter().sum::<usize>();
    let dec_layer = [norm, attn, norm, attn, norm, ff].iter().sum::<usize>();
    let baseline = v * d + 2 * enc_layer + norm + 2 * dec_layer + norm;
    let mtl = baseline + 2 * dec_layer + norm + d * v;
    assert_eq!((baseline, mtl), (3296, 5376));

    let b = NmtModel::baseline(c.clone()).unwrap();
    let m = NmtModel::multitask(c.clone()).unwrap();
    assert_eq!(b.params().numel(), baseline);
    assert_eq!(m.params().numel(), mtl);
    assert_eq!(NmtModel::expected_numel(&c, ModelKind::Baseline), baseline);
    assert_eq!(NmtModel::expected_numel(&c, ModelKind::Mtl), mtl);
    c.tie_clm_projection = true;
    assert_eq!(NmtModel::multitask(c.clone()).unwrap().params().numel(), mtl - d * v);
    assert_eq!(NmtModel::expected_numel(&c, ModelKind::Mtl), mtl - d * v);
}

#[test]
fn shapes() {
    let m = NmtModel::multitask(ModelConfig::tiny(V)).unwrap();
    let b = batch(1);
    let g = Graph::new();
    let binder = Binder::inference(&g, m.params());
    assert_eq!(g.shape(m.encode(&binder, &b.source).unwrap()), vec![2, 5, 8]);
    assert_eq!(logits(&m, &b, DecoderKind::Translation).shape(), &[2, 5, V]);
    assert_eq!(logits(&m, &b, DecoderKind::Clm).shape(), &[2, 5, V]);
}

#[test]
fn encoder_ignores_padding_content() {
    let m = NmtModel::baseline(ModelConfig::tiny(V)).unwrap();
    let b = batch(2);
    let mut altered = b.source.clone();
    // row 1 has 3 real tokens followed by 2 PAD positions
    altered.ids[5 + 3] = 9;
    altered.ids[5 + 4] = 11;
    let run = |src: &TokenMatrix| {
        let g = Graph::new();
        let binder = Binder::inference(&g, m.params());
        g.value(m.encode(&binder, src).unwrap())
    };
    let (a, c) = (run(&b.source), run(&altered));
    for (i, (x, y)) in a.data().iter().zip(c.data()).enumerate() {
        let (row, pos) = (i / (5 * 8), (i / 8) % 5);
        if b.source.mask[row * 5 + pos] {
            assert_eq!(x.to_bits(), y.to_bits(), "real position {row},{pos} changed");
        }
    }
}

#[test]
fn decoders_are_causal() {
    let m = NmtModel::multitask(ModelConfig::tiny(V)).unwrap();
    let b = batch(3);
    for which in [DecoderKind::Translation, DecoderKind::Clm] {
        let base = logits(&m, &b, which);
        for j in 1..5 {
            let mut changed = b.clone();
            changed.decoder_input.ids[j] = if changed.decoder_input.ids[j] == 5 { 6 } else { 5 };
            let out = logits(&m, &changed, which);
            let row0 = |t: &Tensor, pos: usize| t.data()[pos * V..(pos + 1) * V].to_vec();
            for pos in 0..j {
                assert_eq!(row0(&base, pos), row0(&out, pos), "{which:?}: position {pos} saw token {j}");
            }
            assert_ne!(row0(&base, j), row0(&out, j));
        }
    }
}

#[test]
fn zero_layer_decoder_projects_embeddings() {
    let mut c = ModelConfig::tiny(V);
    c.n_dec_layers = 0;
    let m = NmtModel::baseline(c.clone()).unwrap();
    let input = TokenMatrix::from_rows(&[vec![4, 7, 9]]).unwrap();
    let g = Graph::new();
    let binder = Binder::inference(&g, m.params());
    let memory = g.constant(Tensor::zeros(&[1, 2, 8]));
    let out = g.value(m.decode(&binder, DecoderKind::Translation, &input, memory, &[true, true]).unwrap());

    // independent: normalize(sqrt(d) * E[id] + PE[pos]) · Eᵀ
    let emb = m.params().by_name("embedding").unwrap().data();
    let pe = mtnmt::model::positional_encoding(3, 8);
    for (pos, &id) in input.ids.iter().enumerate() {
        let x: Vec<f64> = (0..8).map(|k| 8f64.sqrt() * emb[id as usize * 8 + k] + pe[pos * 8 + k]).collect();
        let mean = x.iter().sum::<f64>() / 8.0;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        let h: Vec<f64> = x.iter().map(|v| (v - mean) / (var + c.layer_norm_eps).sqrt()).collect();
        for tok in 0..V {
            let expect: f64 = (0..8).map(|k| h[k] * emb[tok * 8 + k]).sum();
            assert!((out.data()[pos * V + tok] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn baseline_and_mtl_agree_on_translation_path() {
    let mut c = ModelConfig::tiny(V);
    let base = NmtModel::baseline(c.clone()).unwrap();
    c.seed = 99;
    let mut mtl = NmtModel::multitask(c).unwrap();
    let b = batch(4);
    assert_ne!(logits(&base, &b, DecoderKind::Translation), logits(&mtl, &b, DecoderKind::Translation));
    assert_eq!(mtl.copy_shared_from(&base).unwrap(), base.params().len());
    assert_eq!(logits(&base, &b, DecoderKind::Translation), logits(&mtl, &b, DecoderKind::Translation));
}

#[test]
fn shared_encoder_and_isolated_decoders() {
    let m = NmtModel::multitask(ModelConfig::tiny(V)).unwrap();
    let b = batch(5);
    let t0 = logits(&m, &b, DecoderKind::Translation);
    let c0 = logits(&m, &b, DecoderKind::Clm);
    let perturbed = |name: &str| {
        let mut m2 = m.clone();
        m2.params_mut().by_name_mut(name).unwrap().data_mut()[0] += 0.5;
        (logits(&m2, &b, DecoderKind::Translation), logits(&m2, &b, DecoderKind::Clm))
    };
    let (t, c) = perturbed("encoder.layers.0.self_attn.value.weight");
    assert_ne!(t, t0);
    assert_ne!(c, c0);
    let (t, c) = perturbed("decoder.layers.0.ff.inner.weight");
    assert_ne!(t, t0);
    assert_eq!(c, c0);
    let (t, c) = perturbed("clm_decoder.layers.0.ff.inner.weight");
    assert_eq!(t, t0);
    assert_ne!(c, c0);
}

#[test]
fn uniform_init_gives_ln_v() {
    let mut m = NmtModel::multitask(ModelConfig::tiny(V)).unwrap();
    m.zero_output_projections();
    let b = batch(6);
    for which in [DecoderKind::Translation, DecoderKind::Clm] {
        let g = Graph::new();
        let binder = Binder::inference(&g, m.params());
        let l = match which {
            DecoderKind::Translation => m.translation_logits(&binder, &b),
            DecoderKind::Clm => m.clm_logits(&binder, &b),
        }
        .unwrap();
        let loss = g.item(g.cross_entropy(l, &b.labels.ids, PAD_ID).unwrap());
        assert!((loss - (V as f64).ln()).abs() / (V as f64).ln() < 1e-12);
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let m = NmtModel::multitask(ModelConfig::tiny(V)).unwrap();
    let b = batch(7);
    assert_eq!(logits(&m, &b, DecoderKind::Clm), logits(&m, &b, DecoderKind::Clm));
}

#[test]
fn gradcheck_one_layer_encoder() {
    let m = NmtModel::baseline(ModelConfig::tiny(V)).unwrap();
    let b = batch(8);
    let w = Tensor::from_fn(&[2, 5, 8], |i| ((i * 7919) % 13) as f64 / 13.0 - 0.5);
    model_grad_check(&m, 1e-4, |m, binder| {
        let g = binder.graph();
        let h = m.encode(binder, &b.source)?;
        Ok(g.sum(g.mul(h, g.constant(w.clone()))?))
    });
}

#[test]
fn gradcheck_one_layer_decoder() {
    let m = NmtModel::baseline(ModelConfig::tiny(V)).unwrap();
    let b = batch(9);
    let memory = Tensor::from_fn(&[2, 5, 8], |i| ((i * 31) % 17) as f64 / 17.0 - 0.5);
    model_grad_check(&m, 1e-4, |m, binder| {
        let g = binder.graph();
        let mem = g.constant(memory.clone());
        let l = m.decode(binder, DecoderKind::Translation, &b.decoder_input, mem, &b.source.mask)?;
        g.cross_entropy(l, &b.labels.ids, PAD_ID)
    });
}

#[test]
fn gradcheck_full_multitask_model() {
    let m = NmtModel::multitask(ModelConfig::tiny(V)).unwrap();
    let b = batch(10);
    let mono = batch(11);
    model_grad_check(&m, 1e-4, |m, binder| {
        let g = binder.graph();
        let lt = g.cross_entropy(m.translation_logits(binder, &b)?, &b.labels.ids, PAD_ID)?;
        let lc = g.cross_entropy(m.clm_logits(binder, &mono)?, &mono.labels.ids, PAD_ID)?;
        g.add(lt, lc)
    });
}
