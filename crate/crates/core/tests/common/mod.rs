#![allow(dead_code)]

use mtnmt::text::{encode_lines, encode_pairs, ParallelExample, TextPair, TokenSequence, TokenizeMode, Vocabulary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Toy {
    pub vocab: Vocabulary,
    pub pairs: Vec<ParallelExample>,
    pub validation: Vec<ParallelExample>,
    pub source_mono: Vec<TokenSequence>,
    pub target_mono: Vec<TokenSequence>,
}

fn sentence(rng: &mut ChaCha8Rng, words: usize) -> Vec<usize> {
    let len = rng.gen_range(2..=5);
    (0..len).map(|_| rng.gen_range(0..words)).collect()
}

/// Two toy languages: target word `t{i}` translates source word `s{i}`, and
/// the word order is reversed.
pub fn toy(n_pairs: usize, n_mono: usize, words: usize, seed: u64) -> Toy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let render = |prefix: &str, ids: &[usize]| ids.iter().map(|i| format!("{prefix}{i}")).collect::<Vec<_>>().join(" ");
    let mut pairs = Vec::new();
    for _ in 0..n_pairs + 4 {
        let s = sentence(&mut rng, words);
        let t: Vec<usize> = s.iter().rev().copied().collect();
        pairs.push(TextPair { source: render("s", &s), target: render("t", &t) });
    }
    let src_mono: Vec<String> = (0..n_mono).map(|_| render("s", &sentence(&mut rng, words))).collect();
    let tgt_mono: Vec<String> = (0..n_mono).map(|_| render("t", &sentence(&mut rng, words))).collect();
    let all: Vec<String> = (0..words).flat_map(|i| [format!("s{i}"), format!("t{i}")]).collect();
    let vocab = Vocabulary::build(all.iter().map(String::as_str), &["src", "tgt"], TokenizeMode::Word, 1).unwrap();
    let mut examples = encode_pairs(&pairs, &vocab, "src", "tgt").unwrap();
    let validation = examples.split_off(n_pairs);
    Toy {
        pairs: examples,
        validation,
        source_mono: encode_lines(&src_mono, &vocab, "src").unwrap(),
        target_mono: encode_lines(&tgt_mono, &vocab, "tgt").unwrap(),
        vocab,
    }
}
