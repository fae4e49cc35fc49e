//! Deterministic toy language pairs, so the whole pipeline runs without
//! external data.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How a sentence of the second language derives from the first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    /// Identical token strings in both languages.
    Copy,
    /// A fixed word-to-word substitution, then every adjacent pair of
    /// positions (0 and 1, 2 and 3, ...) swapped.
    SubstituteSwap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub relation: Relation,
    /// Word types per language.
    pub words: usize,
    /// Parallel lines to generate.
    pub pairs: usize,
    /// Monolingual lines per language.
    pub monolingual: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.words == 0 || self.pairs == 0 {
            return Err(Error::Config("synthetic corpora need at least one word and one pair".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "synthetic sentence lengths must satisfy 1 <= min_len <= max_len, got {}..={}",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticCorpus {
    /// Aligned lines for the first and second language.
    pub parallel: [Vec<String>; 2],
    pub monolingual: [Vec<String>; 2],
}

struct Generator<'a> {
    spec: &'a SyntheticSpec,
    /// Second-language word index for each first-language word.
    mapping: Vec<usize>,
}

impl Generator<'_> {
    fn sentence(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let n = rng.gen_range(self.spec.min_len..=self.spec.max_len);
        (0..n).map(|_| rng.gen_range(0..self.spec.words)).collect()
    }

    fn first(&self, words: &[usize]) -> String {
        let prefix = if self.spec.relation == Relation::Copy { "w" } else { "x" };
        words.iter().map(|w| format!("{prefix}{w}")).collect::<Vec<_>>().join(" ")
    }

    fn second(&self, words: &[usize]) -> String {
        if self.spec.relation == Relation::Copy {
            return self.first(words);
        }
        let mut out: Vec<String> = words.iter().map(|&w| format!("y{}", self.mapping[w])).collect();
        for pair in out.chunks_mut(2) {
            pair.reverse();
        }
        out.join(" ")
    }
}

pub fn generate(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mapping: Vec<usize> = (0..spec.words).collect();
    mapping.shuffle(&mut rng);
    let g = Generator { spec, mapping };
    let mut parallel = [Vec::with_capacity(spec.pairs), Vec::with_capacity(spec.pairs)];
    for _ in 0..spec.pairs {
        let s = g.sentence(&mut rng);
        parallel[0].push(g.first(&s));
        parallel[1].push(g.second(&s));
    }
    // monolingual text is drawn independently of the bitext
    let mono = |side: usize, rng: &mut ChaCha8Rng| -> Vec<String> {
        (0..spec.monolingual)
            .map(|_| {
                let s = g.sentence(rng);
                if side == 0 { g.first(&s) } else { g.second(&s) }
            })
            .collect()
    };
    let monolingual = [mono(0, &mut rng), mono(1, &mut rng)];
    Ok(SyntheticCorpus { parallel, monolingual })
}

/// Writes `lines` newline-terminated, skipping the write when the file
/// already holds exactly that content.
pub(crate) fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = lines.join("\n");
    if !lines.is_empty() {
        text.push('\n');
    }
    if std::fs::read(path).is_ok_and(|old| old == text.as_bytes()) {
        return Ok(());
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
