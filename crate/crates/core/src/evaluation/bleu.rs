use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How sentence statistics combine into one corpus score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusMode {
    /// Sum clipped counts and lengths over the corpus, then smooth once.
    #[default]
    Micro,
    /// Mean of per-sentence scores; a diagnostic.
    Macro,
}

fn default_max_n() -> usize {
    4
}

fn default_k() -> f64 {
    5.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BleuConfig {
    #[serde(default = "default_max_n")]
    pub max_n: usize,
    /// Method-4 smoothing constant.
    #[serde(default = "default_k")]
    pub k: f64,
    #[serde(default)]
    pub mode: CorpusMode,
}

impl Default for BleuConfig {
    fn default() -> Self {
        Self { max_n: default_max_n(), k: default_k(), mode: CorpusMode::Micro }
    }
}

impl BleuConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_n == 0 {
            return Err(Error::Config("max_n must be at least 1".into()));
        }
        if !(self.k > 0.0) {
            return Err(Error::Config("smoothing constant k must be positive".into()));
        }
        Ok(())
    }
}

/// Clipped n-gram matches for orders `1..=max_n` against a single reference.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NgramPrecisionSet {
    pub numerators: Vec<usize>,
    /// Hypothesis n-gram counts, `max(0, hyp_len - n + 1)`.
    pub denominators: Vec<usize>,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl NgramPrecisionSet {
    /// True when the hypothesis has no tokens, so every denominator is 0.
    pub fn is_empty(&self) -> bool {
        self.hyp_len == 0
    }
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w).or_default() += 1;
    }
    counts
}

pub fn ngram_precisions<T: Eq + Hash>(hypothesis: &[T], reference: &[T], max_n: usize) -> NgramPrecisionSet {
    let (numerators, denominators) = (1..=max_n)
        .map(|n| {
            if hypothesis.len() < n {
                return (0, 0);
            }
            let hyp = ngram_counts(hypothesis, n);
            let refc = ngram_counts(reference, n);
            let clipped = hyp.iter().map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0))).sum();
            (clipped, hypothesis.len() - n + 1)
        })
        .unzip();
    NgramPrecisionSet { numerators, denominators, hyp_len: hypothesis.len(), ref_len: reference.len() }
}

/// Chen & Cherry method 4: the i-th order with no matches (counting only
/// such orders, from 1) gets `ln(hyp_len) / (2^i · k)` matches instead.
/// `denominators` must already be at least 1.
pub fn smooth_method4(numerators: &[usize], denominators: &[usize], hyp_len: usize, k: f64) -> Vec<f64> {
    let mut c = 1;
    numerators
        .iter()
        .zip(denominators)
        .map(|(&num, &den)| {
            if num == 0 && hyp_len > 1 {
                let p = (hyp_len as f64).ln() / (2f64.powi(c) * k) / den as f64;
                c += 1;
                p
            } else {
                num as f64 / den as f64
            }
        })
        .collect()
}

pub fn brevity_penalty(hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len > ref_len {
        1.0
    } else if hyp_len == 0 {
        0.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BleuReport {
    /// Aggregated clipped matches per order.
    pub numerators: Vec<usize>,
    /// Aggregated per-sentence denominators, each raised to at least 1.
    pub denominators: Vec<usize>,
    pub precisions: Vec<f64>,
    pub smoothed: Vec<f64>,
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
    pub bleu: f64,
    /// Why the score collapsed to 0, when it did for a structural reason.
    pub diagnostic: Option<&'static str>,
}

impl BleuReport {
    /// One line: score and raw precisions on the 0-100 scale, then the
    /// brevity penalty and lengths.
    pub fn render(&self) -> String {
        let precisions: Vec<String> = self.precisions.iter().map(|p| format!("{:.1}", p * 100.0)).collect();
        let mut line = format!(
            "BLEU = {:.2} {} (BP = {:.3}, hyp_len = {}, ref_len = {})",
            self.bleu * 100.0,
            precisions.join("/"),
            self.brevity_penalty,
            self.hyp_len,
            self.ref_len
        );
        if let Some(d) = self.diagnostic {
            line.push_str(&format!(" [{d}]"));
        }
        line
    }
}

#[derive(Default)]
struct Totals {
    numerators: Vec<usize>,
    denominators: Vec<usize>,
    hyp_len: usize,
    ref_len: usize,
}

impl Totals {
    fn new(max_n: usize) -> Self {
        Self { numerators: vec![0; max_n], denominators: vec![0; max_n], ..Self::default() }
    }

    fn add(&mut self, set: &NgramPrecisionSet) {
        for (i, (&n, &d)) in set.numerators.iter().zip(&set.denominators).enumerate() {
            self.numerators[i] += n;
            // orders longer than the sentence still count one slot
            self.denominators[i] += d.max(1);
        }
        self.hyp_len += set.hyp_len;
        self.ref_len += set.ref_len;
    }

    fn report(self, k: f64) -> BleuReport {
        let precisions: Vec<f64> =
            self.numerators.iter().zip(&self.denominators).map(|(&n, &d)| n as f64 / d as f64).collect();
        let bp = brevity_penalty(self.hyp_len, self.ref_len);
        let smoothed = smooth_method4(&self.numerators, &self.denominators, self.hyp_len, k);
        let (bleu, diagnostic) = if self.hyp_len == 0 {
            (0.0, Some("empty hypothesis"))
        } else if self.numerators[0] == 0 {
            (0.0, Some("no unigram matches"))
        } else if smoothed.iter().any(|&p| p == 0.0) {
            (0.0, Some("zero precision left after smoothing"))
        } else {
            let w = 1.0 / smoothed.len() as f64;
            (bp * smoothed.iter().map(|p| w * p.ln()).sum::<f64>().exp(), None)
        };
        BleuReport {
            numerators: self.numerators,
            denominators: self.denominators,
            precisions,
            smoothed,
            brevity_penalty: bp,
            hyp_len: self.hyp_len,
            ref_len: self.ref_len,
            bleu,
            diagnostic,
        }
    }
}

/// Smoothed cumulative BLEU of one hypothesis against one reference.
pub fn sentence_bleu<T: Eq + Hash>(hypothesis: &[T], reference: &[T], cfg: &BleuConfig) -> Result<BleuReport> {
    corpus_bleu([(hypothesis, reference)], cfg)
}

/// Corpus BLEU with counts summed over all pairs before smoothing and the
/// brevity penalty. `cfg.mode` is ignored here; see [`score_corpus`].
pub fn corpus_bleu<'a, T, I>(pairs: I, cfg: &BleuConfig) -> Result<BleuReport>
where
    T: Eq + Hash + 'a,
    I: IntoIterator<Item = (&'a [T], &'a [T])>,
{
    cfg.validate()?;
    let mut totals = Totals::new(cfg.max_n);
    let mut n_pairs = 0;
    for (hyp, reference) in pairs {
        if reference.is_empty() {
            return Err(Error::Data(format!("reference {n_pairs} is empty")));
        }
        totals.add(&ngram_precisions(hyp, reference, cfg.max_n));
        n_pairs += 1;
    }
    if n_pairs == 0 {
        return Err(Error::Data("cannot score an empty corpus".into()));
    }
    Ok(totals.report(cfg.k))
}

/// Corpus score in the configured aggregation mode.
pub fn score_corpus<'a, T, I>(pairs: I, cfg: &BleuConfig) -> Result<f64>
where
    T: Eq + Hash + 'a,
    I: IntoIterator<Item = (&'a [T], &'a [T])>,
{
    match cfg.mode {
        CorpusMode::Micro => corpus_bleu(pairs, cfg).map(|r| r.bleu),
        CorpusMode::Macro => {
            let scores = pairs
                .into_iter()
                .map(|(h, r)| sentence_bleu(h, r, cfg).map(|r| r.bleu))
                .collect::<Result<Vec<f64>>>()?;
            if scores.is_empty() {
                return Err(Error::Data("cannot score an empty corpus".into()));
            }
            Ok(scores.iter().sum::<f64>() / scores.len() as f64)
        }
    }
}
