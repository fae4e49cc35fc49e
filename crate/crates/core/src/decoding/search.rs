use std::cmp::Ordering;

use super::scorer::{ModelScorer, StepScorer};
use super::{DecodeConfig, Hypothesis, PruneMode};
use crate::error::{Error, Result};
use crate::model::NmtModel;
use crate::text::{frame_source, TokenId, TokenSequence, Vocabulary};

fn step_rows(scorer: &impl StepScorer, prefixes: &[&[TokenId]]) -> Result<Vec<Vec<f64>>> {
    let rows = scorer.next_log_probs(prefixes)?;
    let v = scorer.vocab_size();
    if rows.len() != prefixes.len() || rows.iter().any(|r| r.len() != v) {
        return Err(Error::shape("decode", format!("scorer returned rows not matching {} × {v}", prefixes.len())));
    }
    Ok(rows)
}

/// Lowest index among the maxima.
fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold(0, |best, (i, &x)| if x > row[best] { i } else { best })
}

fn finish(cfg: &DecodeConfig, tokens: Vec<TokenId>, logprob_sum: f64) -> Result<Hypothesis> {
    Ok(Hypothesis { score: cfg.score(logprob_sum, tokens.len())?, tokens, logprob_sum, finished: true })
}

/// Best penalized score any continuation of a live prefix could reach:
/// further tokens only lower the sum, so the bound is the best
/// normalization over the remaining lengths.
fn optimistic_bound(cfg: &DecodeConfig, logprob_sum: f64, length: usize) -> f64 {
    (length + 1..=cfg.max_decode_len)
        .map(|len| logprob_sum / cfg.penalty_form.factor(len, cfg.length_penalty))
        .fold(f64::NEG_INFINITY, f64::max)
}

fn rank(hyps: &mut [Hypothesis]) {
    hyps.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| b.logprob_sum.total_cmp(&a.logprob_sum))
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
}

/// Argmax token at every step, lowest id on ties, until EOS or
/// `max_decode_len`.
pub fn greedy_decode(scorer: &impl StepScorer, cfg: &DecodeConfig) -> Result<Hypothesis> {
    cfg.validate()?;
    let mut tokens = Vec::new();
    let mut sum = 0.0;
    loop {
        let row = step_rows(scorer, &[&tokens])?.pop().expect("one row");
        let best = argmax(&row);
        sum += row[best];
        tokens.push(best as TokenId);
        if best as TokenId == cfg.eos_id || tokens.len() == cfg.max_decode_len {
            return finish(cfg, tokens, sum);
        }
    }
}

/// Beam search returning every completed hypothesis, best first.
pub fn beam_search(scorer: &impl StepScorer, cfg: &DecodeConfig) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    match cfg.prune {
        PruneMode::Raw => beam_raw(scorer, cfg),
        PruneMode::Penalized => beam_penalized(scorer, cfg),
    }
}

struct Live {
    tokens: Vec<TokenId>,
    sum: f64,
}

fn beam_raw(scorer: &impl StepScorer, cfg: &DecodeConfig) -> Result<Vec<Hypothesis>> {
    let mut live = vec![Live { tokens: Vec::new(), sum: 0.0 }];
    let mut completed: Vec<Hypothesis> = Vec::new();
    for step in 1..=cfg.max_decode_len {
        let prefixes: Vec<&[TokenId]> = live.iter().map(|h| h.tokens.as_slice()).collect();
        let rows = step_rows(scorer, &prefixes)?;
        // (sum, token, parent)
        let mut cands: Vec<(f64, TokenId, usize)> = rows
            .iter()
            .enumerate()
            .flat_map(|(p, row)| {
                let base = live[p].sum;
                row.iter().enumerate().map(move |(v, &lp)| (base + lp, v as TokenId, p))
            })
            .collect();
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cands.truncate(cfg.beam_size);

        let mut next = Vec::with_capacity(cands.len());
        for (sum, tok, parent) in cands {
            let mut tokens = live[parent].tokens.clone();
            tokens.push(tok);
            if tok == cfg.eos_id || step == cfg.max_decode_len {
                completed.push(finish(cfg, tokens, sum)?);
            } else {
                next.push(Live { tokens, sum });
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
        if completed.len() >= cfg.beam_size {
            rank(&mut completed);
            let kth = completed[cfg.beam_size - 1].score;
            let bound = live.iter().map(|h| optimistic_bound(cfg, h.sum, step)).fold(f64::NEG_INFINITY, f64::max);
            if kth >= bound {
                break;
            }
        }
    }
    rank(&mut completed);
    Ok(completed)
}

struct Entry {
    tokens: Vec<TokenId>,
    sum: f64,
    score: f64,
    finished: bool,
}

fn by_score(a: &Entry, b: &Entry) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens))
}

fn beam_penalized(scorer: &impl StepScorer, cfg: &DecodeConfig) -> Result<Vec<Hypothesis>> {
    let mut beam = vec![Entry { tokens: Vec::new(), sum: 0.0, score: 0.0, finished: false }];
    for step in 1..=cfg.max_decode_len {
        let (live, done): (Vec<Entry>, Vec<Entry>) = beam.into_iter().partition(|e| !e.finished);
        let prefixes: Vec<&[TokenId]> = live.iter().map(|h| h.tokens.as_slice()).collect();
        let rows = step_rows(scorer, &prefixes)?;
        let mut pool = done;
        for (h, row) in live.iter().zip(&rows) {
            for (v, &lp) in row.iter().enumerate() {
                let mut tokens = h.tokens.clone();
                tokens.push(v as TokenId);
                let sum = h.sum + lp;
                let finished = v as TokenId == cfg.eos_id || step == cfg.max_decode_len;
                pool.push(Entry { score: cfg.score(sum, step)?, tokens, sum, finished });
            }
        }
        pool.sort_by(by_score);
        pool.truncate(cfg.beam_size);
        beam = pool;
        if beam.iter().all(|e| e.finished) {
            break;
        }
    }
    let mut out: Vec<Hypothesis> = beam
        .into_iter()
        .map(|e| Hypothesis { tokens: e.tokens, logprob_sum: e.sum, score: e.score, finished: e.finished })
        .collect();
    rank(&mut out);
    Ok(out)
}

/// Best hypothesis for one source sentence, starting from the target
/// language tag. Beam size 1 runs greedy search.
pub fn translate(
    model: &NmtModel,
    vocab: &Vocabulary,
    source: &TokenSequence,
    target_language: &str,
    cfg: &DecodeConfig,
) -> Result<Hypothesis> {
    let max_len = model.config().max_len;
    let framed = frame_source(vocab.lang_id(&source.language)?, &source.ids, max_len);
    let scorer = ModelScorer::new(model, &framed, vocab.lang_id(target_language)?)?;
    let cfg = DecodeConfig { max_decode_len: cfg.max_decode_len.min(max_len), ..cfg.clone() };
    if cfg.beam_size == 1 {
        return greedy_decode(&scorer, &cfg);
    }
    beam_search(&scorer, &cfg)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::Data("beam search produced no hypothesis".into()))
}
