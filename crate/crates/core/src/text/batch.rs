use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::corpus::TextPair;
use super::vocab::{TokenId, Vocabulary, EOS_ID, PAD_ID};
use crate::error::{Error, Result};

/// Token ids for one sentence in one language, without framing tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub language: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelExample {
    pub source: TokenSequence,
    pub target: TokenSequence,
}

/// PAD-filled `rows × cols` id matrix with its real-token mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenMatrix {
    pub rows: usize,
    pub cols: usize,
    pub ids: Vec<TokenId>,
    pub mask: Vec<bool>,
}

impl TokenMatrix {
    pub fn from_rows(rows: &[Vec<TokenId>]) -> Result<Self> {
        let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
        if rows.is_empty() || cols == 0 {
            return Err(Error::Data("cannot pad an empty set of sequences".into()));
        }
        let mut ids = vec![PAD_ID; rows.len() * cols];
        let mut mask = vec![false; rows.len() * cols];
        for (r, row) in rows.iter().enumerate() {
            ids[r * cols..r * cols + row.len()].copy_from_slice(row);
            mask[r * cols..r * cols + row.len()].iter_mut().for_each(|m| *m = true);
        }
        Ok(Self { rows: rows.len(), cols, ids, mask })
    }

    pub fn row(&self, r: usize) -> &[TokenId] {
        &self.ids[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mask(&self, r: usize) -> &[bool] {
        &self.mask[r * self.cols..(r + 1) * self.cols]
    }

    pub fn lengths(&self) -> Vec<usize> {
        (0..self.rows).map(|r| self.row_mask(r).iter().filter(|&&m| m).count()).collect()
    }
}

/// Encoder input plus teacher-forced decoder input and labels. Label
/// positions that are padding hold `PAD_ID`, which the loss ignores.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub source: TokenMatrix,
    pub decoder_input: TokenMatrix,
    pub labels: TokenMatrix,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.source.rows
    }

    pub fn is_empty(&self) -> bool {
        self.source.rows == 0
    }

    /// Number of non-PAD label positions.
    pub fn label_count(&self) -> usize {
        self.labels.mask.iter().filter(|&&m| m).count()
    }
}

fn truncate<'a>(ids: &'a [TokenId], keep: usize, what: &str) -> &'a [TokenId] {
    if ids.len() > keep {
        log::warn!("{what} of {} tokens truncated to {keep}", ids.len());
        &ids[..keep]
    } else {
        ids
    }
}

fn check_max_len(max_len: usize) -> Result<()> {
    if max_len < 2 {
        return Err(Error::Config(format!("max_len must be at least 2, got {max_len}")));
    }
    Ok(())
}

/// Encoder framing: `[LANG] + tokens + [EOS]`, content truncated to fit `max_len`.
pub fn frame_source(lang: TokenId, ids: &[TokenId], max_len: usize) -> Vec<TokenId> {
    let body = truncate(ids, max_len.saturating_sub(2), "source");
    let mut out = Vec::with_capacity(body.len() + 2);
    out.push(lang);
    out.extend_from_slice(body);
    out.push(EOS_ID);
    out
}

/// Decoder framing: input `[LANG] + tokens`, labels `tokens + [EOS]`.
pub fn frame_target(lang: TokenId, ids: &[TokenId], max_len: usize) -> (Vec<TokenId>, Vec<TokenId>) {
    let body = truncate(ids, max_len.saturating_sub(1), "target");
    let mut input = Vec::with_capacity(body.len() + 1);
    input.push(lang);
    input.extend_from_slice(body);
    let mut labels = body.to_vec();
    labels.push(EOS_ID);
    (input, labels)
}

fn assemble(rows: Vec<(Vec<TokenId>, Vec<TokenId>, Vec<TokenId>)>) -> Result<Batch> {
    let (src, (inp, lab)): (Vec<_>, (Vec<_>, Vec<_>)) =
        rows.into_iter().map(|(s, i, l)| (s, (i, l))).unzip();
    Ok(Batch {
        source: TokenMatrix::from_rows(&src)?,
        decoder_input: TokenMatrix::from_rows(&inp)?,
        labels: TokenMatrix::from_rows(&lab)?,
    })
}

pub fn parallel_batch(examples: &[&ParallelExample], vocab: &Vocabulary, max_len: usize) -> Result<Batch> {
    check_max_len(max_len)?;
    let rows = examples
        .iter()
        .map(|ex| {
            let src_lang = vocab.lang_id(&ex.source.language)?;
            let tgt_lang = vocab.lang_id(&ex.target.language)?;
            let (inp, lab) = frame_target(tgt_lang, &ex.target.ids, max_len);
            Ok((frame_source(src_lang, &ex.source.ids, max_len), inp, lab))
        })
        .collect::<Result<Vec<_>>>()?;
    assemble(rows)
}

/// CLM batch: the encoder sees only `[LANG] + [EOS]`; the decoder models the sentence.
pub fn monolingual_batch(seqs: &[&TokenSequence], vocab: &Vocabulary, max_len: usize) -> Result<Batch> {
    check_max_len(max_len)?;
    let rows = seqs
        .iter()
        .map(|seq| {
            let lang = vocab.lang_id(&seq.language)?;
            let (inp, lab) = frame_target(lang, &seq.ids, max_len);
            Ok((vec![lang, EOS_ID], inp, lab))
        })
        .collect::<Result<Vec<_>>>()?;
    assemble(rows)
}

/// Seeded permutation of `0..n` cut into consecutive chunks; the final
/// partial chunk is kept.
pub fn batch_order(n: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if n == 0 {
        return Err(Error::Data("cannot batch an empty split".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

pub fn make_parallel_batches(
    examples: &[ParallelExample],
    batch_size: usize,
    vocab: &Vocabulary,
    max_len: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    batch_order(examples.len(), batch_size, seed)?
        .iter()
        .map(|chunk| {
            let picked: Vec<&ParallelExample> = chunk.iter().map(|&i| &examples[i]).collect();
            parallel_batch(&picked, vocab, max_len)
        })
        .collect()
}

pub fn make_monolingual_batches(
    seqs: &[TokenSequence],
    batch_size: usize,
    vocab: &Vocabulary,
    max_len: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    batch_order(seqs.len(), batch_size, seed)?
        .iter()
        .map(|chunk| {
            let picked: Vec<&TokenSequence> = chunk.iter().map(|&i| &seqs[i]).collect();
            monolingual_batch(&picked, vocab, max_len)
        })
        .collect()
}

pub fn encode_pairs(
    pairs: &[TextPair],
    vocab: &Vocabulary,
    source_lang: &str,
    target_lang: &str,
) -> Result<Vec<ParallelExample>> {
    pairs
        .iter()
        .map(|p| {
            Ok(ParallelExample {
                source: vocab.encode(&p.source, source_lang)?,
                target: vocab.encode(&p.target, target_lang)?,
            })
        })
        .collect()
}

pub fn encode_lines(lines: &[String], vocab: &Vocabulary, language: &str) -> Result<Vec<TokenSequence>> {
    lines.iter().map(|l| vocab.encode(l, language)).collect()
}
