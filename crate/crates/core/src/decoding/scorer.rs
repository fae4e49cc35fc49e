use crate::error::{Error, Result};
use crate::model::{Binder, DecoderKind, NmtModel};
use crate::tensor::{Graph, Tensor};
use crate::text::{TokenId, TokenMatrix};

/// Next-token log-probabilities for a batch of prefixes.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;

    /// One row of `vocab_size` log-probabilities per prefix. Prefixes exclude
    /// the start token.
    fn next_log_probs(&self, prefixes: &[&[TokenId]]) -> Result<Vec<Vec<f64>>>;
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

/// Scores translation prefixes for one source sentence. The encoder runs
/// once; every step recomputes the decoder over the full prefix.
pub struct ModelScorer<'m> {
    model: &'m NmtModel,
    which: DecoderKind,
    memory: Tensor,
    memory_mask: Vec<bool>,
    start: TokenId,
}

impl<'m> ModelScorer<'m> {
    /// `source` is the framed encoder input; decoding starts from `start`.
    pub fn new(model: &'m NmtModel, source: &[TokenId], start: TokenId) -> Result<Self> {
        Self::with_decoder(model, DecoderKind::Translation, source, start)
    }

    pub fn with_decoder(model: &'m NmtModel, which: DecoderKind, source: &[TokenId], start: TokenId) -> Result<Self> {
        let matrix = TokenMatrix::from_rows(&[source.to_vec()])?;
        let g = Graph::new();
        let b = Binder::inference(&g, model.params());
        let memory = g.value(model.encode(&b, &matrix)?);
        Ok(Self { model, which, memory, memory_mask: matrix.mask, start })
    }
}

impl StepScorer for ModelScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    fn next_log_probs(&self, prefixes: &[&[TokenId]]) -> Result<Vec<Vec<f64>>> {
        let Some(first) = prefixes.first() else { return Ok(Vec::new()) };
        let len = first.len() + 1;
        if prefixes.iter().any(|p| p.len() + 1 != len) {
            return Err(Error::shape("next_log_probs", "prefixes of different lengths"));
        }
        let rows: Vec<Vec<TokenId>> =
            prefixes.iter().map(|p| std::iter::once(self.start).chain(p.iter().copied()).collect()).collect();
        let input = TokenMatrix::from_rows(&rows)?;
        let k = rows.len();
        let ms = self.memory.shape();
        let memory = Tensor::new(vec![k, ms[1], ms[2]], self.memory.data().repeat(k))?;
        let mask = self.memory_mask.repeat(k);

        let g = Graph::new();
        let b = Binder::inference(&g, self.model.params());
        let logits = self.model.decode(&b, self.which, &input, g.constant(memory), &mask)?;
        let v = self.vocab_size();
        Ok(g.with_value(logits, |t| {
            (0..k)
                .map(|r| {
                    let start = (r * len + len - 1) * v;
                    log_softmax(&t.data()[start..start + v])
                })
                .collect()
        }))
    }
}
