use crate::error::{Error, Result};
use crate::model::{Binder, ModelKind, NmtModel};
use crate::tensor::{Graph, Var};
use crate::text::{Batch, PAD_ID};

/// The batches contributing to one optimizer step. Any subset may be present.
#[derive(Clone, Copy, Debug, Default)]
pub struct TaskBatches<'a> {
    pub translation: Option<&'a Batch>,
    pub clm_source: Option<&'a Batch>,
    pub clm_target: Option<&'a Batch>,
}

impl<'a> TaskBatches<'a> {
    pub fn translation(batch: &'a Batch) -> Self {
        Self { translation: Some(batch), ..Self::default() }
    }

    pub fn joint(translation: &'a Batch, clm_source: &'a Batch, clm_target: &'a Batch) -> Self {
        Self { translation: Some(translation), clm_source: Some(clm_source), clm_target: Some(clm_target) }
    }

    fn has_clm(&self) -> bool {
        self.clm_source.is_some() || self.clm_target.is_some()
    }
}

/// Per-task mean token losses. Absent tasks are `None` and count as zero in
/// the totals.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_t: Option<f64>,
    pub l_clm_src: Option<f64>,
    pub l_clm_tgt: Option<f64>,
    /// `l_clm_src + l_clm_tgt`.
    pub l_clm: f64,
    /// `l_t + clm_weight * l_clm`, read back from the graph root.
    pub l_mtl: f64,
}

/// Optimization root and the per-task values of one forward pass.
pub struct Losses {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

fn task_loss(g: &Graph, logits: Var, batch: &Batch) -> Result<Var> {
    g.cross_entropy(logits, &batch.labels.ids, PAD_ID)
}

/// Forward pass of every present task, summed into one scalar.
pub fn compute_losses(model: &NmtModel, b: &Binder<'_>, batches: &TaskBatches<'_>, clm_weight: f64) -> Result<Losses> {
    if model.kind() == ModelKind::Baseline && batches.has_clm() {
        return Err(Error::Config("baseline model given monolingual batches".into()));
    }
    let g = b.graph();
    let l_t = batches.translation.map(|batch| task_loss(g, model.translation_logits(b, batch)?, batch)).transpose()?;
    let clm = |batch: Option<&Batch>| {
        batch.map(|batch| task_loss(g, model.clm_logits(b, batch)?, batch)).transpose()
    };
    let l_src = clm(batches.clm_source)?;
    let l_tgt = clm(batches.clm_target)?;

    let l_clm = match (l_src, l_tgt) {
        (Some(s), Some(t)) => Some(g.add(s, t)?),
        (s, t) => s.or(t),
    };
    let weighted = l_clm.map(|l| if clm_weight == 1.0 { l } else { g.scale(l, clm_weight) });
    let total = match (l_t, weighted) {
        (Some(t), Some(c)) => g.add(t, c)?,
        (Some(v), None) | (None, Some(v)) => v,
        (None, None) => return Err(Error::Data("no batches to compute a loss on".into())),
    };
    let breakdown = LossBreakdown {
        l_t: l_t.map(|v| g.item(v)),
        l_clm_src: l_src.map(|v| g.item(v)),
        l_clm_tgt: l_tgt.map(|v| g.item(v)),
        l_clm: l_clm.map_or(0.0, |v| g.item(v)),
        l_mtl: g.item(total),
    };
    Ok(Losses { total, breakdown })
}

/// Loss values without building gradients.
pub fn evaluate_losses(model: &NmtModel, batches: &TaskBatches<'_>, clm_weight: f64) -> Result<LossBreakdown> {
    let g = Graph::new();
    let b = Binder::inference(&g, model.params());
    Ok(compute_losses(model, &b, batches, clm_weight)?.breakdown)
}

/// Token-weighted mean translation cross entropy over `batches`.
pub fn translation_loss(model: &NmtModel, batches: &[Batch]) -> Result<f64> {
    let (mut total, mut count) = (0.0, 0usize);
    for batch in batches {
        let g = Graph::new();
        let b = Binder::inference(&g, model.params());
        let l = g.item(task_loss(&g, model.translation_logits(&b, batch)?, batch)?);
        total += l * batch.label_count() as f64;
        count += batch.label_count();
    }
    if count == 0 {
        return Err(Error::EmptyLoss);
    }
    Ok(total / count as f64)
}

/// Fraction of non-PAD label positions whose argmax prediction (lowest id on
/// ties) equals the gold label under teacher forcing.
pub fn teacher_forced_accuracy(model: &NmtModel, batches: &[Batch]) -> Result<f64> {
    let v = model.config().vocab_size;
    let (mut hits, mut count) = (0usize, 0usize);
    for batch in batches {
        let g = Graph::new();
        let b = Binder::inference(&g, model.params());
        let logits = model.translation_logits(&b, batch)?;
        g.with_value(logits, |t| {
            for (pos, &label) in batch.labels.ids.iter().enumerate() {
                if label == PAD_ID {
                    continue;
                }
                let row = &t.data()[pos * v..(pos + 1) * v];
                let best = row.iter().enumerate().fold(0, |best, (i, &x)| if x > row[best] { i } else { best });
                hits += usize::from(best == label as usize);
                count += 1;
            }
        });
    }
    if count == 0 {
        return Err(Error::EmptyLoss);
    }
    Ok(hits as f64 / count as f64)
}
