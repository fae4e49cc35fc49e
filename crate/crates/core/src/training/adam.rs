use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    /// Constant learning rate used for finetuning a pretrained model.
    pub const PAPER_LR: f64 = 1e-5;
    /// Learning rate for training from scratch at desk scale.
    pub const DESK_LR: f64 = 3e-4;

    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: default_beta1(), beta2: default_beta2(), eps: default_eps() }
    }

    pub fn desk() -> Self {
        Self::with_lr(Self::DESK_LR)
    }

    pub fn paper() -> Self {
        Self::with_lr(Self::PAPER_LR)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {beta}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// First and second moment estimates of one parameter tensor. `step` counts
/// the updates this tensor has received, so tensors that skip a step (no
/// gradient) keep a correct bias correction.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Optimizer state indexed by [`ParamId`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub moments: Vec<Moments>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let moments = store
            .ids()
            .map(|id| {
                let n = store.get(id).numel();
                Moments { step: 0, m: vec![0.0; n], v: vec![0.0; n] }
            })
            .collect();
        Self { moments }
    }
}

/// Fails on the first NaN or infinite gradient entry among `trainable`.
pub fn check_finite(store: &ParamStore, trainable: &[ParamId], grads: &[Option<Vec<f64>>]) -> Result<()> {
    for &id in trainable {
        let Some(g) = grads.get(id.index()).and_then(Option::as_ref) else { continue };
        if let Some((index, &value)) = g.iter().enumerate().find(|(_, x)| !x.is_finite()) {
            return Err(Error::NonFiniteGradient { name: store.name(id).to_string(), index, value });
        }
    }
    Ok(())
}

/// Scales gradients so their joint L2 norm is at most `max_norm`; returns the
/// norm before scaling.
pub fn clip_grad_norm(trainable: &[ParamId], grads: &mut [Option<Vec<f64>>], max_norm: f64) -> f64 {
    let norm = trainable
        .iter()
        .filter_map(|id| grads[id.index()].as_ref())
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for id in trainable {
            if let Some(g) = grads[id.index()].as_mut() {
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    norm
}

/// One bias-corrected Adam update of every trainable parameter that has a
/// gradient. Nothing is modified when any gradient is non-finite.
pub fn adam_step(
    store: &mut ParamStore,
    trainable: &[ParamId],
    grads: &[Option<Vec<f64>>],
    state: &mut AdamState,
    cfg: &OptimizerConfig,
) -> Result<()> {
    if grads.len() != store.len() || state.moments.len() != store.len() {
        return Err(Error::Graph(format!(
            "adam_step: {} gradients and {} moment slots for {} parameters",
            grads.len(),
            state.moments.len(),
            store.len()
        )));
    }
    check_finite(store, trainable, grads)?;
    for &id in trainable {
        let Some(g) = grads[id.index()].as_ref() else { continue };
        let mom = &mut state.moments[id.index()];
        let param = store.get_mut(id).data_mut();
        if g.len() != param.len() || mom.m.len() != param.len() {
            return Err(Error::shape("adam_step", format!("parameter {} size mismatch", id.index())));
        }
        mom.step += 1;
        let t = i32::try_from(mom.step).unwrap_or(i32::MAX);
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (((p, &gi), m), v) in param.iter_mut().zip(g).zip(mom.m.iter_mut()).zip(mom.v.iter_mut()) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gi;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
