//! Central finite-difference verification of autodiff gradients.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub h: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Relative error is `|a - n| / max(|a|, |n|, floor)`; the floor keeps
    /// near-zero gradients from dominating through round-off.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { h: 1e-5, tolerance: 1e-6, floor: 1e-3 }
    }
}

impl GradCheckConfig {
    pub fn with_tolerance(tolerance: f64) -> Self {
        Self { tolerance, ..Self::default() }
    }
}

/// Worst coordinate for one input.
#[derive(Clone, Debug)]
pub struct InputReport {
    pub input: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }

    pub fn worst(&self) -> Option<&InputReport> {
        self.inputs.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&g, &vars)?;
    let shape = g.shape(out);
    if shape.iter().product::<usize>() != 1 {
        return Err(Error::Graph(format!("grad_check function must return a scalar, got {shape:?}")));
    }
    Ok(g.item(out))
}

/// Compares autodiff gradients of scalar `f` against central differences
/// `(f(x+h) - f(x-h)) / 2h` for every coordinate of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], config: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    if !(config.h > 0.0) {
        return Err(Error::Config(format!("grad_check step must be positive, got {}", config.h)));
    }
    let first = eval(&f, inputs)?;
    let second = eval(&f, inputs)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic(format!("{first:e} vs {second:e}")));
    }

    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&g, &vars)?;
    let grads = g.backward(out)?;

    let mut reports = Vec::with_capacity(inputs.len());
    let mut probe = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let zeros;
        let analytic = match grads.get(*var) {
            Some(a) => a,
            None => {
                zeros = vec![0.0; inputs[which].numel()];
                &zeros
            }
        };
        let mut report =
            InputReport { input: which, max_rel_error: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0 };
        for j in 0..inputs[which].numel() {
            let orig = inputs[which].data()[j];
            probe[which].data_mut()[j] = orig + config.h;
            let plus = eval(&f, &probe)?;
            probe[which].data_mut()[j] = orig - config.h;
            let minus = eval(&f, &probe)?;
            probe[which].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * config.h);
            let a = analytic[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(config.floor);
            if rel > report.max_rel_error || !rel.is_finite() {
                report = InputReport { input: which, max_rel_error: rel, worst_index: j, analytic: a, numeric };
            }
        }
        reports.push(report);
    }
    Ok(GradCheckReport { inputs: reports, tolerance: config.tolerance })
}
