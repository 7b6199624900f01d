use serde::{Deserialize, Serialize};

use super::{backward, forward, loss, Batch, Gradients, ModelConfig, ParamStore};
use crate::error::Result;
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param_id: String,
    pub worst_index: usize,
    pub coords_checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares the analytic gradient against central differences on every
/// coordinate, using the fourth-order stencil
/// `(8 (f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`.
/// Relative error is `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn finite_diff_check(
    params: &ParamStore,
    cfg: &ModelConfig,
    batch: &Batch,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    finite_diff_check_with(params, cfg, batch, h, tol, backward)
}

/// As [`finite_diff_check`], with the analytic gradient supplied by `grad_fn`.
pub fn finite_diff_check_with<F>(
    params: &ParamStore,
    cfg: &ModelConfig,
    batch: &Batch,
    h: f64,
    tol: f64,
    grad_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &ModelConfig, &Batch) -> Result<Gradients>,
{
    let analytic = grad_fn(params, cfg, batch)?;
    let mut rng = SeededRng::new(0);
    let mut probe = params.clone();
    let mut eval = |p: &ParamStore| -> Result<f64> {
        let logits = forward(p, cfg, batch, false, &mut rng)?;
        loss(&logits, &batch.labels)
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param_id: String::new(),
        worst_index: 0,
        coords_checked: 0,
        tolerance: tol,
        passed: true,
    };
    for (pi, g) in analytic.tensors().iter().enumerate() {
        for ci in 0..g.len() {
            let orig = probe.tensor(pi)[ci];
            let mut at = |offset: f64| -> Result<f64> {
                probe.tensor_mut(pi)[ci] = orig + offset;
                eval(&probe)
            };
            let (p1, m1, p2, m2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
            probe.tensor_mut(pi)[ci] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
            let a = g.data()[ci];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > report.max_rel_err || report.worst_param_id.is_empty() {
                report.max_rel_err = rel;
                report.worst_param_id = params.entries()[pi].param_id.clone();
                report.worst_index = ci;
            }
            report.coords_checked += 1;
        }
    }
    report.passed = report.max_rel_err <= tol;
    Ok(report)
}
