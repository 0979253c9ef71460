//! Invariant prompt distribution: the L1 drift penalty on per-prompt row
//! statistics and a checker for the LayerNorm shift identity
//! `LN(P + ΔP) = LN(P) + (ΔP / σ_P) ⊙ α`, valid whenever `P + ΔP` keeps the
//! row means and standard deviations of `P`.

use crate::error::{contract, Error, Result};
use crate::numeric::{layer_norm, row_stats, Matrix, RowStats};
use crate::vit::{BackboneModel, PromptMatrix};

/// Row statistics of each layer's prompts, frozen at a task boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptDistributionTarget {
    pub per_layer: Vec<RowStats>,
}

impl PromptDistributionTarget {
    /// Snapshot of the model's current prompt statistics.
    pub fn capture(model: &BackboneModel) -> Self {
        Self {
            per_layer: model
                .prompts
                .iter()
                .map(|p| prompt_row_stats(p, model.ln_eps))
                .collect(),
        }
    }
}

/// Per-row mean and `sqrt(var + eps)`, the same convention LN1 uses.
pub fn prompt_row_stats(p: &PromptMatrix, eps: f64) -> RowStats {
    row_stats(&p.values, eps)
}

/// `Σ_rows |μ − μ*| + |σ − σ*|` and its gradient w.r.t. the prompt entries.
///
/// The subgradient of `|·|` at zero is taken as zero.
pub fn ln_drift_loss(prompts: &Matrix, target: &RowStats, eps: f64) -> Result<(f64, Matrix)> {
    if target.len() != prompts.rows() {
        return Err(contract(
            "ln_drift_loss",
            format!("{} prompts, target for {}", prompts.rows(), target.len()),
        ));
    }
    let current = row_stats(prompts, eps);
    let d = prompts.cols() as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(prompts.rows(), prompts.cols());
    for i in 0..prompts.rows() {
        let dmu = current.mean[i] - target.mean[i];
        let dsd = current.std[i] - target.std[i];
        loss += dmu.abs() + dsd.abs();
        let (smu, ssd) = (sign(dmu), sign(dsd));
        if smu == 0.0 && ssd == 0.0 {
            continue;
        }
        let (mu, sd) = (current.mean[i], current.std[i]);
        let src = prompts.row(i);
        for (k, g) in grad.row_mut(i).iter_mut().enumerate() {
            // dμ/dp = 1/D, dσ/dp = (p − μ) / (D σ)
            *g = smu / d + ssd * (src[k] - mu) / (d * sd);
        }
    }
    Ok((loss, grad))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `‖LN(P + ΔP) − LN(P) − (ΔP / σ_P) ⊙ α‖_F`.
///
/// Fails with [`Error::StatDrift`] when `P + ΔP` does not keep the row
/// statistics of `P` to within `1e-12` (relative to `max(1, |stat|)`).
pub fn ln_shift_check(p: &Matrix, dp: &Matrix, alpha: &[f64], eps: f64) -> Result<f64> {
    if p.shape() != dp.shape() {
        return Err(contract(
            "ln_shift_check",
            format!("P {:?}, ΔP {:?}", p.shape(), dp.shape()),
        ));
    }
    let moved = p.add(dp)?;
    let before = row_stats(p, eps);
    let after = row_stats(&moved, eps);
    let mut drift: f64 = 0.0;
    let mut std_drift: f64 = 0.0;
    for i in 0..p.rows() {
        drift = drift.max((after.mean[i] - before.mean[i]).abs() / before.mean[i].abs().max(1.0));
        std_drift = std_drift.max((after.std[i] - before.std[i]).abs() / before.std[i].max(1.0));
    }
    if drift > 1e-12 || std_drift > 1e-12 {
        return Err(Error::StatDrift { drift, std_drift });
    }
    let zero = vec![0.0; p.cols()];
    let (ln_p, _) = layer_norm(p, alpha, &zero, eps)?;
    let (ln_moved, _) = layer_norm(&moved, alpha, &zero, eps)?;
    let mut shifted = Matrix::zeros(p.rows(), p.cols());
    for i in 0..p.rows() {
        let sd = before.std[i];
        for (k, v) in shifted.row_mut(i).iter_mut().enumerate() {
            *v = dp[(i, k)] / sd * alpha[k];
        }
    }
    Ok(ln_moved.sub(&ln_p)?.sub(&shifted)?.frobenius_norm())
}
