//! Multi-positive contrastive loss and the bidirectional objective.

use crate::error::{Error, Result};

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn check(pos: &[f64], tau: f64) -> Result<()> {
    if pos.is_empty() {
        return Err(Error::InvalidArgument("multi-positive loss needs at least one positive".into()));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// `-log( Σ_pos e^{ℓ/τ} / Σ_all e^{ℓ/τ} )`, evaluated with log-sum-exp.
pub fn mp_loss(pos: &[f64], neg: &[f64], tau: f64) -> Result<f64> {
    check(pos, tau)?;
    let lse_pos = log_sum_exp(pos.iter().map(|l| l / tau));
    let lse_all = log_sum_exp(pos.iter().chain(neg).map(|l| l / tau));
    Ok((lse_all - lse_pos).max(0.0))
}

/// Loss together with its gradient with respect to each positive and each
/// negative logit.
pub fn mp_loss_with_grad(pos: &[f64], neg: &[f64], tau: f64) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let loss = mp_loss(pos, neg, tau)?;
    let lse_pos = log_sum_exp(pos.iter().map(|l| l / tau));
    let lse_all = log_sum_exp(pos.iter().chain(neg).map(|l| l / tau));
    let gpos = pos.iter().map(|l| ((l / tau - lse_all).exp() - (l / tau - lse_pos).exp()) / tau).collect();
    let gneg = neg.iter().map(|l| (l / tau - lse_all).exp() / tau).collect();
    Ok((loss, gpos, gneg))
}

/// Single-positive InfoNCE: `-ℓ⁺/τ + log Σ_all e^{ℓ/τ}`.
pub fn info_nce(pos: f64, neg: &[f64], tau: f64) -> Result<f64> {
    check(&[pos], tau)?;
    Ok(-pos / tau + log_sum_exp(std::iter::once(pos).chain(neg.iter().copied()).map(|l| l / tau)))
}

/// Weights of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveWeights {
    /// Weight of the WM→TCM term; TCM→WM gets `1 - lambda_dir`.
    pub lambda_dir: f64,
    pub lambda_reg: f64,
}

/// `λ_dir·L_wm2tcm + (1-λ_dir)·L_tcm2wm + λ_reg·Σθ²`.
pub fn total_loss(wm2tcm: f64, tcm2wm: f64, sum_squares: f64, w: ObjectiveWeights) -> f64 {
    w.lambda_dir * wm2tcm + (1.0 - w.lambda_dir) * tcm2wm + w.lambda_reg * sum_squares
}
