//! Adam with bias correction and global-norm gradient clipping.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GradientSet, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<DMatrix<f64>>,
    pub v: Vec<DMatrix<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<DMatrix<f64>> =
            params.tensors().iter().map(|t| DMatrix::zeros(t.value.nrows(), t.value.ncols())).collect();
        AdamState { config, step: 0, m: zeros.clone(), v: zeros }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Factor applied to the gradient (1 when clipping did not trigger).
    pub clip_scale: f64,
}

/// One optimizer step. Clipping rescales the whole gradient so its global
/// norm is at most `clip_norm`, before the moments are updated. Parameters
/// are left untouched if any updated entry would be non-finite.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &GradientSet,
    state: &mut AdamState,
    clip_norm: Option<f64>,
) -> Result<StepInfo> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Shape("optimizer state does not match parameters".into()));
    }
    grads.check_finite()?;
    let grad_norm = grads.global_norm();
    let clip_scale = match clip_norm {
        Some(c) if grad_norm > c => c / grad_norm,
        _ => 1.0,
    };

    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let t = state.step + 1;
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    let mut next = Vec::with_capacity(params.len());
    for idx in 0..params.len() {
        let g = grads.get(idx) * clip_scale;
        if g.shape() != params.get(idx).shape() {
            return Err(Error::Shape(format!("gradient of {} has the wrong shape", params.name(idx))));
        }
        let m = &state.m[idx] * beta1 + &g * (1.0 - beta1);
        let v = &state.v[idx] * beta2 + g.map(|x| x * x) * (1.0 - beta2);
        let update = m.zip_map(&v, |mi, vi| lr * (mi / bc1) / ((vi / bc2).sqrt() + eps));
        let p = params.get(idx) - update;
        if p.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { what: format!("update of {}", params.name(idx)) });
        }
        next.push((m, v, p));
    }
    for (idx, (m, v, p)) in next.into_iter().enumerate() {
        state.m[idx] = m;
        state.v[idx] = v;
        *params.get_mut(idx) = p;
    }
    state.step = t;
    Ok(StepInfo { grad_norm, clip_scale })
}
