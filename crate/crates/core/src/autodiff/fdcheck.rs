//! Central finite-difference verification of analytic gradients.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{GradientSet, ParamStore};

/// Exhaustive perturbation is refused above this many scalar parameters.
pub const FD_PARAM_LIMIT: usize = 10_000;

/// Denominator floor of the relative error, so coordinates whose true
/// gradient is zero are judged on absolute error.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorReport {
    pub name: String,
    pub max_rel_err: f64,
    /// `(row, col, analytic, numeric)` for every coordinate above tolerance.
    pub offending: Vec<(usize, usize, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FdReport {
    pub step: f64,
    pub tolerance: f64,
    pub tensors: Vec<TensorReport>,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.offending.is_empty())
    }

    pub fn flagged(&self) -> Vec<&str> {
        self.tensors.iter().filter(|t| !t.offending.is_empty()).map(|t| t.name.as_str()).collect()
    }

    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `analytic` against `(L(θ+h) - L(θ-h)) / 2h` for every scalar
/// parameter, perturbing one coordinate at a time in storage order.
pub fn fd_check(
    params: &ParamStore,
    analytic: &GradientSet,
    loss: impl Fn(&ParamStore) -> Result<f64>,
    step: f64,
    tolerance: f64,
) -> Result<FdReport> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {step}")));
    }
    let count = params.count();
    if count > FD_PARAM_LIMIT {
        return Err(Error::TooLarge { count, limit: FD_PARAM_LIMIT });
    }
    if analytic.len() != params.len() {
        return Err(Error::Shape("gradient set does not match parameters".into()));
    }

    let mut work = params.clone();
    let mut tensors = Vec::with_capacity(params.len());
    for idx in 0..params.len() {
        let g = analytic.get(idx);
        let shape = params.get(idx).shape();
        if g.shape() != shape {
            return Err(Error::Shape(format!("gradient of {} has the wrong shape", params.name(idx))));
        }
        let mut report = TensorReport { name: params.name(idx).to_string(), max_rel_err: 0.0, offending: Vec::new() };
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let orig = params.get(idx)[(r, c)];
                work.get_mut(idx)[(r, c)] = orig + step;
                let plus = loss(&work)?;
                work.get_mut(idx)[(r, c)] = orig - step;
                let minus = loss(&work)?;
                work.get_mut(idx)[(r, c)] = orig;
                let numeric = (plus - minus) / (2.0 * step);
                let err = relative_error(g[(r, c)], numeric);
                report.max_rel_err = report.max_rel_err.max(err);
                if !(err < tolerance) {
                    report.offending.push((r, c, g[(r, c)], numeric));
                }
            }
        }
        tensors.push(report);
    }
    Ok(FdReport { step, tolerance, tensors })
}
