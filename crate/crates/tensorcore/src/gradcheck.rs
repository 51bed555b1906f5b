//! Central finite-difference verification of recorded gradients.
//!
//! The numeric side never touches the tape: it re-evaluates a caller-supplied
//! forward closure at perturbed parameter values and forms the quotient in
//! f64, so it stays an independent check on `backward`.

use crate::error::Result;
use crate::params::{ParamId, ParameterSet};

pub const DEFAULT_STEP: f64 = 1e-3;

#[derive(Debug)]
pub struct CheckFailure {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Default)]
pub struct CheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub failures: Vec<CheckFailure>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Relative error with an absolute floor: tiny gradients are compared on an
/// absolute scale so round-off near zero does not dominate.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Central difference (f(p + h) - f(p - h)) / 2h for one parameter value,
/// evaluated through a pure-forward loss closure. The parameter is restored
/// bit-exactly afterwards.
pub fn central_diff<F>(
    params: &mut ParameterSet,
    id: ParamId,
    index: usize,
    step: f64,
    forward: &mut F,
) -> Result<f64>
where
    F: FnMut(&mut ParameterSet) -> Result<f64>,
{
    let original = params.value(id).data()[index];
    params.value_mut(id).data_mut()[index] = (original as f64 + step) as f32;
    let plus = forward(params)?;
    params.value_mut(id).data_mut()[index] = (original as f64 - step) as f32;
    let minus = forward(params)?;
    params.value_mut(id).data_mut()[index] = original;
    Ok((plus - minus) / (2.0 * step))
}

/// Compares the analytic gradients currently stored in `params` (left there
/// by a prior `backward` call) against central differences of `forward` at
/// the given coordinates.
pub fn verify_grads<F>(
    params: &mut ParameterSet,
    coords: &[(ParamId, usize)],
    step: f64,
    tolerance: f64,
    mut forward: F,
) -> Result<CheckReport>
where
    F: FnMut(&mut ParameterSet) -> Result<f64>,
{
    let mut report = CheckReport::default();
    for &(id, index) in coords {
        let analytic = params.grad(id)[index] as f64;
        let numeric = central_diff(params, id, index, step, &mut forward)?;
        let err = rel_err(analytic, numeric);
        report.checked += 1;
        report.max_rel_err = report.max_rel_err.max(err);
        if err >= tolerance {
            report.failures.push(CheckFailure {
                param: params.name(id).to_string(),
                index,
                analytic,
                numeric,
                rel_err: err,
            });
        }
    }
    Ok(report)
}

/// Every coordinate of every trainable parameter, for exhaustive small-model
/// checks.
pub fn all_coords(params: &ParameterSet) -> Vec<(ParamId, usize)> {
    let mut coords = Vec::new();
    for (name, tensor, trainable) in params.iter() {
        if !trainable {
            continue;
        }
        let id = params.id(name).expect("iterating existing names");
        for i in 0..tensor.len() {
            coords.push((id, i));
        }
    }
    coords
}
