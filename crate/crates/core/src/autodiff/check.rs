//! Central finite-difference gradient checking.

use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::params::{grad_params, ParamSet, ParamVars};

/// Gradients smaller than this are compared in absolute rather than
/// relative terms.
pub const DEFAULT_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Flat indices of coordinates whose relative error exceeds the tolerance.
    pub flagged: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub h: f64,
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.flagged.is_empty())
    }

    pub fn flagged_count(&self) -> usize {
        self.params.iter().map(|p| p.flagged.len()).sum()
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval(loss_fn: &impl Fn(&Graph, &ParamVars) -> Result<Var>, params: &ParamSet) -> Result<f64> {
    // Leaves, not constants: the loss may differentiate internally.
    let g = Graph::new();
    let vars = params.to_vars(&g)?;
    loss_fn(&g, &vars)?.value().item()
}

/// Compares the reverse-mode gradient of `loss_fn` at `params` against
/// central differences `(f(x+h) - f(x-h)) / 2h`, coordinate by coordinate.
///
/// Points where the loss is not differentiable (e.g. a relu input exactly at
/// 0) are expected to be flagged.
pub fn finite_diff_check<F>(loss_fn: F, params: &ParamSet, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Graph, &ParamVars) -> Result<Var>,
{
    finite_diff_check_with_floor(loss_fn, params, h, tol, DEFAULT_FLOOR)
}

pub fn finite_diff_check_with_floor<F>(
    loss_fn: F,
    params: &ParamSet,
    h: f64,
    tol: f64,
    floor: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&Graph, &ParamVars) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be > 0, got {h}")));
    }
    let first = eval(&loss_fn, params)?;
    let second = eval(&loss_fn, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let g = Graph::new();
    let vars = params.to_vars(&g)?;
    let loss = loss_fn(&g, &vars)?;
    let analytic = grad_params(&loss, &vars, false)?.values();

    let mut out = Vec::with_capacity(params.len());
    for (name, tensor) in params.iter() {
        let a = analytic.get(name).expect("gradient for every parameter");
        let mut check = ParamCheck {
            name: name.to_string(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            flagged: Vec::new(),
        };
        for i in 0..tensor.numel() {
            let shifted = |delta: f64| -> Result<f64> {
                let mut data = tensor.data().to_vec();
                data[i] += delta;
                let p = params.clone().with(name, Tensor::new(tensor.shape().to_vec(), data)?)?;
                eval(&loss_fn, &p)
            };
            let numeric = (shifted(h)? - shifted(-h)?) / (2.0 * h);
            let abs = (a.data()[i] - numeric).abs();
            let rel = relative_error(a.data()[i], numeric, floor);
            check.max_abs_err = check.max_abs_err.max(abs);
            check.max_rel_err = check.max_rel_err.max(rel);
            if rel > tol {
                check.flagged.push(i);
            }
        }
        out.push(check);
    }
    Ok(GradCheckReport { h, tol, params: out })
}
