//! Central finite-difference verification of analytic gradients.

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::params::{Gradients, ParamId, ParamStore};

/// Denominator floor for the relative error. Entries whose gradient magnitude
/// is below it are compared on absolute error scaled by this value.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

fn eval<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<'_>) -> Result<NodeId>,
{
    let mut g = Graph::with_params(store);
    let loss = f(&mut g)?;
    Ok(g.value(loss).item())
}

/// Analytic gradients of the scalar built by `f` with respect to every stored parameter.
pub fn analytic_gradients<F>(store: &ParamStore, f: &F) -> Result<Gradients>
where
    F: Fn(&mut Graph<'_>) -> Result<NodeId>,
{
    let mut g = Graph::with_params(store);
    let loss = f(&mut g)?;
    g.backward(loss)?;
    let mut grads = Gradients::zeros_like(store);
    g.accumulate_param_grads(&mut grads, 1.0)?;
    Ok(grads)
}

/// Compares analytic gradients against `(f(w+eps) - f(w-eps)) / 2eps` for
/// every entry of `params`. The store is restored before returning.
pub fn grad_check<F>(store: &mut ParamStore, params: &[ParamId], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<NodeId>,
{
    let grads = analytic_gradients(store, &f)?;
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
        worst: None,
    };
    for &pid in params {
        for k in 0..store.get(pid).len() {
            let original = store.get(pid).data()[k];
            store.get_mut(pid).data_mut()[k] = original + eps;
            let plus = eval(store, &f);
            store.get_mut(pid).data_mut()[k] = original - eps;
            let minus = eval(store, &f);
            store.get_mut(pid).data_mut()[k] = original;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let analytic = grads.get(pid).data()[k];
            let rel = relative_error(analytic, numeric);
            report.max_abs_error = report.max_abs_error.max((analytic - numeric).abs());
            if rel > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(rel);
                report.worst = Some((store.name(pid).to_string(), k));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
