use serde::Serialize;

use super::array::Array;
use super::graph::{Graph, NodeId};
use crate::error::{Error, Result};

/// Denominator floor for relative errors, so coordinates whose true gradient is
/// (numerically) zero are judged by absolute error instead.
pub const REL_FLOOR: f64 = 1e-6;

/// Analytic vs. central-difference gradient errors for one parameter.
#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub coords: usize,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub step: f64,
    pub params: Vec<ParamCheck>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn max_abs_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_abs_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error() <= tolerance
    }
}

/// Relative error used throughout the gradient checks.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences `(f(θ+h) − f(θ−h)) / 2h`, one coordinate at a time.
///
/// `forward` receives a fresh graph and one parameter node per entry of
/// `params` and must return a scalar node. It must not mutate outside state:
/// the function is evaluated twice at the unperturbed point and any difference
/// is reported as an error.
pub fn finite_diff_check<F>(forward: F, params: &[(String, Array)], step: f64) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if !(step > 0.0) {
        return Err(Error::Check(format!("step must be positive, got {step}")));
    }
    let evaluate = |values: &[Array]| -> Result<f64> {
        let mut graph = Graph::new();
        let ids = values
            .iter()
            .map(|v| graph.constant(v.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = forward(&mut graph, &ids)?;
        graph.scalar(out)
    };

    let mut graph = Graph::new();
    let ids = params
        .iter()
        .map(|(_, v)| graph.parameter(v.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = forward(&mut graph, &ids)?;
    let base = graph.scalar(out)?;
    let grads = graph.backward(out)?;

    let mut values: Vec<Array> = params.iter().map(|(_, v)| v.clone()).collect();
    let again = evaluate(&values)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Check(format!(
            "forward is not deterministic: {base:e} then {again:e}"
        )));
    }

    let mut report = GradReport {
        step,
        params: Vec::with_capacity(params.len()),
    };
    for (p, (name, _)) in params.iter().enumerate() {
        let analytic = grads.wrt(&graph, ids[p]);
        let mut check = ParamCheck {
            name: name.clone(),
            coords: analytic.len(),
            max_abs_error: 0.0,
            max_rel_error: 0.0,
        };
        for k in 0..analytic.len() {
            let orig = values[p].data()[k];
            values[p].data_mut()[k] = orig + step;
            let plus = evaluate(&values)?;
            values[p].data_mut()[k] = orig - step;
            let minus = evaluate(&values)?;
            values[p].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[k];
            check.max_abs_error = check.max_abs_error.max((a - numeric).abs());
            check.max_rel_error = check.max_rel_error.max(relative_error(a, numeric));
        }
        report.params.push(check);
    }
    Ok(report)
}
