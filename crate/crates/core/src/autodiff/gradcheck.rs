//! Central finite-difference verification of analytic gradients.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of comparing analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic − numeric| / max(1, |analytic|)
    pub max_rel_error: f64,
    /// (input index, flat coordinate) where the maximum occurred
    pub worst: (usize, usize),
    pub coordinates: usize,
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out).item()?;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("gradient check: f evaluated to {v}")));
    }
    Ok(v)
}

/// Check the gradient of `f` with respect to every coordinate of every input.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("gradient check: step must be positive, got {step}")));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out).item()?;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("gradient check: f(x) = {v}")));
    }
    let grads = g.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (ti, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(&g, *var);
        for ci in 0..inputs[ti].len() {
            let orig = inputs[ti].data()[ci];
            probe[ti].data_mut()[ci] = orig + step;
            let plus = eval_scalar(&f, &probe)?;
            probe[ti].data_mut()[ci] = orig - step;
            let minus = eval_scalar(&f, &probe)?;
            probe[ti].data_mut()[ci] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[ci];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (ti, ci);
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}

/// Single-input form of [`check_gradients`]; returns the maximum relative error.
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    check_gradients(|g, v| f(g, v[0]), std::slice::from_ref(x), step).map(|r| r.max_rel_error)
}
