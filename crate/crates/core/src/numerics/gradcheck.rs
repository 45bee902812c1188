//! Central finite-difference verification of reverse-mode gradients.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Gradients smaller than this are compared absolutely rather than
/// relatively; below it the finite-difference roundoff dominates.
pub const RELATIVE_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Relative error per checked element, one vector per input.
    pub errors: Vec<Vec<f64>>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares autodiff gradients of `f` against central differences
/// `(f(x + eps) - f(x - eps)) / 2eps` for every element of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    grad_check_sampled(f, inputs, eps, tol, usize::MAX)
}

/// Like [`grad_check`] but probes at most `max_per_input` evenly spaced
/// elements of each input.
pub fn grad_check_sampled<F>(
    f: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    tol: f64,
    max_per_input: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Invalid(format!("finite-difference eps must be positive, got {eps}")));
    }
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar_of(&g, out)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar_of(&g, out)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| g.grad(v)).collect();

    let mut probe = inputs.to_vec();
    let mut errors = Vec::with_capacity(inputs.len());
    let mut max_rel_error: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let stride = if n <= max_per_input { 1 } else { n.div_ceil(max_per_input) };
        let mut errs = Vec::new();
        for j in (0..n).step_by(stride) {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - eps;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let e = relative_error(analytic[i].data()[j], numeric);
            max_rel_error = max_rel_error.max(e);
            errs.push(e);
        }
        errors.push(errs);
    }
    Ok(GradCheckReport {
        errors,
        max_rel_error,
        tol,
        passed: max_rel_error < tol,
    })
}

fn scalar_of(g: &Graph<f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(Error::Graph(format!(
            "gradient check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}
