//! Scalar objectives with analytic gradients, and the central-difference
//! checker every differentiable family is validated against.

use crate::error::{Error, Result};

/// A scalar loss over a flat parameter vector with an analytic gradient.
pub trait Objective {
    fn dim(&self) -> usize;

    fn value_and_gradient(&self, params: &[f64]) -> Result<(f64, Vec<f64>)>;

    fn value(&self, params: &[f64]) -> Result<f64> {
        Ok(self.value_and_gradient(params)?.0)
    }
}

/// Closure-backed objective.
pub struct FnObjective<F> {
    pub dim: usize,
    pub f: F,
}

impl<F> Objective for FnObjective<F>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn value_and_gradient(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        (self.f)(params)
    }
}

/// `∂loss/∂params`; a non-finite loss is reported rather than differentiated.
pub fn gradient(objective: &dyn Objective, params: &[f64]) -> Result<Vec<f64>> {
    let (value, grad) = objective.value_and_gradient(params)?;
    if !value.is_finite() {
        return Err(Error::InvalidInput(format!("non-finite loss {value}")));
    }
    Ok(grad)
}

pub fn finite_difference_gradient(objective: &dyn Objective, params: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut probe = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        probe[i] = params[i] + h;
        let up = objective.value(&probe)?;
        probe[i] = params[i] - h;
        let down = objective.value(&probe)?;
        probe[i] = params[i];
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖, 1e-12)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    diff / norm(a).max(norm(b)).max(1e-12)
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub relative_error: f64,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.relative_error <= tol
    }
}

pub fn check_gradient(objective: &dyn Objective, params: &[f64], h: f64) -> Result<GradCheck> {
    let analytic = gradient(objective, params)?;
    let numeric = finite_difference_gradient(objective, params, h)?;
    let relative_error = relative_error(&analytic, &numeric);
    Ok(GradCheck {
        analytic,
        numeric,
        relative_error,
    })
}
