//! Central-difference verification of reverse-mode gradients.

use crate::error::{invalid, Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Worst coordinate found by a check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |analytic|)` over checked coordinates.
    pub max_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_error < tol
    }
}

/// Checks every coordinate of `x`. `f` builds a scalar from the leaf it is
/// handed.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.len()).collect();
    grad_check_at(f, x, h, &all)
}

/// Checks only the listed flat coordinates of `x`.
pub fn grad_check_at<F>(f: F, x: &Tensor, h: f64, coords: &[usize]) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(h > 0.0 && h <= 1e-3) {
        return Err(invalid("grad_check", format!("step {h} outside (0, 1e-3]")));
    }
    let mut g = Graph::new();
    let leaf = g.param(x.clone());
    let out = f(&mut g, leaf)?;
    let grads = g.backward(out)?;
    let analytic = grads.get_or_zeros(leaf, x.shape());

    let eval = |xv: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let leaf = g.constant(xv);
        let out = f(&mut g, leaf)?;
        let v = g.value(out);
        if !v.is_scalar() {
            return Err(Error::NonScalarRoot(v.shape().to_vec()));
        }
        Ok(v.item())
    };

    let mut report = GradCheckReport {
        max_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for &i in coords {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        if !numeric.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(1.0);
        if err > report.max_error || report.checked == 0 {
            report.max_error = err;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
        report.checked += 1;
    }
    Ok(report)
}
