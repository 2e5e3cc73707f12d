//! Central-difference verification of hand-written gradients.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// max |a − n| / (|a| + |n| + 1e-12)
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Parameter index attaining `max_rel_error`.
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares `analytic` with central differences of `f` at `params` over
/// every coordinate.
pub fn grad_check<F>(f: F, params: &[f64], analytic: &[f64], h: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    let all: Vec<usize> = (0..params.len()).collect();
    grad_check_at(f, params, analytic, h, &all)
}

/// As [`grad_check`] but only over the listed coordinates.
pub fn grad_check_at<F>(
    mut f: F,
    params: &[f64],
    analytic: &[f64],
    h: f64,
    indices: &[usize],
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::Argument(format!("step h must be positive, got {h}")));
    }
    if analytic.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} analytic gradients for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let mut x = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: 0,
        checked: 0,
    };
    for &i in indices {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x);
        x[i] = orig - h;
        let fm = f(&x);
        x[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite objective while perturbing parameter {i}"
            )));
        }
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[i];
        let abs = (a - numeric).abs();
        let rel = abs / (a.abs() + numeric.abs() + 1e-12);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
        report.max_abs_error = report.max_abs_error.max(abs);
        report.checked += 1;
    }
    Ok(report)
}
