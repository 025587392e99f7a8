//! Central finite-difference verification of analytic gradients.

use crate::error::{AlftError, Result};

/// Outcome of [`grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compare the analytic gradient returned by `f` at `inputs` against central
/// differences `(f(x + ε e_i) − f(x − ε e_i)) / 2ε` for every coordinate.
///
/// `f` returns the scalar value and its analytic gradient; only the value is
/// used at the perturbed points.
pub fn grad_check<F>(f: F, inputs: &[f64], epsilon: f64) -> Result<GradCheck>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let all: Vec<usize> = (0..inputs.len()).collect();
    grad_check_at(f, inputs, epsilon, &all)
}

/// [`grad_check`] restricted to the listed coordinates.
pub fn grad_check_at<F>(mut f: F, inputs: &[f64], epsilon: f64, coords: &[usize]) -> Result<GradCheck>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    if inputs.iter().any(|v| !v.is_finite()) {
        return Err(AlftError::Contract("grad_check inputs must be finite".into()));
    }
    let (v0, analytic) = f(inputs);
    if !v0.is_finite() {
        return Err(AlftError::NonFinite("grad_check function value".into()));
    }
    assert_eq!(analytic.len(), inputs.len(), "analytic gradient length mismatch");
    let mut x = inputs.to_vec();
    let mut out = GradCheck {
        max_relative_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for &i in coords {
        let orig = x[i];
        x[i] = orig + epsilon;
        let fp = f(&x).0;
        x[i] = orig - epsilon;
        let fm = f(&x).0;
        x[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(AlftError::NonFinite(format!("grad_check perturbation of coordinate {i}")));
        }
        let numeric = (fp - fm) / (2.0 * epsilon);
        let err = relative_error(analytic[i], numeric);
        out.checked += 1;
        if out.checked == 1 || err > out.max_relative_error {
            out.max_relative_error = err;
            out.worst_index = i;
            out.analytic = analytic[i];
            out.numeric = numeric;
        }
    }
    Ok(out)
}
