//! Central finite-difference verification of analytic gradients.
//!
//! A scalar function of a flat parameter vector is re-evaluated at
//! `theta +/- h` per coordinate and the two-sided slope is compared against
//! the tape's gradient. This path only exercises forward evaluations, so it
//! stays independent of every backward rule it checks. Run it in `f64`:
//! with h = 1e-5 the truncation error is ~1e-10, far below the tolerances
//! asserted by callers.

use alloc::vec::Vec;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Central finite differences of `f` at `point`, one evaluation pair per
/// coordinate.
pub fn numerical_gradient(
    point: &[f64],
    mut f: impl FnMut(&[f64]) -> f64,
    step: f64,
) -> Vec<f64> {
    let mut theta = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = theta[i];
        theta[i] = orig + step;
        let plus = f(&theta);
        theta[i] = orig - step;
        let minus = f(&theta);
        theta[i] = orig;
        grad.push((plus - minus) / (2.0 * step));
    }
    grad
}

/// Worst relative disagreement between two gradient vectors. Entries where
/// both sides are below `floor` in magnitude count as zero error.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let denom = a.abs().max(n.abs());
        if denom < floor {
            continue;
        }
        let rel = (a - n).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

/// Convenience wrapper: checks the analytic gradient of `f` at `point`
/// against central differences and returns the worst relative error.
pub fn check_gradient(
    point: &[f64],
    analytic: &[f64],
    f: impl FnMut(&[f64]) -> f64,
) -> f64 {
    let numeric = numerical_gradient(point, f, DEFAULT_STEP);
    max_relative_error(analytic, &numeric, 1e-7)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn quadratic_gradient_is_recovered() {
        // f(x) = sum x_i^2, grad = 2x.
        let point = vec![0.5, -1.5, 2.0];
        let f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let analytic: Vec<f64> = point.iter().map(|v| 2.0 * v).collect();
        let err = check_gradient(&point, &analytic, f);
        assert!(err < 1e-9, "relative error {err}");
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        let point = vec![1.0, 2.0];
        let f = |x: &[f64]| x.iter().sum::<f64>();
        let wrong = vec![1.0, 3.0];
        let err = check_gradient(&point, &wrong, f);
        assert!(err > 0.1, "should detect the wrong entry, got {err}");
    }
}
