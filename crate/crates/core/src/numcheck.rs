//! Finite-difference gradient verification.
//!
//! Every analytic gradient in this crate is hand-derived, so each one is
//! validated against central differences. The helpers here are shared by the
//! per-module unit tests and the acceptance suite.

/// Central-difference derivative of `f` along coordinate `i` of `x`.
pub fn central_diff<F>(f: &F, x: &[f64], i: usize, step: f64) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    let mut plus = x.to_vec();
    let mut minus = x.to_vec();
    plus[i] += step;
    minus[i] -= step;
    (f(&plus) - f(&minus)) / (2.0 * step)
}

/// Relative error with a floor so that two near-zero values compare equal.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom < 1e-8 {
        0.0
    } else {
        (a - b).abs() / denom
    }
}

/// Compare an analytic gradient against central differences at one point.
/// Returns the worst relative error over all coordinates.
pub fn max_grad_rel_err<F>(f: &F, x: &[f64], analytic: &[f64], step: f64) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(x.len(), analytic.len(), "gradient shape mismatch");
    let mut worst = 0.0_f64;
    for i in 0..x.len() {
        let numeric = central_diff(f, x, i, step);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_checks_out() {
        // f(x) = sum x_i^2, grad = 2x.
        let f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let x = vec![0.3, -1.2, 2.5];
        let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        assert!(max_grad_rel_err(&f, &x, &g, 1e-5) < 1e-9);
    }

    #[test]
    fn rel_err_floors_near_zero() {
        assert_eq!(rel_err(1e-12, -1e-12), 0.0);
        assert!(rel_err(1.0, 1.0001) < 2e-4);
    }
}
