//! Central finite differences, used to validate hand-written gradients.

const STEP: f64 = 1e-5;

/// Numerical gradient of `loss` at `params` by central differences.
pub fn finite_diff_gradient(mut loss: impl FnMut(&[f64]) -> f64, params: &[f64], step: f64) -> Vec<f64> {
    let mut x = params.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + step;
            let up = loss(&x);
            x[i] = orig - step;
            let down = loss(&x);
            x[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Largest relative discrepancy between `analytic` and a central-difference
/// estimate (step 1e-5). Entries where both are below 1e-7 in magnitude are
/// compared absolutely.
pub fn finite_diff_check(loss: impl FnMut(&[f64]) -> f64, params: &[f64], analytic: &[f64]) -> f64 {
    assert_eq!(params.len(), analytic.len(), "finite_diff_check: gradient length mismatch");
    let numeric = finite_diff_gradient(loss, params, STEP);
    numeric
        .iter()
        .zip(analytic)
        .map(|(n, a)| (n - a).abs() / n.abs().max(a.abs()).max(1e-7))
        .fold(0.0, f64::max)
}
