//! Central finite differences, used by the test suites as an independent
//! gradient oracle. Nothing here touches the reverse-mode path: all
//! estimates come from repeated forward evaluations of a closure.

/// Central-difference gradient of a scalar function at `x`.
///
/// `df/dx_i ~= (f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn numeric_grad<F>(f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Worst relative error between an analytic and a numeric gradient.
///
/// Per element: `|a - n| / max(1, |a|, |n|)`, so near-zero entries are
/// compared absolutely.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| (a - n).abs() / 1.0_f64.max(a.abs()).max(n.abs()))
        .fold(0.0, f64::max)
}
