//! Central finite-difference comparison of analytic gradients.

use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

/// `|a - n|_inf / max(|a|_inf, |n|_inf)`, with the denominator floored at
/// `1e-12` so an all-zero gradient compares as zero error.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(1e-12, f64::max);
    diff / scale
}

/// Central differences of `f` at `x` with step `h`.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> Result<f64>, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe)?;
        probe[i] = x[i] - h;
        let down = f(&probe)?;
        probe[i] = x[i];
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Relative error between `grad` and the finite-difference gradient of `f`
/// at `x`.
pub fn check(f: impl FnMut(&[f64]) -> Result<f64>, x: &[f64], grad: &[f64], h: f64) -> Result<f64> {
    let numeric = numeric_gradient(f, x, h)?;
    Ok(relative_error(grad, &numeric))
}
