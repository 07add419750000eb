use crate::error::{Error, Result};

/// Central-difference gradient estimate of `f` at `x`.
///
/// `eps` must lie in `[1e-7, 1e-3]`.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Parameter(format!("finite-difference step {eps} outside [1e-7, 1e-3]")));
    }
    let mut point = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = point[i];
        point[i] = orig + eps;
        let plus = f(&point)?;
        point[i] = orig - eps;
        let minus = f(&point)?;
        point[i] = orig;
        for value in [plus, minus] {
            if !value.is_finite() {
                return Err(Error::Evaluation { coord: i, value });
            }
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(grad)
}

/// Largest coordinate deviation, relative to the larger of the two gradients'
/// max-magnitude (floored at `1e-8` so an all-zero pair compares as zero).
pub fn max_relative_error(analytic: &[f64], reference: &[f64]) -> f64 {
    assert_eq!(analytic.len(), reference.len(), "gradient length mismatch");
    let scale = analytic
        .iter()
        .chain(reference)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-8);
    analytic
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b).abs() / scale)
        .fold(0.0, f64::max)
}
