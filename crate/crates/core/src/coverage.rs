//! Coverage functions: scalar measures of how much of the state space a
//! rollout explores.

use crate::error::{Error, Result};

/// Mean squared Euclidean deviation of a sequence of positions from their
/// centroid (total variance).
pub fn variance_coverage(positions: &[[f64; 2]]) -> Result<f64> {
    if positions.is_empty() {
        return Err(Error::InvalidInput("variance coverage of an empty sequence".into()));
    }
    let n = positions.len() as f64;
    let mean = positions.iter().fold([0.0, 0.0], |acc, p| [acc[0] + p[0], acc[1] + p[1]]);
    let mean = [mean[0] / n, mean[1] / n];
    let total: f64 = positions.iter().map(|p| (p[0] - mean[0]).powi(2) + (p[1] - mean[1]).powi(2)).sum();
    Ok(total / n)
}

/// Spread of a scalar signal, `max - min`.
pub fn range_coverage(signal: &[f64]) -> Result<f64> {
    if signal.is_empty() {
        return Err(Error::InvalidInput("range coverage of an empty signal".into()));
    }
    let (lo, hi) = signal.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    Ok(hi - lo)
}
