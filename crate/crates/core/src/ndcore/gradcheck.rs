use super::DenseArray;
use crate::error::{Error, Result};

/// Central-difference gradient of `f` at `x`, one coordinate at a time.
pub fn finite_difference_gradient<F>(mut f: F, x: &DenseArray, h: f64) -> Result<DenseArray>
where
    F: FnMut(&DenseArray) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidConfig(format!("step size must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = DenseArray::zeros(x.shape().to_vec());
    for i in 0..x.len() {
        let original = probe.data()[i];
        probe.data_mut()[i] = original + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = original - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = original;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFiniteProbe { coordinate: i });
        }
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// Worst-case discrepancy between two gradients.
///
/// Each coordinate contributes `|a − n| / max(|a|, |n|, 1e-2)`, so a value
/// below `1e-4` means relative agreement to `1e-4`, or absolute agreement
/// to `1e-6` where both gradients are near zero.
pub fn max_relative_discrepancy(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-2))
        .fold(0.0, f64::max)
}
