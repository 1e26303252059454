//! Central finite differences, used as the independent oracle for every
//! analytic gradient in the crate.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function at `x` with step `h`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::invalid("finite_diff_grad", "step must be positive"));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite {
                op: format!("finite_diff_grad (component {i})"),
            });
        }
        grad.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Worst per-component relative error between two gradients. Components
/// whose absolute difference is at most `abs_floor` count as exact.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor, abs_floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, b)| {
            let diff = (a - b).abs();
            if diff <= abs_floor {
                0.0
            } else {
                diff / a.abs().max(b.abs())
            }
        })
        .fold(0.0, f64::max)
}
