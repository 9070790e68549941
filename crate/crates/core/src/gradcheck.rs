//! Central-difference gradient oracle.

use crate::error::Result;
use crate::tensor::Tensor;

/// Default step for 64-bit central differences.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Central difference `(f(x + h·e_i) - f(x - h·e_i)) / 2h` for every coordinate.
pub fn finite_difference_gradient<F>(f: F, at: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = at.clone();
    let mut grad = Tensor::zeros(at.shape());
    for i in 0..at.numel() {
        let orig = at.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Floor on the denominator of [`relative_error`] so tensors whose true
/// gradient is (near) zero are judged on absolute error.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `‖a - b‖₂ / max(‖a‖₂, ‖b‖₂, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> Result<f64> {
    let diff = analytic.sub(numeric)?.norm();
    Ok(diff / analytic.norm().max(numeric.norm()).max(REL_ERR_FLOOR))
}

/// Index and both values of the coordinate where two gradients disagree most.
pub fn worst_coordinate(analytic: &Tensor, numeric: &Tensor) -> (usize, f64, f64) {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .enumerate()
        .map(|(i, (&a, &n))| (i, a, n))
        .max_by(|x, y| (x.1 - x.2).abs().total_cmp(&(y.1 - y.2).abs()))
        .unwrap_or((0, 0.0, 0.0))
}
