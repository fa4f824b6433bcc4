//! Central finite differences, used as an independent oracle for `grad`.

use crate::array::Array;
use crate::error::{Result, TensorError};

/// Central-difference estimate of the gradient of `f` at `at`.
///
/// Every probe value must be finite.
pub fn finite_diff(mut f: impl FnMut(&Array) -> f64, at: &Array, step: f64) -> Result<Array> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(TensorError::FiniteDiff(format!("step must be positive, got {step}")));
    }
    let mut probe = at.clone();
    let mut out = Array::zeros(at.shape());
    for i in 0..at.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(TensorError::FiniteDiff(format!("non-finite value probing element {i}")));
        }
        out.data_mut()[i] = (up - down) / (2.0 * step);
    }
    Ok(out)
}

/// Central-difference Jacobian of a vector-valued `f`: row `i` is the
/// derivative of the output with respect to input element `i`.
pub fn finite_diff_jacobian(mut f: impl FnMut(&Array) -> Array, at: &Array, step: f64) -> Result<Vec<Array>> {
    if !(step > 0.0) {
        return Err(TensorError::FiniteDiff(format!("step must be positive, got {step}")));
    }
    let mut probe = at.clone();
    let mut rows = Vec::with_capacity(at.numel());
    for i in 0..at.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        let row = up.zip_map(&down, "finite_diff_jacobian", |a, b| (a - b) / (2.0 * step))?;
        if !row.is_finite() {
            return Err(TensorError::FiniteDiff(format!("non-finite value probing element {i}")));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// `||a - b|| / max(||a||, ||b||)`, or the absolute difference when both are
/// below `floor`.
pub fn relative_error(a: &Array, b: &Array, floor: f64) -> f64 {
    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a.norm().max(b.norm());
    if scale < floor {
        diff
    } else {
        diff / scale
    }
}
