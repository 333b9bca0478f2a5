//! Central finite-difference gradient checking.
//!
//! Only forward evaluations are used to form the numeric reference, so this
//! stays independent of the backward implementation it vets. Run in f64.


use crate::tensor::Tensor;

/// Outcome of comparing analytic and numeric gradients for one tensor.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error over the checked coordinates.
    pub max_rel_err: f64,
    /// Coordinates skipped because the function looked locally non-smooth
    /// (ReLU kinks, pooling ties).
    pub skipped: usize,
    pub checked: usize,
}

/// Relative error as `|a - n| / max(1, |n|)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Compare the accumulated analytic gradient of `input` against central
/// differences of `loss_fn`, checking the coordinates in `coords` (or all
/// when empty). `loss_fn` must be a pure function of the tensor data.
///
/// Coordinates where the two one-sided slopes differ by more than
/// `kink_tol` relative to their scale are counted as skipped rather than
/// failed; those sit on ReLU kinks or pooling ties where the derivative is
/// not defined.
pub fn check_tensor<F>(input: &Tensor<f64>, analytic: &[f64], coords: &[usize], step: f64, kink_tol: f64, loss_fn: F) -> GradCheckReport
where
    F: Fn() -> f64,
{
    let all: Vec<usize>;
    let coords = if coords.is_empty() {
        all = (0..input.len()).collect();
        &all
    } else {
        coords
    };

    let mut max_rel = 0.0f64;
    let mut skipped = 0usize;
    let mut checked = 0usize;
    for &i in coords {
        let orig = input.with_data(|d| d[i]);
        let h = step * orig.abs().max(1.0);

        set_coord(input, i, orig + h);
        let plus = loss_fn();
        set_coord(input, i, orig - h);
        let minus = loss_fn();
        set_coord(input, i, orig);
        let central = (plus - minus) / (2.0 * h);

        // One-sided slopes disagreeing flags a kink between the probes.
        let base = loss_fn();
        let fwd = (plus - base) / h;
        let bwd = (base - minus) / h;
        let scale = fwd.abs().max(bwd.abs()).max(1.0);
        if (fwd - bwd).abs() / scale > kink_tol {
            skipped += 1;
            continue;
        }

        checked += 1;
        max_rel = max_rel.max(rel_err(analytic[i], central));
    }
    GradCheckReport { max_rel_err: max_rel, skipped, checked }
}

fn set_coord(t: &Tensor<f64>, i: usize, v: f64) {
    t.inner.borrow_mut().data[i] = v;
}
