use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

use super::{StreamMask, Tape, Var};

/// A scalar function that can be recorded on a tape of any precision.
///
/// Gradient checks record it once in `f32` for the reverse sweep and replay it
/// in `f64` for the central differences.
pub trait ScalarFn {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var>;
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest per-component relative error (see [`relative_error`]).
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub coords_checked: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Per-component relative error between two gradient vectors.
///
/// The denominator is floored at 1% of the larger vector's infinity norm so
/// that components many orders below the gradient's scale, where the central
/// difference is dominated by truncation error, do not dominate the score.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (scale * 1e-2).max(1e-10);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(0.0, f64::max)
}

fn eval_f64<F: ScalarFn>(f: &F, point: &Tensor<f64>, frozen: Option<(StreamMask, &[Tensor<f64>])>) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    if let Some((mask, values)) = frozen {
        tape.detach_tagged(mask, values.to_vec());
    }
    let x = tape.constant(point.clone());
    let y = f.eval(&mut tape, x)?;
    let v = tape.value(y).item()?;
    if !v.is_finite() {
        return Err(Error::NonFinite("grad_check function value".into()));
    }
    Ok(v)
}

/// Compares the `f32` reverse-mode gradient of `f` at `point` against `f64`
/// central differences with step `h`. Passes iff the error is below `tol`.
pub fn grad_check<F: ScalarFn>(f: &F, point: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport> {
    let coords: Vec<usize> = (0..point.len()).collect();
    grad_check_coords(f, point, h, tol, &coords)
}

/// As [`grad_check`], restricted to the given flat coordinates.
pub fn grad_check_coords<F: ScalarFn>(
    f: &F,
    point: &Tensor,
    h: f64,
    tol: f64,
    coords: &[usize],
) -> Result<GradCheckReport> {
    check_against_differences(f, point, h, tol, coords, StreamMask::EMPTY)
}

/// Checks the gradient recorded with `mask` active against central
/// differences of the detached forward: the function re-evaluated with every
/// node of a masked stream held at its value at `point`.
pub fn masked_grad_check<F: ScalarFn>(
    f: &F,
    point: &Tensor,
    mask: StreamMask,
    h: f64,
    tol: f64,
    coords: &[usize],
) -> Result<GradCheckReport> {
    check_against_differences(f, point, h, tol, coords, mask)
}

fn check_against_differences<F: ScalarFn>(
    f: &F,
    point: &Tensor,
    h: f64,
    tol: f64,
    coords: &[usize],
    mask: StreamMask,
) -> Result<GradCheckReport> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step h must be positive, got {h}")));
    }
    if let Some(&bad) = coords.iter().find(|&&i| i >= point.len()) {
        return Err(Error::InvalidArgument(format!(
            "coordinate {bad} out of range for {} elements",
            point.len()
        )));
    }
    let mut tape = Tape::<f32>::new();
    tape.set_mask(mask);
    let x = tape.leaf(point.clone());
    let y = f.eval(&mut tape, x)?;
    if !tape.value(y).item()?.is_finite() {
        return Err(Error::NonFinite("grad_check function value".into()));
    }
    let grads = tape.backward(y, &[x])?;
    let reverse = grads.get(x).expect("requested leaf");

    let base: Tensor<f64> = point.cast();
    let recorded = if mask.is_empty() {
        Vec::new()
    } else {
        let mut reference = Tape::<f64>::new();
        let x = reference.constant(base.clone());
        f.eval(&mut reference, x)?;
        reference.tagged_values(mask)
    };
    let frozen = (!mask.is_empty()).then_some((mask, recorded.as_slice()));
    let mut analytic = Vec::with_capacity(coords.len());
    let mut numeric = Vec::with_capacity(coords.len());
    for &i in coords {
        let mut plus = base.clone();
        plus.data_mut()[i] += h;
        let mut minus = base.clone();
        minus.data_mut()[i] -= h;
        let fd = (eval_f64(f, &plus, frozen)? - eval_f64(f, &minus, frozen)?) / (2.0 * h);
        analytic.push(reverse.data()[i] as f64);
        numeric.push(fd);
    }
    if analytic.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("reverse-mode gradient".into()));
    }
    let max_rel_error = relative_error(&analytic, &numeric);
    let max_abs_error = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        max_abs_error,
        coords_checked: coords.len(),
        tol,
        passed: max_rel_error < tol,
    })
}
