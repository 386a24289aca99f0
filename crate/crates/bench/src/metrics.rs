//! Entry-wise relative-error metrics over chosen index sets, plus the margin
//! scores that compare a model against a baseline estimate.

use nalgebra::DMatrix;

use siap_core::error::Result;
use siap_core::{dim_err, input_err};

/// Mean relative absolute error together with how many entries actually
/// entered the mean and how many were excluded for zero truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MraeResult {
    pub value: f64,
    pub used: usize,
    /// Entries skipped because the true value is exactly zero (the relative
    /// error is undefined there).
    pub excluded_zero_truth: usize,
}

/// Relative absolute error of one entry; `None` when the truth is zero.
pub fn rae(x_hat: &DMatrix<f64>, truth: &DMatrix<f64>, i: usize, j: usize) -> Option<f64> {
    let t = truth[(i, j)];
    if t == 0.0 {
        return None;
    }
    Some((x_hat[(i, j)] - t).abs() / t.abs())
}

fn check_shapes(x_hat: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<()> {
    if x_hat.shape() != truth.shape() {
        return Err(dim_err!(
            "estimate is {:?} but truth is {:?}",
            x_hat.shape(),
            truth.shape()
        ));
    }
    Ok(())
}

/// Mean relative absolute error over `set`. Zero-truth entries are excluded
/// and counted; a set with no usable entries is an error.
pub fn mrae(
    x_hat: &DMatrix<f64>,
    truth: &DMatrix<f64>,
    set: &[(usize, usize)],
) -> Result<MraeResult> {
    check_shapes(x_hat, truth)?;
    let (m, n) = truth.shape();
    let mut sum = 0.0;
    let mut used = 0usize;
    let mut excluded = 0usize;
    for &(i, j) in set {
        if i >= m || j >= n {
            return Err(input_err!("index ({i}, {j}) out of range for {m}x{n}"));
        }
        match rae(x_hat, truth, i, j) {
            Some(r) => {
                sum += r;
                used += 1;
            }
            None => excluded += 1,
        }
    }
    if used == 0 {
        return Err(input_err!(
            "no usable entries: {} requested, {excluded} had zero truth",
            set.len()
        ));
    }
    if excluded > 0 {
        log::debug!("relative error skipped {excluded} zero-truth entries");
    }
    Ok(MraeResult {
        value: sum / used as f64,
        used,
        excluded_zero_truth: excluded,
    })
}

/// Margin of the working estimate over a baseline estimate on the same set:
/// `MRAE(baseline) - MRAE(model)`. Positive means the model is better.
pub fn mrae_margin(
    x_hat: &DMatrix<f64>,
    truth: &DMatrix<f64>,
    set: &[(usize, usize)],
    baseline_hat: &DMatrix<f64>,
) -> Result<f64> {
    Ok(mrae(baseline_hat, truth, set)?.value - mrae(x_hat, truth, set)?.value)
}

/// The margin as a fraction of the baseline's error:
/// `(MRAE(baseline) - MRAE(model)) / MRAE(baseline)`.
pub fn relative_mrae_margin(
    x_hat: &DMatrix<f64>,
    truth: &DMatrix<f64>,
    set: &[(usize, usize)],
    baseline_hat: &DMatrix<f64>,
) -> Result<f64> {
    let base = mrae(baseline_hat, truth, set)?.value;
    if base == 0.0 {
        return Err(input_err!(
            "baseline error is exactly zero; the relative margin is undefined"
        ));
    }
    Ok((base - mrae(x_hat, truth, set)?.value) / base)
}
