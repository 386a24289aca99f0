//! On-disk formats for fitted models, completed matrices, and interval sets.
//!
//! Models go to JSON (shortest-round-trip floats, so loading reproduces every
//! parameter bit-for-bit); grids go to CSV next to their provenance-tag grids
//! so a completed matrix always carries which stage produced each entry.

use std::path::Path;

use nalgebra::DMatrix;

use crate::conformal::{IntervalEstimate, RowQuantiles};
use crate::error::{Error, Result};
use crate::io::{load_dense, load_json, store_dense, store_json};
use crate::step1::Step1Model;
use crate::step2::{ImputedMatrix, SourceTag, Step2Model};

pub fn store_step1_model(model: &Step1Model, path: &Path) -> Result<()> {
    store_json(model, path)
}

pub fn load_step1_model(path: &Path) -> Result<Step1Model> {
    load_json(path)
}

pub fn store_step2_model(model: &Step2Model, path: &Path) -> Result<()> {
    store_json(model, path)
}

pub fn load_step2_model(path: &Path) -> Result<Step2Model> {
    load_json(path)
}

/// Store a completed matrix as a value grid plus a tag grid (0 = observed,
/// 1 = first-stage fill, 2 = second-stage reconstruction).
pub fn store_imputed(imp: &ImputedMatrix, value_path: &Path, tag_path: &Path) -> Result<()> {
    store_dense(imp.values(), value_path)?;
    let mut out = String::new();
    let tags = imp.tag_codes();
    for i in 0..tags.nrows() {
        for j in 0..tags.ncols() {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&tags[(i, j)].to_string());
        }
        out.push('\n');
    }
    std::fs::write(tag_path, out)?;
    Ok(())
}

/// Load a completed matrix and its tag grid back; every tag code must be a
/// known provenance.
pub fn load_imputed(value_path: &Path, tag_path: &Path) -> Result<ImputedMatrix> {
    let values = load_dense(value_path)?;
    let grid = load_dense(tag_path)?;
    let tags = DMatrix::from_fn(grid.nrows(), grid.ncols(), |i, j| grid[(i, j)] as u8);
    for (idx, (t, g)) in tags.iter().zip(grid.iter()).enumerate() {
        if *g != f64::from(*t) || SourceTag::from_code(*t).is_err() {
            return Err(Error::Parse(format!(
                "{}: entry {idx} holds {g}, not a provenance code",
                tag_path.display()
            )));
        }
    }
    ImputedMatrix::new(values, tags)
}

/// Store an interval set as three grids (centers, lower, upper; NaN off the
/// test set) plus the per-row quantiles and calibration counts as JSON.
pub fn store_intervals(
    est: &IntervalEstimate,
    quantiles: &RowQuantiles,
    center_path: &Path,
    lower_path: &Path,
    upper_path: &Path,
    quantile_path: &Path,
) -> Result<()> {
    store_dense(&est.x_hat, center_path)?;
    store_dense(&est.lower, lower_path)?;
    store_dense(&est.upper, upper_path)?;
    store_json(quantiles, quantile_path)?;
    Ok(())
}

pub fn load_quantiles(path: &Path) -> Result<RowQuantiles> {
    load_json(path)
}
