//! File formats: CSV value grids (rows = channels, columns = time steps),
//! optional 0/1 mask CSVs, and JSON for index-set payloads.
//!
//! Values are written with Rust's shortest-round-trip float formatting, so
//! `load(store(X))` reproduces every observed entry bit-for-bit. Missing
//! entries are stored as empty fields ("NaN" is also accepted on input).

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::masked::MaskedMatrix;

/// Load a value-grid CSV; empty fields and "NaN" (any case) are missing.
pub fn load_matrix(path: &Path) -> Result<MaskedMatrix> {
    let text = fs::read_to_string(path)?;
    let (values, mask) = parse_matrix_text(&text, path)?;
    MaskedMatrix::new(values, mask)
}

/// Store a masked matrix as CSV with empty fields at missing entries.
pub fn store_matrix(x: &MaskedMatrix, path: &Path) -> Result<()> {
    let mut out = String::new();
    for i in 0..x.nrows() {
        for j in 0..x.ncols() {
            if j > 0 {
                out.push(',');
            }
            if x.is_observed(i, j) {
                push_float(&mut out, x.values()[(i, j)]);
            }
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Store a complete grid (no mask) as CSV.
pub fn store_dense(x: &DMatrix<f64>, path: &Path) -> Result<()> {
    let mut out = String::new();
    for i in 0..x.nrows() {
        for j in 0..x.ncols() {
            if j > 0 {
                out.push(',');
            }
            push_float(&mut out, x[(i, j)]);
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Load a complete grid; every field must parse as a finite number.
pub fn load_dense(path: &Path) -> Result<DMatrix<f64>> {
    let x = load_matrix(path)?;
    if x.observed_count() != x.nrows() * x.ncols() {
        return Err(Error::Parse(format!(
            "{}: expected a fully observed grid but found missing entries",
            path.display()
        )));
    }
    Ok(x.values().clone())
}

/// Load a 0/1 mask CSV (1 = observed).
pub fn load_mask(path: &Path) -> Result<DMatrix<bool>> {
    let text = fs::read_to_string(path)?;
    let rows = split_rows(&text);
    let (m, n) = grid_shape(&rows, path)?;
    let mut mask = DMatrix::from_element(m, n, false);
    for (i, row) in rows.iter().enumerate() {
        for (j, field) in row.iter().enumerate() {
            mask[(i, j)] = match field.trim() {
                "0" => false,
                "1" => true,
                other => {
                    return Err(Error::Parse(format!(
                        "{}: row {}, column {}: mask field must be 0 or 1, got {:?}",
                        path.display(),
                        i,
                        j,
                        other
                    )))
                }
            };
        }
    }
    Ok(mask)
}

/// Store a mask as a 0/1 CSV.
pub fn store_mask(mask: &DMatrix<bool>, path: &Path) -> Result<()> {
    let mut out = String::new();
    for i in 0..mask.nrows() {
        for j in 0..mask.ncols() {
            if j > 0 {
                out.push(',');
            }
            out.push(if mask[(i, j)] { '1' } else { '0' });
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Load values plus a companion mask file; the mask overrides value-grid
/// missingness (an entry masked out is missing even if a value is present).
pub fn load_matrix_with_mask(value_path: &Path, mask_path: &Path) -> Result<MaskedMatrix> {
    let text = fs::read_to_string(value_path)?;
    let (values, value_mask) = parse_matrix_text(&text, value_path)?;
    let mask = load_mask(mask_path)?;
    if mask.shape() != values.shape() {
        return Err(Error::Dimension(format!(
            "mask {} is {}x{} but values {} are {}x{}",
            mask_path.display(),
            mask.nrows(),
            mask.ncols(),
            value_path.display(),
            values.nrows(),
            values.ncols()
        )));
    }
    // Entries the mask claims observed must actually hold a value.
    for j in 0..values.ncols() {
        for i in 0..values.nrows() {
            if mask[(i, j)] && !value_mask[(i, j)] {
                return Err(Error::Parse(format!(
                    "mask marks ({}, {}) observed but the value grid has no value there",
                    i, j
                )));
            }
        }
    }
    MaskedMatrix::new(values, mask)
}

/// Serialize any serde payload as pretty JSON.
pub fn store_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Deserialize a JSON payload.
pub fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn push_float(out: &mut String, v: f64) {
    // `Display` for f64 prints the shortest digit string that parses back to
    // the identical bit pattern, which is what the round-trip contract needs.
    out.push_str(&format!("{v}"));
}

fn split_rows(text: &str) -> Vec<Vec<&str>> {
    text.lines()
        .filter(|line| !line.trim().is_empty())
        .map(|line| line.split(',').collect())
        .collect()
}

fn grid_shape<'a>(rows: &[Vec<&'a str>], path: &Path) -> Result<(usize, usize)> {
    if rows.is_empty() {
        return Err(Error::Parse(format!("{}: empty file", path.display())));
    }
    let n = rows[0].len();
    for (i, row) in rows.iter().enumerate() {
        if row.len() != n {
            return Err(Error::Parse(format!(
                "{}: ragged rows — row 0 has {} fields but row {} has {}",
                path.display(),
                n,
                i,
                row.len()
            )));
        }
    }
    Ok((rows.len(), n))
}

fn parse_matrix_text(text: &str, path: &Path) -> Result<(DMatrix<f64>, DMatrix<bool>)> {
    let rows = split_rows(text);
    let (m, n) = grid_shape(&rows, path)?;
    let mut values = DMatrix::from_element(m, n, f64::NAN);
    let mut mask = DMatrix::from_element(m, n, false);
    for (i, row) in rows.iter().enumerate() {
        for (j, field) in row.iter().enumerate() {
            let field = field.trim();
            if field.is_empty() || field.eq_ignore_ascii_case("nan") {
                continue;
            }
            let v: f64 = field.parse().map_err(|_| {
                Error::Parse(format!(
                    "{}: row {}, column {}: cannot parse {:?} as a number",
                    path.display(),
                    i,
                    j,
                    field
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::Parse(format!(
                    "{}: row {}, column {}: non-finite value {:?}",
                    path.display(),
                    i,
                    j,
                    field
                )));
            }
            values[(i, j)] = v;
            mask[(i, j)] = true;
        }
    }
    Ok((values, mask))
}
