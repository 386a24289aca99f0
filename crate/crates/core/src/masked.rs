//! Dense matrices with an explicit observation mask.
//!
//! The data model throughout this crate is an `m x n` grid (rows = spectral
//! channels, columns = time steps) in which any entry may be missing. The
//! mask is authoritative: a quiet NaN is written into the value grid at every
//! missing position purely as a tripwire, so code that forgets to consult the
//! mask poisons its output instead of silently reading garbage.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{dim_err, input_err};

/// A value grid plus its observation mask (`true` = observed).
#[derive(Debug, Clone)]
pub struct MaskedMatrix {
    values: DMatrix<f64>,
    mask: DMatrix<bool>,
}

impl MaskedMatrix {
    /// Bundle a value grid with a mask.
    ///
    /// Every observed entry must hold a finite value; values at masked-out
    /// positions are discarded and replaced by the NaN sentinel.
    pub fn new(values: DMatrix<f64>, mask: DMatrix<bool>) -> Result<Self> {
        if values.shape() != mask.shape() {
            return Err(dim_err!(
                "values are {}x{} but mask is {}x{}",
                values.nrows(),
                values.ncols(),
                mask.nrows(),
                mask.ncols()
            ));
        }
        if values.is_empty() {
            return Err(input_err!("matrix must have at least one row and one column"));
        }
        let mut values = values;
        for j in 0..values.ncols() {
            for i in 0..values.nrows() {
                if mask[(i, j)] {
                    if !values[(i, j)].is_finite() {
                        return Err(input_err!(
                            "non-finite value {} at observed entry ({}, {})",
                            values[(i, j)],
                            i,
                            j
                        ));
                    }
                } else {
                    values[(i, j)] = f64::NAN;
                }
            }
        }
        Ok(Self { values, mask })
    }

    /// Build from a value grid alone, treating every non-finite entry as
    /// missing.
    pub fn from_values(values: DMatrix<f64>) -> Result<Self> {
        let mask = values.map(|v| v.is_finite());
        Self::new(values, mask)
    }

    /// Fully observed wrapper around a complete grid.
    pub fn fully_observed(values: DMatrix<f64>) -> Result<Self> {
        let mask = DMatrix::from_element(values.nrows(), values.ncols(), true);
        Self::new(values, mask)
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }

    /// The value grid with NaN at missing positions.
    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn mask(&self) -> &DMatrix<bool> {
        &self.mask
    }

    pub fn is_observed(&self, i: usize, j: usize) -> bool {
        self.mask[(i, j)]
    }

    /// Observed value at `(i, j)`, or an error if that entry is missing.
    pub fn observed_value(&self, i: usize, j: usize) -> Result<f64> {
        if !self.mask[(i, j)] {
            return Err(input_err!("entry ({}, {}) is missing", i, j));
        }
        Ok(self.values[(i, j)])
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    /// Row-major-sorted list of observed index pairs.
    pub fn observed_indices(&self) -> Vec<(usize, usize)> {
        self.index_pairs(true)
    }

    /// Row-major-sorted list of missing index pairs.
    pub fn missing_indices(&self) -> Vec<(usize, usize)> {
        self.index_pairs(false)
    }

    fn index_pairs(&self, observed: bool) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.nrows() {
            for j in 0..self.ncols() {
                if self.mask[(i, j)] == observed {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Columns with zero observed entries, ascending.
    pub fn downtime_columns(&self) -> Vec<usize> {
        (0..self.ncols())
            .filter(|&j| (0..self.nrows()).all(|i| !self.mask[(i, j)]))
            .collect()
    }

    /// Number of observed entries in each row.
    pub fn row_observed_counts(&self) -> Vec<usize> {
        (0..self.nrows())
            .map(|i| (0..self.ncols()).filter(|&j| self.mask[(i, j)]).count())
            .collect()
    }

    /// Error if any row has zero observed entries (such rows make every
    /// row-wise estimate undefined).
    pub fn require_observed_rows(&self) -> Result<()> {
        for (i, count) in self.row_observed_counts().iter().enumerate() {
            if *count == 0 {
                return Err(input_err!(
                    "row {} has no observed entries; remove it or supply data for it",
                    i
                ));
            }
        }
        Ok(())
    }

    /// Mean of the observed entries in each row. Rows with no observed
    /// entries get 0.0.
    pub fn row_means_observed(&self) -> Vec<f64> {
        (0..self.nrows())
            .map(|i| {
                let mut sum = 0.0;
                let mut count = 0usize;
                for j in 0..self.ncols() {
                    if self.mask[(i, j)] {
                        sum += self.values[(i, j)];
                        count += 1;
                    }
                }
                if count == 0 {
                    0.0
                } else {
                    sum / count as f64
                }
            })
            .collect()
    }

    /// The value grid with missing entries replaced by 0 (the observed
    /// projection `P_mask(X)`).
    pub fn zero_filled(&self) -> DMatrix<f64> {
        let mut out = self.values.clone();
        for j in 0..out.ncols() {
            for i in 0..out.nrows() {
                if !self.mask[(i, j)] {
                    out[(i, j)] = 0.0;
                }
            }
        }
        out
    }

    /// Keep `z` on observed positions, zero elsewhere.
    pub fn project_observed(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_shape(z)?;
        Ok(DMatrix::from_fn(self.nrows(), self.ncols(), |i, j| {
            if self.mask[(i, j)] {
                z[(i, j)]
            } else {
                0.0
            }
        }))
    }

    /// Keep `z` on missing positions, zero elsewhere.
    pub fn project_missing(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_shape(z)?;
        Ok(DMatrix::from_fn(self.nrows(), self.ncols(), |i, j| {
            if self.mask[(i, j)] {
                0.0
            } else {
                z[(i, j)]
            }
        }))
    }

    /// Observed values where present, `fill` elsewhere: `P(X) + Pperp(fill)`.
    pub fn fill_missing_with(&self, fill: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_shape(fill)?;
        Ok(DMatrix::from_fn(self.nrows(), self.ncols(), |i, j| {
            if self.mask[(i, j)] {
                self.values[(i, j)]
            } else {
                fill[(i, j)]
            }
        }))
    }

    /// Copy of this matrix with the given entries additionally masked out.
    /// Entries already missing are accepted (masking is idempotent).
    pub fn with_masked_out(&self, entries: &[(usize, usize)]) -> Result<Self> {
        let mut mask = self.mask.clone();
        for &(i, j) in entries {
            if i >= self.nrows() || j >= self.ncols() {
                return Err(dim_err!(
                    "entry ({}, {}) outside a {}x{} matrix",
                    i,
                    j,
                    self.nrows(),
                    self.ncols()
                ));
            }
            mask[(i, j)] = false;
        }
        Self::new(self.values.clone(), mask)
    }

    fn check_shape(&self, z: &DMatrix<f64>) -> Result<()> {
        if z.shape() != self.shape() {
            return Err(dim_err!(
                "expected a {}x{} matrix, got {}x{}",
                self.nrows(),
                self.ncols(),
                z.nrows(),
                z.ncols()
            ));
        }
        Ok(())
    }
}

/// Where each entry of an observed/missing grid belongs. Used to tag imputed
/// outputs and classify test entries for interval construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntryKind {
    Observed,
    /// Missing in a column that still has other observed entries.
    Scattered,
    /// Missing because the whole column is unobserved.
    Downtime,
}

impl MaskedMatrix {
    /// Classify one entry against this matrix's own mask, attributing
    /// fully-missing columns to downtime and every other missing entry to
    /// scattered missingness.
    pub fn classify_entry(&self, i: usize, j: usize, downtime_cols: &[usize]) -> EntryKind {
        if self.mask[(i, j)] {
            EntryKind::Observed
        } else if downtime_cols.binary_search(&j).is_ok() {
            EntryKind::Downtime
        } else {
            EntryKind::Scattered
        }
    }
}

/// Frobenius norm of the difference between two grids (test/metric helper).
pub fn frob_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "cannot compare {}x{} with {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    Ok((a - b).norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;
    use rand::Rng;

    fn demo() -> MaskedMatrix {
        // 2x3 with entry (0,1) and the whole column 2 missing.
        let values = DMatrix::from_row_slice(2, 3, &[1.0, f64::NAN, f64::NAN, 4.0, 5.0, f64::NAN]);
        MaskedMatrix::from_values(values).unwrap()
    }

    #[test]
    fn mask_is_authoritative_and_nan_marks_missing() {
        let x = demo();
        assert!(x.is_observed(0, 0));
        assert!(!x.is_observed(0, 1));
        assert!(x.values()[(0, 1)].is_nan());
        assert_eq!(x.observed_count(), 3);
        assert_eq!(x.downtime_columns(), vec![2]);
    }

    #[test]
    fn observed_nonfinite_rejected() {
        let values = DMatrix::from_row_slice(1, 2, &[1.0, f64::INFINITY]);
        let mask = DMatrix::from_element(1, 2, true);
        let err = MaskedMatrix::new(values, mask).unwrap_err();
        assert!(matches!(err, Error::Input(_)), "got {err}");
    }

    #[test]
    fn shape_mismatch_rejected() {
        let values = DMatrix::from_element(2, 2, 1.0);
        let mask = DMatrix::from_element(2, 3, true);
        assert!(matches!(
            MaskedMatrix::new(values, mask),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn projection_splits_exactly() {
        // P(Z) + Pperp(Z) = Z entry-for-entry, and the two parts have
        // disjoint supports, over several random masks.
        let mut rng = rng_from_seed(11);
        for _ in 0..20 {
            let z = DMatrix::from_fn(4, 5, |_, _| rng.gen_range(-3.0..3.0));
            let mask = DMatrix::from_fn(4, 5, |_, _| rng.gen_bool(0.6));
            let values = DMatrix::from_fn(4, 5, |i, j| if mask[(i, j)] { 1.0 } else { f64::NAN });
            let x = MaskedMatrix::new(values, mask).unwrap();
            let on = x.project_observed(&z).unwrap();
            let off = x.project_missing(&z).unwrap();
            assert_eq!(&on + &off, z);
            for j in 0..5 {
                for i in 0..4 {
                    assert!(on[(i, j)] == 0.0 || off[(i, j)] == 0.0);
                }
            }
            // Idempotence and Frobenius orthogonality.
            assert_eq!(x.project_observed(&on).unwrap(), on);
            let total = z.norm_squared();
            assert!((on.norm_squared() + off.norm_squared() - total).abs() <= 1e-12 * total);
        }
    }

    #[test]
    fn fill_missing_keeps_observed_bits() {
        let x = demo();
        let fill = DMatrix::from_element(2, 3, 9.0);
        let filled = x.fill_missing_with(&fill).unwrap();
        assert_eq!(filled[(0, 0)], 1.0);
        assert_eq!(filled[(0, 1)], 9.0);
        assert_eq!(filled[(1, 2)], 9.0);
    }

    #[test]
    fn row_means_ignore_missing() {
        let x = demo();
        let means = x.row_means_observed();
        assert_eq!(means, vec![1.0, 4.5]);
    }

    #[test]
    fn empty_row_detected() {
        let values = DMatrix::from_row_slice(2, 2, &[f64::NAN, f64::NAN, 1.0, 2.0]);
        let x = MaskedMatrix::from_values(values).unwrap();
        assert!(x.require_observed_rows().is_err());
    }

    #[test]
    fn classify_entries() {
        let x = demo();
        let dt = x.downtime_columns();
        assert_eq!(x.classify_entry(0, 0, &dt), EntryKind::Observed);
        assert_eq!(x.classify_entry(0, 1, &dt), EntryKind::Scattered);
        assert_eq!(x.classify_entry(1, 2, &dt), EntryKind::Downtime);
    }
}
