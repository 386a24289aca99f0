//! Mixed downtime/scattered missingness: simulation of masks and
//! train/calibration splitting of observed entries.
//!
//! The missingness mechanism has two independent layers: whole columns drop
//! out with probability `p` ("downtime", an instrument outage covering every
//! channel), and entries of surviving columns drop out individually with
//! probability `p_prime` ("scattered"). Calibration splitting mirrors the
//! same two-layer structure so that held-out calibration residuals are
//! exchangeable with the corresponding test residuals.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::input_err;
use crate::masked::MaskedMatrix;
use crate::seed::{derive_seed, rng_from_seed, tags};

/// Which entries a simulated mask removes, along with the generating
/// probabilities.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MissingnessPattern {
    pub m: usize,
    pub n: usize,
    /// Columns dropped entirely, ascending.
    pub downtime_cols: Vec<usize>,
    /// Individually dropped entries of non-downtime columns, row-major order.
    pub scattered: Vec<(usize, usize)>,
    /// Column drop probability (empirical fraction for inferred patterns).
    pub p: f64,
    /// Entry drop probability within surviving columns (empirical fraction for
    /// inferred patterns).
    pub p_prime: f64,
}

impl MissingnessPattern {
    /// Check index bounds (useful after deserializing).
    pub fn validate(&self) -> Result<()> {
        if self.downtime_cols.iter().any(|&j| j >= self.n) {
            return Err(input_err!("downtime column index out of range"));
        }
        if self
            .scattered
            .iter()
            .any(|&(i, j)| i >= self.m || j >= self.n)
        {
            return Err(input_err!("scattered entry index out of range"));
        }
        Ok(())
    }

    /// True if column `j` is a downtime column.
    pub fn is_downtime_col(&self, j: usize) -> bool {
        self.downtime_cols.binary_search(&j).is_ok()
    }

    /// The boolean mask induced by this pattern (`true` = observed).
    pub fn mask(&self) -> DMatrix<bool> {
        let mut mask = DMatrix::from_element(self.m, self.n, true);
        for &j in &self.downtime_cols {
            for i in 0..self.m {
                mask[(i, j)] = false;
            }
        }
        for &(i, j) in &self.scattered {
            mask[(i, j)] = false;
        }
        mask
    }

    /// Mask a complete ground-truth grid with this pattern.
    pub fn apply(&self, truth: &DMatrix<f64>) -> Result<MaskedMatrix> {
        if truth.shape() != (self.m, self.n) {
            return Err(crate::dim_err!(
                "pattern is {}x{} but truth is {}x{}",
                self.m,
                self.n,
                truth.nrows(),
                truth.ncols()
            ));
        }
        MaskedMatrix::new(truth.clone(), self.mask())
    }

    /// Recover a pattern from observed data alone: a column with zero
    /// observed entries is downtime, every other missing entry is scattered.
    /// The recorded probabilities are the empirical fractions.
    pub fn infer(x: &MaskedMatrix) -> Self {
        let downtime_cols = x.downtime_columns();
        let mut scattered = Vec::new();
        for (i, j) in x.missing_indices() {
            if downtime_cols.binary_search(&j).is_err() {
                scattered.push((i, j));
            }
        }
        let n_surviving = x.ncols() - downtime_cols.len();
        let p = downtime_cols.len() as f64 / x.ncols() as f64;
        let p_prime = if n_surviving == 0 {
            0.0
        } else {
            scattered.len() as f64 / (n_surviving * x.nrows()) as f64
        };
        Self {
            m: x.nrows(),
            n: x.ncols(),
            downtime_cols,
            scattered,
            p,
            p_prime,
        }
    }
}

/// Draw a mixed missingness pattern: columns drop with probability `p`, then
/// entries of surviving columns drop with probability `p_prime`.
///
/// Deterministic for a fixed seed; draws happen in a fixed order (columns
/// ascending, then entries in row-major order) so the pattern is
/// platform-independent.
pub fn sample_mixed_missingness(
    m: usize,
    n: usize,
    p: f64,
    p_prime: f64,
    seed: u64,
) -> Result<MissingnessPattern> {
    check_probability("p", p)?;
    check_probability("p_prime", p_prime)?;
    if m == 0 || n == 0 {
        return Err(input_err!("matrix dimensions must be positive"));
    }
    let mut rng = rng_from_seed(derive_seed(seed, tags::MISSINGNESS));
    let downtime_cols: Vec<usize> = (0..n).filter(|_| rng.gen_bool(p)).collect();
    let mut scattered = Vec::new();
    for i in 0..m {
        for j in 0..n {
            if downtime_cols.binary_search(&j).is_err() && rng.gen_bool(p_prime) {
                scattered.push((i, j));
            }
        }
    }
    Ok(MissingnessPattern {
        m,
        n,
        downtime_cols,
        scattered,
        p,
        p_prime,
    })
}

fn check_probability(name: &str, value: f64) -> Result<()> {
    if !(0.0..1.0).contains(&value) {
        return Err(input_err!(
            "{name} must lie in [0, 1), got {value}"
        ));
    }
    Ok(())
}

/// Partition of the observed entries into training data and the two
/// calibration families.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationSplit {
    /// Observed entries used for fitting, row-major order.
    pub train: Vec<(usize, usize)>,
    /// Whole-column calibration entries for the downtime family (S_cal1).
    pub cal_downtime: Vec<(usize, usize)>,
    /// Entry-level calibration draws for the scattered family (S_cal2).
    pub cal_scattered: Vec<(usize, usize)>,
    /// Columns whose observed entries went into `cal_downtime`, ascending.
    pub cal_downtime_cols: Vec<usize>,
    pub p_cal1: f64,
    pub p_cal2: f64,
    pub seed: u64,
}

impl CalibrationSplit {
    /// The input matrix with every calibration entry masked out — what the
    /// model is allowed to see while fitting.
    pub fn train_matrix(&self, x: &MaskedMatrix) -> Result<MaskedMatrix> {
        let mut held_out = self.cal_downtime.clone();
        held_out.extend_from_slice(&self.cal_scattered);
        x.with_masked_out(&held_out)
    }
}

/// Split the observed entries of `x` into train / downtime-calibration /
/// scattered-calibration.
///
/// Non-downtime columns are selected whole into the downtime family with
/// probability `p_cal1` (all their observed entries); each remaining observed
/// entry joins the scattered family with probability `p_cal2`; everything
/// else is training data. Deterministic under `seed`.
pub fn split_calibration(
    x: &MaskedMatrix,
    pattern: &MissingnessPattern,
    p_cal1: f64,
    p_cal2: f64,
    seed: u64,
) -> Result<CalibrationSplit> {
    check_probability("p_cal1", p_cal1)?;
    check_probability("p_cal2", p_cal2)?;
    if (pattern.m, pattern.n) != x.shape() {
        return Err(crate::dim_err!(
            "pattern is {}x{} but matrix is {}x{}",
            pattern.m,
            pattern.n,
            x.nrows(),
            x.ncols()
        ));
    }
    let mut rng = rng_from_seed(derive_seed(seed, tags::SPLIT));
    let mut cal_downtime_cols = Vec::new();
    for j in 0..x.ncols() {
        if pattern.is_downtime_col(j) {
            continue;
        }
        if rng.gen_bool(p_cal1) {
            cal_downtime_cols.push(j);
        }
    }
    let mut train = Vec::new();
    let mut cal_downtime = Vec::new();
    let mut cal_scattered = Vec::new();
    for i in 0..x.nrows() {
        for j in 0..x.ncols() {
            if !x.is_observed(i, j) {
                continue;
            }
            if cal_downtime_cols.binary_search(&j).is_ok() {
                cal_downtime.push((i, j));
            } else if rng.gen_bool(p_cal2) {
                cal_scattered.push((i, j));
            } else {
                train.push((i, j));
            }
        }
    }
    Ok(CalibrationSplit {
        train,
        cal_downtime,
        cal_scattered,
        cal_downtime_cols,
        p_cal1,
        p_cal2,
        seed,
    })
}
