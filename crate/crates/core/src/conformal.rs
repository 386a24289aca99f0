//! Split-conformal prediction intervals for imputed entries.
//!
//! Residuals on held-out calibration entries are grouped per row into two
//! families — whole-column holdouts standing in for downtime and entry-level
//! holdouts standing in for scattered gaps — and each family's empirical
//! quantile (with the +infinity atom of split conformal) yields symmetric
//! intervals around the imputed values of the matching test entries. Keeping
//! the families separate per row preserves the exchangeability argument that
//! makes the intervals distribution-free.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::masked::{EntryKind, MaskedMatrix};
use crate::missing::{CalibrationSplit, MissingnessPattern};
use crate::{dim_err, input_err};

/// Per-row calibration residuals, split by holdout family.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResiduals {
    /// Entry-level holdout residuals, one list per row.
    pub scattered: Vec<Vec<f64>>,
    /// Whole-column holdout residuals, one list per row.
    pub downtime: Vec<Vec<f64>>,
}

/// JSON-safe round-tripping for quantile vectors that may contain +infinity:
/// finite values stay numbers, infinities become the string "inf" (plain JSON
/// has no infinity literal and would silently degrade them to null).
mod quantile_repr {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.iter()
            .map(|&q| {
                if q.is_finite() {
                    Repr::Num(q)
                } else {
                    Repr::Str("inf".into())
                }
            })
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<Repr>::deserialize(d)?
            .into_iter()
            .map(|r| match r {
                Repr::Num(q) => Ok(q),
                Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
                Repr::Str(s) => Err(serde::de::Error::custom(format!(
                    "unrecognized quantile token {s:?}"
                ))),
            })
            .collect()
    }
}

/// Per-row conformal quantiles for the two missingness families.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RowQuantiles {
    /// Scattered-family quantile per row; may be infinite.
    #[serde(with = "quantile_repr")]
    pub q_sc: Vec<f64>,
    /// Downtime-family quantile per row; may be infinite.
    #[serde(with = "quantile_repr")]
    pub q_dt: Vec<f64>,
    /// Miscoverage level the quantiles target.
    pub alpha: f64,
    /// Scattered-family calibration count per row.
    pub n_cal_sc: Vec<usize>,
    /// Downtime-family calibration count per row.
    pub n_cal_dt: Vec<usize>,
}

impl RowQuantiles {
    pub fn rows(&self) -> usize {
        self.q_sc.len()
    }

    /// The half-width that applies to a test entry of the given kind.
    pub fn for_kind(&self, row: usize, kind: EntryKind) -> Result<f64> {
        if row >= self.rows() {
            return Err(input_err!("row {row} out of range for {} rows", self.rows()));
        }
        match kind {
            EntryKind::Scattered => Ok(self.q_sc[row]),
            EntryKind::Downtime => Ok(self.q_dt[row]),
            EntryKind::Observed => Err(input_err!(
                "observed entries do not get prediction intervals"
            )),
        }
    }
}

/// Symmetric prediction intervals around the imputed values. `lower` and
/// `upper` are defined (finite or infinite) exactly on the test entries and
/// NaN everywhere else.
#[derive(Debug, Clone)]
pub struct IntervalEstimate {
    pub x_hat: DMatrix<f64>,
    pub lower: DMatrix<f64>,
    pub upper: DMatrix<f64>,
    pub alpha: f64,
}

/// 1-based order-statistic index `ceil((1 - alpha) (n + 1))`. Values within
/// 1e-9 of an integer are snapped to it before the ceiling so that binary
/// floating point (e.g. `0.8 * 5` evaluating just above 4) cannot push an
/// exactly-integer index over the boundary.
fn quantile_index(alpha: f64, n: usize) -> usize {
    let t = (1.0 - alpha) * (n as f64 + 1.0);
    let snapped = if (t - t.round()).abs() < 1e-9 {
        t.round()
    } else {
        t.ceil()
    };
    snapped as usize
}

/// Conformal quantile of a residual list: the `ceil((1-alpha)(n+1))`-th order
/// statistic, or +infinity when that index exceeds the list length. Duplicates
/// are kept; an empty list yields an infinite (vacuous but valid) quantile.
pub fn conformal_quantile(residuals: &[f64], alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(input_err!("alpha must lie in (0, 1), got {alpha}"));
    }
    for r in residuals {
        if !r.is_finite() || *r < 0.0 {
            return Err(input_err!(
                "residuals must be finite and nonnegative, got {r}"
            ));
        }
    }
    if residuals.is_empty() {
        log::warn!("empty calibration family: the interval is infinite");
        return Ok(f64::INFINITY);
    }
    let n = residuals.len();
    let k = quantile_index(alpha, n);
    if k > n {
        return Ok(f64::INFINITY);
    }
    let mut sorted = residuals.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("residuals checked finite"));
    Ok(sorted[k - 1])
}

/// Absolute residuals `|X - X_hat|` on the calibration entries, grouped by
/// row and holdout family. Every calibration entry must be observed in `x`
/// and finite in `x_hat`.
pub fn calibration_residuals(
    x: &MaskedMatrix,
    x_hat: &DMatrix<f64>,
    split: &CalibrationSplit,
) -> Result<CalibrationResiduals> {
    if x.shape() != x_hat.shape() {
        return Err(dim_err!(
            "data is {:?} but the fit is {:?}",
            x.shape(),
            x_hat.shape()
        ));
    }
    let m = x.nrows();
    let mut out = CalibrationResiduals {
        scattered: vec![Vec::new(); m],
        downtime: vec![Vec::new(); m],
    };
    for (family, entries) in [
        (&mut out.downtime, &split.cal_downtime),
        (&mut out.scattered, &split.cal_scattered),
    ] {
        for &(i, j) in entries {
            let truth = x.observed_value(i, j).map_err(|_| {
                input_err!("calibration entry ({i}, {j}) is not observed in the data")
            })?;
            let fitted = x_hat[(i, j)];
            if !fitted.is_finite() {
                return Err(input_err!(
                    "fit is not finite at calibration entry ({i}, {j})"
                ));
            }
            family[i].push((truth - fitted).abs());
        }
    }
    Ok(out)
}

/// Per-row conformal quantiles for both families at level `alpha`.
pub fn row_quantiles(residuals: &CalibrationResiduals, alpha: f64) -> Result<RowQuantiles> {
    if residuals.scattered.len() != residuals.downtime.len() {
        return Err(dim_err!(
            "family row counts differ: {} vs {}",
            residuals.scattered.len(),
            residuals.downtime.len()
        ));
    }
    let m = residuals.scattered.len();
    let mut q = RowQuantiles {
        q_sc: Vec::with_capacity(m),
        q_dt: Vec::with_capacity(m),
        alpha,
        n_cal_sc: Vec::with_capacity(m),
        n_cal_dt: Vec::with_capacity(m),
    };
    for i in 0..m {
        q.q_sc.push(conformal_quantile(&residuals.scattered[i], alpha)?);
        q.q_dt.push(conformal_quantile(&residuals.downtime[i], alpha)?);
        q.n_cal_sc.push(residuals.scattered[i].len());
        q.n_cal_dt.push(residuals.downtime[i].len());
    }
    Ok(q)
}

/// Build symmetric intervals `x_hat +- q` on the test entries named by the
/// missingness pattern. The quantile family follows the regime that produced
/// each center, not just the pattern label: downtime columns take the row's
/// downtime-family quantile, and so do scattered entries that fall inside a
/// column the split held out whole — the fit saw no training data there, so
/// those centers are blind column reconstructions exactly like downtime ones,
/// and the entry-level calibration residuals (whose columns were partially
/// observed) would understate their error. Scattered entries in partially
/// trained columns take the scattered-family quantile.
pub fn build_intervals(
    x_hat: &DMatrix<f64>,
    quantiles: &RowQuantiles,
    split: &CalibrationSplit,
    pattern: &MissingnessPattern,
) -> Result<IntervalEstimate> {
    let (m, n) = x_hat.shape();
    if (pattern.m, pattern.n) != (m, n) {
        return Err(dim_err!(
            "pattern is {}x{} but the fit is {m}x{n}",
            pattern.m,
            pattern.n
        ));
    }
    if quantiles.rows() != m {
        return Err(dim_err!(
            "quantiles cover {} rows but the fit has {m}",
            quantiles.rows()
        ));
    }
    let mut lower = DMatrix::from_element(m, n, f64::NAN);
    let mut upper = DMatrix::from_element(m, n, f64::NAN);
    for &j in &pattern.downtime_cols {
        if j >= n {
            return Err(input_err!("downtime column {j} out of range"));
        }
        for i in 0..m {
            lower[(i, j)] = x_hat[(i, j)] - quantiles.q_dt[i];
            upper[(i, j)] = x_hat[(i, j)] + quantiles.q_dt[i];
        }
    }
    for &(i, j) in &pattern.scattered {
        if i >= m || j >= n {
            return Err(input_err!("scattered entry ({i}, {j}) out of range"));
        }
        if pattern.is_downtime_col(j) {
            return Err(input_err!(
                "entry ({i}, {j}) is listed as scattered inside downtime column {j}; \
                 it cannot be classified"
            ));
        }
        // cal_downtime_cols is sorted ascending by construction.
        let q = if split.cal_downtime_cols.binary_search(&j).is_ok() {
            quantiles.q_dt[i]
        } else {
            quantiles.q_sc[i]
        };
        lower[(i, j)] = x_hat[(i, j)] - q;
        upper[(i, j)] = x_hat[(i, j)] + q;
    }
    Ok(IntervalEstimate {
        x_hat: x_hat.clone(),
        lower,
        upper,
        alpha: quantiles.alpha,
    })
}

/// End-to-end helper: residuals, per-row quantiles, and intervals in one
/// call. `x` supplies the calibration truth; `x_hat` must come from a fit
/// that saw only the split's training portion.
pub fn conformal_intervals(
    x: &MaskedMatrix,
    x_hat: &DMatrix<f64>,
    split: &CalibrationSplit,
    pattern: &MissingnessPattern,
    alpha: f64,
) -> Result<(RowQuantiles, IntervalEstimate)> {
    let residuals = calibration_residuals(x, x_hat, split)?;
    let quantiles = row_quantiles(&residuals, alpha)?;
    let intervals = build_intervals(x_hat, &quantiles, split, pattern)?;
    Ok((quantiles, intervals))
}

fn entry_covered(
    est: &IntervalEstimate,
    truth: &DMatrix<f64>,
    i: usize,
    j: usize,
) -> Result<bool> {
    let t = truth[(i, j)];
    if !t.is_finite() {
        return Err(input_err!("truth is not finite at test entry ({i}, {j})"));
    }
    let (lo, hi) = (est.lower[(i, j)], est.upper[(i, j)]);
    if lo.is_nan() || hi.is_nan() {
        return Err(input_err!(
            "no interval is defined at test entry ({i}, {j})"
        ));
    }
    Ok(lo <= t && t <= hi)
}

/// Fraction of test entries whose truth lies inside the interval. Returns
/// NaN for an empty test set.
pub fn avg_coverage(
    est: &IntervalEstimate,
    truth: &DMatrix<f64>,
    test_set: &[(usize, usize)],
) -> Result<f64> {
    if truth.shape() != est.x_hat.shape() {
        return Err(dim_err!(
            "truth is {:?} but the fit is {:?}",
            truth.shape(),
            est.x_hat.shape()
        ));
    }
    if test_set.is_empty() {
        return Ok(f64::NAN);
    }
    let mut hits = 0usize;
    for &(i, j) in test_set {
        if entry_covered(est, truth, i, j)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / test_set.len() as f64)
}

/// Per-row coverage over the test set; rows with no test entries report
/// `None` rather than zero.
pub fn avg_coverage_rows(
    est: &IntervalEstimate,
    truth: &DMatrix<f64>,
    test_set: &[(usize, usize)],
) -> Result<Vec<Option<f64>>> {
    if truth.shape() != est.x_hat.shape() {
        return Err(dim_err!(
            "truth is {:?} but the fit is {:?}",
            truth.shape(),
            est.x_hat.shape()
        ));
    }
    let m = truth.nrows();
    let mut hits = vec![0usize; m];
    let mut counts = vec![0usize; m];
    for &(i, j) in test_set {
        if i >= m {
            return Err(input_err!("test entry row {i} out of range"));
        }
        counts[i] += 1;
        if entry_covered(est, truth, i, j)? {
            hits[i] += 1;
        }
    }
    Ok((0..m)
        .map(|i| {
            if counts[i] == 0 {
                None
            } else {
                Some(hits[i] as f64 / counts[i] as f64)
            }
        })
        .collect())
}

/// All test entries of a pattern (downtime first, then scattered).
pub fn pattern_test_set(pattern: &MissingnessPattern) -> Vec<(usize, usize)> {
    let mut set = Vec::new();
    for &j in &pattern.downtime_cols {
        for i in 0..pattern.m {
            set.push((i, j));
        }
    }
    set.extend_from_slice(&pattern.scattered);
    set
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::missing::{sample_mixed_missingness, split_calibration};
    use crate::softimpute::{softimpute_als, SoftImputeOpts};
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn quantile_matches_worked_examples() {
        assert_relative_eq!(
            conformal_quantile(&[1.0, 2.0, 3.0, 4.0], 0.5).unwrap(),
            3.0
        );
        assert!(conformal_quantile(&[1.0, 2.0, 3.0], 0.05)
            .unwrap()
            .is_infinite());
        for alpha in [0.1, 0.35, 0.8] {
            let q = conformal_quantile(&[2.5; 7], alpha).unwrap();
            if q.is_finite() {
                assert_relative_eq!(q, 2.5);
            }
        }
        assert!(conformal_quantile(&[], 0.1).unwrap().is_infinite());
        assert!(conformal_quantile(&[1.0], 1.0).is_err());
        assert!(conformal_quantile(&[1.0], 0.0).is_err());
        assert!(conformal_quantile(&[-1.0], 0.5).is_err());
        assert!(conformal_quantile(&[f64::NAN], 0.5).is_err());
    }

    /// Exact-arithmetic oracle: the quantile of the discrete distribution
    /// putting mass 1/(n+1) on each residual and on +infinity is the
    /// smallest sorted value whose cumulative count j satisfies
    /// 100 j >= (100 - 100 alpha)(n + 1), evaluated in integers.
    #[test]
    fn quantile_matches_exhaustive_integer_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for n in 0..=20usize {
            // Duplicates on purpose: draw from a small value set.
            let residuals: Vec<f64> =
                (0..n).map(|_| (rng.gen_range(0..6) as f64) / 3.0).collect();
            let mut sorted = residuals.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for a100 in 1..=99u64 {
                let alpha = a100 as f64 / 100.0;
                let got = conformal_quantile(&residuals, alpha).unwrap();
                let need = (100 - a100) * (n as u64 + 1);
                let mut expected = f64::INFINITY;
                for j in 1..=n as u64 {
                    if 100 * j >= need {
                        expected = sorted[(j - 1) as usize];
                        break;
                    }
                }
                assert_eq!(
                    got.to_bits(),
                    expected.to_bits(),
                    "n={n} alpha={alpha}: got {got}, oracle {expected}"
                );
            }
        }
    }

    #[test]
    fn quantile_is_monotone_in_alpha() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let residuals: Vec<f64> = (0..13).map(|_| rng.gen::<f64>() * 5.0).collect();
        let mut prev = f64::INFINITY;
        for step in 1..=19 {
            let alpha = step as f64 / 20.0;
            let q = conformal_quantile(&residuals, alpha).unwrap();
            assert!(q <= prev, "quantile increased as alpha grew");
            prev = q;
        }
    }

    #[test]
    fn adding_a_large_residual_never_shrinks_a_finite_quantile() {
        // The guarantee is conditional: the new residual must exceed the
        // current quantile, which rules out the infinite case (no finite
        // residual is larger than +inf, and there the quantile may
        // legitimately drop to a finite value).
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let mut checked = 0;
        for _ in 0..60 {
            let n = rng.gen_range(1..15);
            let residuals: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 3.0).collect();
            let alpha = rng.gen_range(0.05..0.95);
            let before = conformal_quantile(&residuals, alpha).unwrap();
            if !before.is_finite() {
                continue;
            }
            let mut extended = residuals.clone();
            let big = residuals.iter().cloned().fold(before, f64::max) + 1.0;
            extended.push(big);
            let after = conformal_quantile(&extended, alpha).unwrap();
            assert!(after >= before, "quantile shrank: {before} -> {after}");
            checked += 1;
        }
        assert!(checked >= 20, "too few finite-quantile cases exercised");
    }

    /// A split that holds nothing out, for exercising `build_intervals`
    /// against hand-built quantiles.
    fn no_holdout_split() -> CalibrationSplit {
        CalibrationSplit {
            train: Vec::new(),
            cal_downtime: Vec::new(),
            cal_scattered: Vec::new(),
            cal_downtime_cols: Vec::new(),
            p_cal1: 0.0,
            p_cal2: 0.0,
            seed: 0,
        }
    }

    fn random_setup(
        seed: u64,
        m: usize,
        n: usize,
    ) -> (MaskedMatrix, DMatrix<f64>, MissingnessPattern, CalibrationSplit) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let truth = DMatrix::from_fn(m, n, |_, _| rng.sample::<f64, _>(StandardNormal) + 4.0);
        let pattern = sample_mixed_missingness(m, n, 0.15, 0.1, seed).unwrap();
        let x = pattern.apply(&truth).unwrap();
        let split = split_calibration(&x, &pattern, 0.2, 0.1, seed).unwrap();
        let x_hat = DMatrix::from_fn(m, n, |i, j| {
            truth[(i, j)] + 0.3 * rng.sample::<f64, _>(StandardNormal)
        });
        (x, x_hat, pattern, split)
    }

    #[test]
    fn residuals_match_a_naive_loop() {
        let (x, x_hat, _, split) = random_setup(21, 12, 30);
        let got = calibration_residuals(&x, &x_hat, &split).unwrap();
        let mut expect_sc = vec![Vec::new(); 12];
        let mut expect_dt = vec![Vec::new(); 12];
        for &(i, j) in &split.cal_scattered {
            expect_sc[i].push((x.values()[(i, j)] - x_hat[(i, j)]).abs());
        }
        for &(i, j) in &split.cal_downtime {
            expect_dt[i].push((x.values()[(i, j)] - x_hat[(i, j)]).abs());
        }
        // Same multiset per row (orders may differ in principle).
        for i in 0..12 {
            let mut a = got.scattered[i].clone();
            let mut b = expect_sc[i].clone();
            a.sort_by(|x, y| x.partial_cmp(y).unwrap());
            b.sort_by(|x, y| x.partial_cmp(y).unwrap());
            assert_eq!(a, b);
            let mut a = got.downtime[i].clone();
            let mut b = expect_dt[i].clone();
            a.sort_by(|x, y| x.partial_cmp(y).unwrap());
            b.sort_by(|x, y| x.partial_cmp(y).unwrap());
            assert_eq!(a, b);
        }
    }

    #[test]
    fn perfect_fit_gives_zero_residuals_and_offset_gives_offset() {
        let (x, _, _, split) = random_setup(22, 8, 20);
        let perfect = calibration_residuals(&x, x.values(), &split).unwrap();
        for row in perfect.scattered.iter().chain(perfect.downtime.iter()) {
            for r in row {
                assert_eq!(*r, 0.0);
            }
        }
        let mut off = x.values().clone();
        for v in off.iter_mut() {
            *v += 2.5;
        }
        let shifted = calibration_residuals(&x, &off, &split).unwrap();
        for row in shifted.scattered.iter().chain(shifted.downtime.iter()) {
            for r in row {
                assert_relative_eq!(*r, 2.5, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn residuals_reject_unobserved_calibration_entries() {
        let (x, x_hat, pattern, mut split) = random_setup(23, 8, 20);
        let &bad_col = pattern
            .downtime_cols
            .first()
            .expect("pattern has downtime");
        split.cal_scattered.push((0, bad_col));
        assert!(calibration_residuals(&x, &x_hat, &split).is_err());
    }

    #[test]
    fn intervals_are_symmetric_with_constant_row_type_half_widths() {
        let (x, x_hat, pattern, split) = random_setup(24, 12, 40);
        let (quantiles, est) = conformal_intervals(&x, &x_hat, &split, &pattern, 0.2).unwrap();
        for &j in &pattern.downtime_cols {
            for i in 0..12 {
                let lo = est.lower[(i, j)];
                let hi = est.upper[(i, j)];
                if quantiles.q_dt[i].is_finite() {
                    assert_relative_eq!(hi - x_hat[(i, j)], x_hat[(i, j)] - lo, epsilon = 1e-12);
                    assert_relative_eq!(
                        hi - lo,
                        2.0 * quantiles.q_dt[i],
                        epsilon = 1e-12
                    );
                } else {
                    assert!(lo == f64::NEG_INFINITY && hi == f64::INFINITY);
                }
            }
        }
        let mut reclassified = 0;
        for &(i, j) in &pattern.scattered {
            // Scattered entries inside whole-column holdouts carry the
            // downtime-family width; the rest carry the scattered-family one.
            let q = if split.cal_downtime_cols.binary_search(&j).is_ok() {
                reclassified += 1;
                quantiles.q_dt[i]
            } else {
                quantiles.q_sc[i]
            };
            if q.is_finite() {
                assert_relative_eq!(
                    est.upper[(i, j)] - est.lower[(i, j)],
                    2.0 * q,
                    epsilon = 1e-12
                );
            }
        }
        assert!(reclassified > 0, "setup never exercised the holdout branch");
        // Off the test set the bounds are undefined.
        let (oi, oj) = split.train[0];
        assert!(est.lower[(oi, oj)].is_nan());
        assert!(est.upper[(oi, oj)].is_nan());
    }

    #[test]
    fn degenerate_and_infinite_quantiles_behave() {
        let x_hat = DMatrix::from_element(2, 3, 5.0);
        let pattern = MissingnessPattern {
            m: 2,
            n: 3,
            downtime_cols: vec![1],
            scattered: vec![(0, 2)],
            p: 0.0,
            p_prime: 0.0,
        };
        let quantiles = RowQuantiles {
            q_sc: vec![0.0, 0.0],
            q_dt: vec![f64::INFINITY, 1.5],
            alpha: 0.1,
            n_cal_sc: vec![10, 10],
            n_cal_dt: vec![0, 10],
        };
        let est = build_intervals(&x_hat, &quantiles, &no_holdout_split(), &pattern).unwrap();
        // Zero quantile: degenerate interval at the point estimate.
        assert_eq!(est.lower[(0, 2)], 5.0);
        assert_eq!(est.upper[(0, 2)], 5.0);
        // Infinite quantile: the whole line, always covers.
        assert_eq!(est.lower[(0, 1)], f64::NEG_INFINITY);
        assert_eq!(est.upper[(0, 1)], f64::INFINITY);
        let truth = DMatrix::from_element(2, 3, -1e9);
        let cov = avg_coverage(&est, &truth, &[(0, 1)]).unwrap();
        assert_eq!(cov, 1.0);
    }

    #[test]
    fn misclassified_scattered_entries_are_rejected() {
        let x_hat = DMatrix::zeros(2, 3);
        let pattern = MissingnessPattern {
            m: 2,
            n: 3,
            downtime_cols: vec![1],
            scattered: vec![(0, 1)],
            p: 0.0,
            p_prime: 0.0,
        };
        let quantiles = RowQuantiles {
            q_sc: vec![1.0, 1.0],
            q_dt: vec![1.0, 1.0],
            alpha: 0.1,
            n_cal_sc: vec![1, 1],
            n_cal_dt: vec![1, 1],
        };
        let err = build_intervals(&x_hat, &quantiles, &no_holdout_split(), &pattern).unwrap_err();
        assert!(err.to_string().contains("cannot be classified"));
    }

    #[test]
    fn scattered_entries_in_whole_column_holdouts_use_downtime_widths() {
        let x_hat = DMatrix::zeros(2, 4);
        let pattern = MissingnessPattern {
            m: 2,
            n: 4,
            downtime_cols: vec![0],
            scattered: vec![(0, 2), (1, 3)],
            p: 0.0,
            p_prime: 0.0,
        };
        let mut split = no_holdout_split();
        split.cal_downtime_cols = vec![2];
        let quantiles = RowQuantiles {
            q_sc: vec![1.0, 1.0],
            q_dt: vec![5.0, 5.0],
            alpha: 0.1,
            n_cal_sc: vec![3, 3],
            n_cal_dt: vec![3, 3],
        };
        let est = build_intervals(&x_hat, &quantiles, &split, &pattern).unwrap();
        // Column 2 was held out whole: its scattered test entry is a blind
        // reconstruction and gets the downtime-family width.
        assert_eq!(est.upper[(0, 2)] - est.lower[(0, 2)], 10.0);
        // Column 3 stayed in training: ordinary scattered width.
        assert_eq!(est.upper[(1, 3)] - est.lower[(1, 3)], 2.0);
        // Downtime columns are untouched by the split rule.
        assert_eq!(est.upper[(1, 0)] - est.lower[(1, 0)], 10.0);
    }

    #[test]
    fn coverage_endpoints() {
        let mut rng = ChaCha20Rng::seed_from_u64(25);
        let truth = DMatrix::from_fn(4, 6, |_, _| rng.sample::<f64, _>(StandardNormal));
        let pattern = MissingnessPattern {
            m: 4,
            n: 6,
            downtime_cols: vec![2],
            scattered: vec![(1, 4), (3, 0)],
            p: 0.0,
            p_prime: 0.0,
        };
        let test_set = pattern_test_set(&pattern);
        // All-infinite quantiles cover everything.
        let inf = RowQuantiles {
            q_sc: vec![f64::INFINITY; 4],
            q_dt: vec![f64::INFINITY; 4],
            alpha: 0.05,
            n_cal_sc: vec![0; 4],
            n_cal_dt: vec![0; 4],
        };
        let x_hat = DMatrix::zeros(4, 6);
        let est = build_intervals(&x_hat, &inf, &no_holdout_split(), &pattern).unwrap();
        assert_eq!(avg_coverage(&est, &truth, &test_set).unwrap(), 1.0);
        // Zero-width intervals at a wrong point estimate never cover
        // continuous noise.
        let zero = RowQuantiles {
            q_sc: vec![0.0; 4],
            q_dt: vec![0.0; 4],
            alpha: 0.05,
            n_cal_sc: vec![5; 4],
            n_cal_dt: vec![5; 4],
        };
        let est = build_intervals(&x_hat, &zero, &no_holdout_split(), &pattern).unwrap();
        assert_eq!(avg_coverage(&est, &truth, &test_set).unwrap(), 0.0);
        // Per-row: row 0 has downtime entries only; row 1 has both kinds;
        // rows without test entries report None.
        let rows = avg_coverage_rows(&est, &truth, &[(1, 4)]).unwrap();
        assert_eq!(rows[1], Some(0.0));
        assert_eq!(rows[0], None);
        // Empty test set: NaN overall.
        assert!(avg_coverage(&est, &truth, &[]).unwrap().is_nan());
    }

    #[test]
    fn quantiles_round_trip_through_json_including_infinities() {
        let q = RowQuantiles {
            q_sc: vec![0.25, f64::INFINITY],
            q_dt: vec![f64::INFINITY, 1.75e-300],
            alpha: 0.05,
            n_cal_sc: vec![3, 0],
            n_cal_dt: vec![0, 12],
        };
        let text = serde_json::to_string(&q).unwrap();
        let back: RowQuantiles = serde_json::from_str(&text).unwrap();
        assert_eq!(q.q_sc, back.q_sc);
        assert_eq!(q.q_dt[0], back.q_dt[0]);
        assert_eq!(q.q_dt[1].to_bits(), back.q_dt[1].to_bits());
        assert_eq!(q.n_cal_dt, back.n_cal_dt);
        assert!(serde_json::from_str::<RowQuantiles>(
            &text.replace("\"inf\"", "\"bogus\"")
        )
        .is_err());
    }

    #[test]
    fn split_fit_coverage_is_near_nominal() {
        // A full small pipeline: mask, split, fit on the training portion
        // only, calibrate, and check coverage on the truly-missing entries.
        let mut rng = ChaCha20Rng::seed_from_u64(26);
        let (m, n, r) = (30, 60, 2);
        let a = DMatrix::from_fn(m, r, |_, _| rng.sample::<f64, _>(StandardNormal));
        let b = DMatrix::from_fn(n, r, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut truth = &a * b.transpose();
        for v in truth.iter_mut() {
            *v += 0.2 * rng.sample::<f64, _>(StandardNormal);
        }
        let pattern = sample_mixed_missingness(m, n, 0.1, 0.05, 31).unwrap();
        let x = pattern.apply(&truth).unwrap();
        let split = split_calibration(&x, &pattern, 0.2, 0.1, 32).unwrap();
        let train = split.train_matrix(&x).unwrap();
        let fit = softimpute_als(&train, r, 1.0, SoftImputeOpts::default()).unwrap();
        let x_hat = fit.product();
        let alpha = 0.2;
        let (_, est) = conformal_intervals(&x, &x_hat, &split, &pattern, alpha).unwrap();
        let cov = avg_coverage(&est, &truth, &pattern_test_set(&pattern)).unwrap();
        assert!(
            cov >= 0.7,
            "coverage {cov} fell far below the nominal 0.8"
        );
    }
}
