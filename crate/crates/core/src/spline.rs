//! Periodic cubic B-spline bases and least-squares detrending fits.
//!
//! A single-period basis with `K` equally spaced knots over `[0, T)` is built
//! from the cardinal cubic B-spline by wrapping shifts modulo the period:
//! each of the `K` basis functions is the sum of all integer translates of
//! the cardinal spline that land on its knot modulo `T`. This construction is
//! C-squared everywhere (including the period seam) and inherits the
//! partition-of-unity property, so each basis row sums to one and no separate
//! intercept column is needed. Bases for several periods are stacked by
//! horizontal concatenation; every block after the first drops one column
//! because each block's row sum is 1, which would otherwise make the stacked
//! matrix rank-deficient.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masked::MaskedMatrix;
use crate::{dim_err, input_err};

/// An evaluated spline basis: `phi` is n x kappa with row t equal to the
/// basis functions at grid point t.
#[derive(Debug, Clone)]
pub struct PeriodicBasis {
    phi: DMatrix<f64>,
    periods: Vec<f64>,
    knots_per_period: Vec<usize>,
    time_grid: Vec<f64>,
}

/// Period/knot-count pairs as they appear in run configs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BasisSpec {
    pub periods: Vec<f64>,
    pub knots: Vec<usize>,
}

impl BasisSpec {
    /// Defaults for solar-irradiance-like data: the 27-day rotational and
    /// 365.25-day annual cycles.
    pub fn default_solar() -> Self {
        Self {
            periods: vec![27.0, 365.25],
            knots: vec![8, 6],
        }
    }

    /// Build the stacked basis over `time_grid`.
    pub fn build(&self, time_grid: &[f64]) -> Result<PeriodicBasis> {
        if self.periods.is_empty() || self.periods.len() != self.knots.len() {
            return Err(input_err!(
                "basis spec needs matching non-empty period and knot lists, got {} periods and {} knot counts",
                self.periods.len(),
                self.knots.len()
            ));
        }
        let blocks: Result<Vec<_>> = self
            .periods
            .iter()
            .zip(&self.knots)
            .map(|(&t, &k)| periodic_bspline_basis(t, k, time_grid))
            .collect();
        stack_periods(&blocks?)
    }
}

impl PeriodicBasis {
    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    /// Basis dimension kappa (number of columns of phi).
    pub fn dim(&self) -> usize {
        self.phi.ncols()
    }

    /// Number of evaluation points (rows of phi).
    pub fn len(&self) -> usize {
        self.phi.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.nrows() == 0
    }

    pub fn periods(&self) -> &[f64] {
        &self.periods
    }

    pub fn knots_per_period(&self) -> &[usize] {
        &self.knots_per_period
    }

    pub fn time_grid(&self) -> &[f64] {
        &self.time_grid
    }

    /// The mean surface `Theta^T Phi^T` (one row per coefficient column of
    /// `theta`, one column per grid point).
    pub fn mean_surface(&self, theta: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if theta.nrows() != self.dim() {
            return Err(dim_err!(
                "coefficients have {} rows but the basis has dimension {}",
                theta.nrows(),
                self.dim()
            ));
        }
        Ok(theta.transpose() * self.phi.transpose())
    }
}

/// Cardinal cubic B-spline on `[0, 4]` in knot units, normalized so integer
/// translates sum to one.
fn cardinal_cubic(x: f64) -> f64 {
    if x <= 0.0 || x >= 4.0 {
        0.0
    } else if x < 1.0 {
        x * x * x / 6.0
    } else if x < 2.0 {
        ((-3.0 * x * x + 12.0 * x - 12.0) * x + 4.0) / 6.0
    } else if x < 3.0 {
        ((3.0 * x * x - 24.0 * x + 60.0) * x - 44.0) / 6.0
    } else {
        let d = 4.0 - x;
        d * d * d / 6.0
    }
}

/// Evaluate the `num_knots` periodic basis functions at an arbitrary time.
///
/// Exposed so smoothness checks can probe off-grid points; grid construction
/// calls this per grid point.
pub fn evaluate_periodic(period: f64, num_knots: usize, t: f64) -> Result<Vec<f64>> {
    if num_knots < 4 {
        return Err(input_err!(
            "periodic cubic basis needs at least 4 knots, got {num_knots}"
        ));
    }
    if !(period > 0.0) || !period.is_finite() {
        return Err(input_err!("period must be positive and finite, got {period}"));
    }
    let k = num_knots;
    let h = period / k as f64;
    let u = t.rem_euclid(period);
    // Active cardinal splines have left knots i0-3 .. i0.
    let i0 = (u / h).floor() as i64;
    let mut row = vec![0.0; k];
    for d in 0..4i64 {
        let i = i0 - d;
        let s = u - i as f64 * h;
        let j = i.rem_euclid(k as i64) as usize;
        row[j] += cardinal_cubic(s / h);
    }
    Ok(row)
}

/// Build a single-period basis over the given evaluation grid.
pub fn periodic_bspline_basis(
    period: f64,
    num_knots: usize,
    time_grid: &[f64],
) -> Result<PeriodicBasis> {
    if time_grid.is_empty() {
        return Err(input_err!("time grid must be nonempty"));
    }
    let mut phi = DMatrix::zeros(time_grid.len(), num_knots);
    for (t_idx, &t) in time_grid.iter().enumerate() {
        let row = evaluate_periodic(period, num_knots, t)?;
        for (j, v) in row.into_iter().enumerate() {
            phi[(t_idx, j)] = v;
        }
    }
    Ok(PeriodicBasis {
        phi,
        periods: vec![period],
        knots_per_period: vec![num_knots],
        time_grid: time_grid.to_vec(),
    })
}

/// Horizontally stack bases sharing a grid; blocks after the first drop
/// their last column (each block's rows sum to one, so keeping all columns
/// would be rank-deficient).
pub fn stack_periods(bases: &[PeriodicBasis]) -> Result<PeriodicBasis> {
    let first = bases
        .first()
        .ok_or_else(|| input_err!("cannot stack an empty list of bases"))?;
    if bases.len() == 1 {
        return Ok(first.clone());
    }
    for b in &bases[1..] {
        if b.time_grid != first.time_grid {
            return Err(dim_err!(
                "stacked bases must share the evaluation grid ({} vs {} points or differing values)",
                first.time_grid.len(),
                b.time_grid.len()
            ));
        }
    }
    let n = first.len();
    let total: usize = bases.iter().map(|b| b.dim()).sum::<usize>() - (bases.len() - 1);
    let mut phi = DMatrix::zeros(n, total);
    let mut col = 0usize;
    for (b_idx, b) in bases.iter().enumerate() {
        let keep = if b_idx == 0 { b.dim() } else { b.dim() - 1 };
        phi.view_mut((0, col), (n, keep))
            .copy_from(&b.phi.view((0, 0), (n, keep)));
        col += keep;
    }
    Ok(PeriodicBasis {
        phi,
        periods: bases.iter().flat_map(|b| b.periods.clone()).collect(),
        knots_per_period: bases
            .iter()
            .flat_map(|b| b.knots_per_period.clone())
            .collect(),
        time_grid: first.time_grid.clone(),
    })
}

/// Default ridge used when an unridged normal-equation solve fails:
/// proportional to the average diagonal of the normal matrix.
pub fn ridge_guard(normal: &DMatrix<f64>) -> f64 {
    1e-8 * normal.trace() / normal.ncols() as f64
}

/// Ridge least squares with an explicit design matrix:
/// `argmin_Theta ||Y - Phi Theta||_F^2 + ridge ||Theta||_F^2`.
///
/// `y` has one row per grid point. Errors when the normal equations are
/// singular and `ridge` is zero.
pub fn ls_fit(phi: &DMatrix<f64>, y: &DMatrix<f64>, ridge: f64) -> Result<DMatrix<f64>> {
    if phi.nrows() != y.nrows() {
        return Err(dim_err!(
            "design has {} rows but responses have {}",
            phi.nrows(),
            y.nrows()
        ));
    }
    if ridge < 0.0 {
        return Err(input_err!("ridge must be nonnegative, got {ridge}"));
    }
    let mut normal = phi.transpose() * phi;
    for i in 0..normal.ncols() {
        normal[(i, i)] += ridge;
    }
    let chol = nalgebra::Cholesky::new(normal).ok_or_else(|| {
        Error::Conditioning(
            "spline normal equations are singular; supply a positive ridge".to_string(),
        )
    })?;
    Ok(chol.solve(&(phi.transpose() * y)))
}

/// Fit spline coefficients to complete rows: `Theta` (kappa x d) minimizing
/// `||Y^T - Phi Theta||_F^2 + ridge ||Theta||_F^2` for a d x n value grid `Y`.
pub fn spline_fit(y: &DMatrix<f64>, basis: &PeriodicBasis, ridge: f64) -> Result<DMatrix<f64>> {
    if y.ncols() != basis.len() {
        return Err(dim_err!(
            "data has {} columns but the basis grid has {} points",
            y.ncols(),
            basis.len()
        ));
    }
    ls_fit(&basis.phi, &y.transpose(), ridge)
}

/// Per-row spline fit using only observed entries; rows with too few
/// observations fall back to a small automatic ridge instead of failing.
///
/// Returns `Theta` (kappa x m). Used to detrend partially observed data
/// before any model fit exists.
pub fn spline_fit_masked(
    x: &MaskedMatrix,
    basis: &PeriodicBasis,
    ridge: f64,
) -> Result<DMatrix<f64>> {
    if x.ncols() != basis.len() {
        return Err(dim_err!(
            "data has {} columns but the basis grid has {} points",
            x.ncols(),
            basis.len()
        ));
    }
    if ridge < 0.0 {
        return Err(input_err!("ridge must be nonnegative, got {ridge}"));
    }
    let kappa = basis.dim();
    let mut theta = DMatrix::zeros(kappa, x.nrows());
    for i in 0..x.nrows() {
        let obs: Vec<usize> = (0..x.ncols()).filter(|&j| x.is_observed(i, j)).collect();
        if obs.is_empty() {
            return Err(input_err!(
                "row {i} has no observed entries to fit a trend on"
            ));
        }
        let phi_o = basis.phi.select_rows(&obs);
        let y_o = DMatrix::from_fn(obs.len(), 1, |k, _| x.values()[(i, obs[k])]);
        let mut normal = phi_o.transpose() * &phi_o;
        for d in 0..kappa {
            normal[(d, d)] += ridge;
        }
        let chol = match nalgebra::Cholesky::new(normal.clone()) {
            Some(c) => c,
            None => {
                // Sparse rows can make the per-row normal matrix singular;
                // retry with the guard ridge rather than aborting the fit.
                let guard = ridge_guard(&normal).max(1e-12);
                for d in 0..kappa {
                    normal[(d, d)] += guard;
                }
                nalgebra::Cholesky::new(normal).ok_or_else(|| {
                    Error::Conditioning(format!(
                        "trend fit for row {i} is singular even with the guard ridge"
                    ))
                })?
            }
        };
        let coef = chol.solve(&(phi_o.transpose() * y_o));
        theta.set_column(i, &coef.column(0));
    }
    Ok(theta)
}
