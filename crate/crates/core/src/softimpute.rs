//! Alternating ridge regression on a fill-in surrogate ("SoftImpute-ALS").
//!
//! Solves `min_{A,B} 1/2 ||P_Omega(X - A B^T)||_F^2 + (lambda/2)(||A||_F^2 +
//! ||B||_F^2)` by alternately replacing the unobserved entries with the
//! current low-rank fit and solving the resulting complete-data ridge
//! problems in closed form. Used as the baseline imputer and to warm-start
//! both pipeline steps.

use nalgebra::{Cholesky, DMatrix};

use crate::error::{Error, Result};
use crate::masked::MaskedMatrix;
use crate::{dim_err, input_err};

/// A rank-`r` factor pair with its fitting history.
#[derive(Debug, Clone)]
pub struct FactorPair {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub lambda: f64,
    pub rank: usize,
    /// Objective values: entry 0 at initialization, then one per sweep.
    pub trace: Vec<f64>,
}

impl FactorPair {
    /// The low-rank fit `A B^T`.
    pub fn product(&self) -> DMatrix<f64> {
        &self.a * self.b.transpose()
    }
}

/// Stopping controls for the alternating solver.
#[derive(Debug, Clone, Copy)]
pub struct SoftImputeOpts {
    /// Threshold on the squared relative change of `A B^T` between sweeps.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SoftImputeOpts {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: 500,
        }
    }
}

/// Evaluate `1/2 ||P_Omega(X - A B^T)||_F^2 + (lambda/2)(||A||_F^2 + ||B||_F^2)`.
pub fn factor_objective(
    x: &MaskedMatrix,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    lambda: f64,
) -> Result<f64> {
    if a.nrows() != x.nrows() || b.nrows() != x.ncols() || a.ncols() != b.ncols() {
        return Err(dim_err!(
            "factors ({}x{}, {}x{}) do not match data {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols(),
            x.nrows(),
            x.ncols()
        ));
    }
    let fit = a * b.transpose();
    let mut sq = 0.0;
    for j in 0..x.ncols() {
        for i in 0..x.nrows() {
            if x.is_observed(i, j) {
                let r = x.values()[(i, j)] - fit[(i, j)];
                sq += r * r;
            }
        }
    }
    Ok(0.5 * sq + 0.5 * lambda * (a.norm_squared() + b.norm_squared()))
}

/// Solve `(gram + lambda I) W = rhs` for SPD `gram`; with `lambda = 0` a
/// rank-deficient gram falls back to a pseudo-inverse solve.
pub(crate) fn ridge_solve(
    gram: &DMatrix<f64>,
    rhs: &DMatrix<f64>,
    lambda: f64,
) -> Result<DMatrix<f64>> {
    let mut reg = gram.clone();
    for i in 0..reg.nrows() {
        reg[(i, i)] += lambda;
    }
    if let Some(chol) = Cholesky::new(reg.clone()) {
        return Ok(chol.solve(rhs));
    }
    let pinv = reg
        .svd(true, true)
        .pseudo_inverse(1e-12 * gram.trace().max(1.0))
        .map_err(|e| Error::Conditioning(format!("ridge normal equations unsolvable: {e}")))?;
    Ok(pinv * rhs)
}

/// Top-`r` truncated SVD factors of the zero-filled data: `A = U_r S_r`,
/// used as the deterministic warm start (`B` starts at zero).
fn svd_warm_start(x: &MaskedMatrix, rank: usize) -> Result<DMatrix<f64>> {
    let z = x.zero_filled();
    let svd = z.svd(true, false);
    let u = svd.u.as_ref().expect("u requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| {
        svd.singular_values[j]
            .partial_cmp(&svd.singular_values[i])
            .expect("finite singular values")
    });
    let mut a = DMatrix::zeros(x.nrows(), rank);
    for (k, &idx) in order.iter().take(rank).enumerate() {
        let sigma = svd.singular_values[idx];
        a.set_column(k, &(u.column(idx) * sigma));
    }
    Ok(a)
}

/// Alternating ridge solver. Each sweep fills the missing entries with the
/// current fit, updates `B` against the fill, refreshes the fill, then
/// updates `A`; stops when the squared relative change of `A B^T` drops
/// below `tol` or after `max_iter` sweeps.
pub fn softimpute_als(
    x: &MaskedMatrix,
    rank: usize,
    lambda: f64,
    opts: SoftImputeOpts,
) -> Result<FactorPair> {
    if rank == 0 || rank > x.nrows().min(x.ncols()) {
        return Err(input_err!(
            "rank {rank} out of range for a {}x{} matrix",
            x.nrows(),
            x.ncols()
        ));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(input_err!("ridge weight must be finite and >= 0, got {lambda}"));
    }
    if !(opts.tol >= 0.0) {
        return Err(input_err!("tolerance must be >= 0, got {}", opts.tol));
    }
    if x.observed_count() == 0 {
        return Err(input_err!("no observed entries to fit"));
    }

    let mut a = svd_warm_start(x, rank)?;
    let mut b = DMatrix::<f64>::zeros(x.ncols(), rank);
    let mut product = &a * b.transpose();
    let mut trace = vec![factor_objective(x, &a, &b, lambda)?];
    let obj_scale = trace[0].max(1.0);

    for _ in 0..opts.max_iter {
        // B-half against the current fill. (A-half first would be stuck:
        // with B = 0 the filled matrix has zero projection onto B.)
        let filled = x.fill_missing_with(&product)?;
        let gram_a = a.transpose() * &a;
        let rhs_b = a.transpose() * &filled;
        b = ridge_solve(&gram_a, &rhs_b, lambda)?.transpose();
        #[cfg(debug_assertions)]
        {
            let after = factor_objective(x, &a, &b, lambda)?;
            debug_assert!(
                after <= *trace.last().expect("nonempty") + 1e-10 * obj_scale,
                "B half-update increased the objective"
            );
        }

        // A-half against the refreshed fill.
        let half_product = &a * b.transpose();
        let filled = x.fill_missing_with(&half_product)?;
        let gram_b = b.transpose() * &b;
        let rhs_a = b.transpose() * &filled.transpose();
        a = ridge_solve(&gram_b, &rhs_a, lambda)?.transpose();

        let new_product = &a * b.transpose();
        let obj = factor_objective(x, &a, &b, lambda)?;
        if !obj.is_finite() {
            return Err(Error::Conditioning(
                "alternating solver diverged to a non-finite objective".to_string(),
            ));
        }
        debug_assert!(
            obj <= *trace.last().expect("nonempty") + 1e-10 * obj_scale,
            "sweep increased the objective"
        );
        trace.push(obj);

        let denom = product.norm_squared();
        let delta = (&new_product - &product).norm_squared();
        product = new_product;
        if denom > 0.0 && delta / denom < opts.tol {
            break;
        }
    }

    Ok(FactorPair {
        a,
        b,
        lambda,
        rank,
        trace,
    })
}
