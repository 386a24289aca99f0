//! Step 1: regularized ECM for the model
//! `x_j ~ N(A b_j + Theta^T phi_j, Sigma)`, `Sigma = diag(Lambda) + L L^T`,
//! fit from partially observed columns.
//!
//! The E-step computes per-column conditional expectations given the
//! observed coordinates (through the Woodbury machinery in [`crate::spiked`]),
//! and the M-step cycles closed-form block updates for B, (L, Lambda), A,
//! and Theta. The fit's byproduct is `X1`: the input with scattered missing
//! entries replaced by conditional means while fully-missing (downtime)
//! columns stay missing for the downstream factorization step.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masked::MaskedMatrix;
use crate::seed::{derive_seed, rng_from_seed, tags};
use crate::softimpute::{ridge_solve, softimpute_als, SoftImputeOpts};
use crate::spiked::SpikedCov;
use crate::spline::{ls_fit, spline_fit_masked, PeriodicBasis};
use crate::{dim_err, input_err};

/// Hyperparameters for the ECM fit.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct Step1Hyper {
    /// Factor rank r of the mean term `A B^T`.
    pub rank: usize,
    /// Rank of the covariance spike `L` (capped at the row count).
    pub cov_rank: usize,
    /// Ridge weight on `||A||^2 + ||B||^2`.
    pub lambda: f64,
    /// Stop when the squared relative change of `A B^T` falls below this...
    pub eps_factors: f64,
    /// ...and the squared relative change of `Lambda` falls below this.
    pub eps_lambda: f64,
    pub max_iter: usize,
    /// Seed for the random entries of the initial `L`.
    pub init_seed: u64,
}

impl Default for Step1Hyper {
    fn default() -> Self {
        Self {
            rank: 10,
            cov_rank: 100,
            lambda: 5.0,
            eps_factors: 1e-7,
            eps_lambda: 1e-7,
            max_iter: 200,
            init_seed: 0,
        }
    }
}

impl Step1Hyper {
    fn validate(&self, m: usize, n: usize) -> Result<()> {
        if self.rank == 0 || self.rank > m.min(n) {
            return Err(input_err!(
                "factor rank {} out of range for a {m}x{n} matrix",
                self.rank
            ));
        }
        if self.cov_rank == 0 {
            return Err(input_err!("covariance rank must be at least 1"));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(input_err!("ridge weight must be finite and >= 0"));
        }
        if !(self.eps_factors >= 0.0) || !(self.eps_lambda >= 0.0) {
            return Err(input_err!("tolerances must be >= 0"));
        }
        Ok(())
    }

    /// Covariance rank actually used for an m x n matrix (capped, with a
    /// warning when the column count is the binding constraint).
    fn resolved_cov_rank(&self, m: usize, n: usize) -> usize {
        let mut r_l = self.cov_rank.min(m);
        if n < r_l {
            log::warn!(
                "covariance rank {} reduced to the column count {}",
                r_l,
                n
            );
            r_l = n;
        }
        r_l
    }
}

/// Fitted Step-1 model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Step1Model {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// Spline coefficients, one column per data row: mean `= A B^T + Theta^T Phi^T`.
    pub theta: DMatrix<f64>,
    pub lambda_diag: DVector<f64>,
    pub l: DMatrix<f64>,
    pub hyper: Step1Hyper,
    /// Penalized observed-data negative log-likelihood per sweep (plus the
    /// final value after the last update).
    pub trace: Vec<f64>,
    pub converged: bool,
}

impl Step1Model {
    pub fn covariance(&self) -> Result<SpikedCov> {
        SpikedCov::new(self.lambda_diag.clone(), self.l.clone())
    }

    /// Model mean `A B^T + Theta^T Phi^T`.
    pub fn mean(&self, basis: &PeriodicBasis) -> DMatrix<f64> {
        &self.a * self.b.transpose() + self.theta.transpose() * basis.phi().transpose()
    }

    /// E-step at the stored parameters.
    pub fn expectations(
        &self,
        x: &MaskedMatrix,
        basis: &PeriodicBasis,
    ) -> Result<CondExpectations> {
        let cov = self.covariance()?;
        estep(x, basis, &self.a, &self.b, &self.theta, &cov)
    }
}

/// Accumulated conditional expectations from one E-step: everything the
/// M-steps and the imputation consume.
#[derive(Debug, Clone)]
pub struct CondExpectations {
    /// `E[X | observed]`: observed entries pass through exactly, missing
    /// entries hold their conditional means.
    pub ex: DMatrix<f64>,
    /// `sum_j E[x~_j z_j^T]` (m x r_L), `x~` centered at the model mean.
    pub sxz: DMatrix<f64>,
    /// `sum_j E[z_j z_j^T]` (r_L x r_L).
    pub szz: DMatrix<f64>,
    /// Diagonal of `sum_j E[x~_j x~_j^T]`.
    pub sxx_diag: DVector<f64>,
    /// `sum_j log|Sigma_{O_j O_j}|`.
    pub obs_logdet: f64,
    /// `sum_j v_j^T Sigma_{O_j O_j}^{-1} v_j`.
    pub obs_quad: f64,
}

struct ColTerm {
    missing: Vec<usize>,
    /// Uncentered conditional means of the missing coordinates.
    cond_mean: DVector<f64>,
    /// Centered `E[x~_j]` over all m coordinates.
    xt: DVector<f64>,
    ez: DVector<f64>,
    ezz: DMatrix<f64>,
    /// `Cov_MM W_M` (|M| x r_L): the second-moment cross correction.
    cw: DMatrix<f64>,
    cov_diag: DVector<f64>,
    logdet: f64,
    quad: f64,
}

/// One E-step: per-column conditional moments (parallel across columns,
/// reduced in column order so results are bit-reproducible at any thread
/// count).
pub fn estep(
    x: &MaskedMatrix,
    basis: &PeriodicBasis,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    theta: &DMatrix<f64>,
    cov: &SpikedCov,
) -> Result<CondExpectations> {
    let (m, n) = x.shape();
    if basis.len() != n {
        return Err(dim_err!("basis grid has {} points for {n} columns", basis.len()));
    }
    if a.nrows() != m || b.nrows() != n || a.ncols() != b.ncols() || cov.dim() != m {
        return Err(dim_err!("model shapes inconsistent with {m}x{n} data"));
    }
    let mu = a * b.transpose() + theta.transpose() * basis.phi().transpose();
    let (sigma_z, w) = cov.latent_posterior()?;
    let r_l = cov.low_rank_dim();

    let terms: Result<Vec<ColTerm>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let mut obs = Vec::new();
            let mut missing = Vec::new();
            for i in 0..m {
                if x.is_observed(i, j) {
                    obs.push(i);
                } else {
                    missing.push(i);
                }
            }
            let v = DVector::from_iterator(
                obs.len(),
                obs.iter().map(|&i| x.values()[(i, j)] - mu[(i, j)]),
            );
            let cm = cov.conditional_moments(&v, &obs, &missing)?;

            let mut xt = DVector::zeros(m);
            for (k, &i) in obs.iter().enumerate() {
                xt[i] = v[k];
            }
            for (k, &i) in missing.iter().enumerate() {
                xt[i] = cm.mean_missing[k];
            }
            let ez = w.transpose() * &xt;
            let (cw, ezz, cov_diag, cond_mean) = if missing.is_empty() {
                (
                    DMatrix::zeros(0, r_l),
                    &sigma_z + &ez * ez.transpose(),
                    DVector::zeros(0),
                    DVector::zeros(0),
                )
            } else {
                let w_m = w.select_rows(&missing);
                let cw = &cm.cov_missing * &w_m;
                let ezz = &sigma_z + &ez * ez.transpose() + w_m.transpose() * &cw;
                let cov_diag = cm.cov_missing.diagonal();
                let cond_mean = DVector::from_iterator(
                    missing.len(),
                    missing
                        .iter()
                        .enumerate()
                        .map(|(k, &i)| mu[(i, j)] + cm.mean_missing[k]),
                );
                (cw, ezz, cov_diag, cond_mean)
            };
            Ok(ColTerm {
                missing,
                cond_mean,
                xt,
                ez,
                ezz,
                cw,
                cov_diag,
                logdet: cm.logdet_obs,
                quad: cm.quad_obs,
            })
        })
        .collect();
    let terms = terms?;

    let mut ex = x.zero_filled();
    let mut sxz = DMatrix::zeros(m, r_l);
    let mut szz = DMatrix::zeros(r_l, r_l);
    let mut sxx_diag = DVector::zeros(m);
    let mut obs_logdet = 0.0;
    let mut obs_quad = 0.0;
    for (j, t) in terms.iter().enumerate() {
        for (k, &i) in t.missing.iter().enumerate() {
            ex[(i, j)] = t.cond_mean[k];
        }
        sxz.ger(1.0, &t.xt, &t.ez, 1.0);
        for (k, &i) in t.missing.iter().enumerate() {
            for c in 0..r_l {
                sxz[(i, c)] += t.cw[(k, c)];
            }
        }
        szz += &t.ezz;
        for i in 0..m {
            sxx_diag[i] += t.xt[i] * t.xt[i];
        }
        for (k, &i) in t.missing.iter().enumerate() {
            sxx_diag[i] += t.cov_diag[k];
        }
        obs_logdet += t.logdet;
        obs_quad += t.quad;
    }
    // Observed entries pass through bit-exactly.
    for j in 0..n {
        for i in 0..m {
            if x.is_observed(i, j) {
                ex[(i, j)] = x.values()[(i, j)];
            }
        }
    }

    Ok(CondExpectations {
        ex,
        sxz,
        szz,
        sxx_diag,
        obs_logdet,
        obs_quad,
    })
}

/// B-step: per-column covariance-weighted ridge,
/// `B <- (E[X^T] - Phi Theta) Sigma^{-1} A (A^T Sigma^{-1} A + lambda I)^{-1}`,
/// with `Sigma` the pre-update covariance.
pub fn update_b1(
    exp: &CondExpectations,
    a: &DMatrix<f64>,
    theta: &DMatrix<f64>,
    cov: &SpikedCov,
    basis: &PeriodicBasis,
    lambda: f64,
) -> Result<DMatrix<f64>> {
    let resid = &exp.ex - theta.transpose() * basis.phi().transpose();
    let sa = cov.solve(a)?;
    let gram = a.transpose() * &sa;
    let rhs = sa.transpose() * &resid;
    Ok(ridge_solve(&gram, &rhs, lambda)?.transpose())
}

/// Factor-analysis M-step: `L <- Sxz Szz^{-1}` and the residual-variance
/// diagonal `Lambda_ii <- s_i / n` evaluated at the new `L`, floored at
/// `1e-10 * mean(Lambda)` to keep the covariance invertible.
pub fn update_l_lambda(exp: &CondExpectations) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let n = exp.ex.ncols() as f64;
    let chol = nalgebra::Cholesky::new(exp.szz.clone()).ok_or_else(|| {
        Error::Conditioning("latent second-moment matrix is not positive definite".into())
    })?;
    let l = chol.solve(&exp.sxz.transpose()).transpose();
    let lszz = &l * &exp.szz;
    let m = exp.sxx_diag.len();
    let mut lam = DVector::zeros(m);
    for i in 0..m {
        let cross: f64 = (0..l.ncols()).map(|c| l[(i, c)] * exp.sxz[(i, c)]).sum();
        let quad: f64 = (0..l.ncols()).map(|c| lszz[(i, c)] * l[(i, c)]).sum();
        lam[i] = (exp.sxx_diag[i] - 2.0 * cross + quad) / n;
    }
    let mean = lam.mean();
    if !(mean > 0.0) || !mean.is_finite() {
        return Err(Error::Conditioning(
            "residual variance collapsed to zero in the factor-analysis update".into(),
        ));
    }
    let floor = 1e-10 * mean;
    for v in lam.iter_mut() {
        if *v < floor {
            *v = floor;
        }
    }
    Ok((l, lam))
}

/// A-step: exact minimizer of the covariance-weighted penalized loss,
/// solving `A B^T B + lambda Sigma A = (E[X] - Theta^T Phi^T) B`.
///
/// With `lambda = 0` the weighting cancels and this is the plain
/// least-squares update; otherwise diagonalizing `B^T B = U diag(d) U^T`
/// decouples the system into one spiked solve `(d_k I + lambda Sigma)` per
/// transformed column.
pub fn update_a1(
    exp: &CondExpectations,
    b: &DMatrix<f64>,
    theta: &DMatrix<f64>,
    cov: &SpikedCov,
    basis: &PeriodicBasis,
    lambda: f64,
) -> Result<DMatrix<f64>> {
    let resid = &exp.ex - theta.transpose() * basis.phi().transpose();
    let gram = b.transpose() * b;
    if lambda == 0.0 {
        let rhs = b.transpose() * resid.transpose();
        return Ok(ridge_solve(&gram, &rhs, 0.0)?.transpose());
    }
    let eig = gram.symmetric_eigen();
    let rb_u = &resid * b * &eig.eigenvectors;
    let scaled_l = cov.factor() * lambda.sqrt();
    let m = resid.nrows();
    let r = b.ncols();
    let mut a_rot = DMatrix::zeros(m, r);
    for k in 0..r {
        let d_k = eig.eigenvalues[k].max(0.0);
        let diag = cov.diag().map(|v| lambda * v + d_k);
        let sys = SpikedCov::new(diag, scaled_l.clone())?;
        let rhs = DMatrix::from_column_slice(m, 1, rb_u.column(k).as_slice());
        let sol = sys.solve(&rhs)?;
        a_rot.set_column(k, &sol.column(0));
    }
    Ok(a_rot * eig.eigenvectors.transpose())
}

/// Theta-step: plain least squares of the factor residual on the basis
/// (the covariance weighting cancels exactly for this block).
pub fn update_theta1(
    exp: &CondExpectations,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    basis: &PeriodicBasis,
) -> Result<DMatrix<f64>> {
    let resid_t = exp.ex.transpose() - b * a.transpose();
    ls_fit(basis.phi(), &resid_t, 0.0)
}

/// Penalized observed-data negative log-likelihood (up to the constant):
/// `sum_j [log|Sigma_OO| + v^T Sigma_OO^{-1} v] + lambda (||A||^2 + ||B||^2)`.
pub fn step1_objective(
    x: &MaskedMatrix,
    basis: &PeriodicBasis,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    theta: &DMatrix<f64>,
    cov: &SpikedCov,
    lambda: f64,
) -> Result<f64> {
    let (m, n) = x.shape();
    let mu = a * b.transpose() + theta.transpose() * basis.phi().transpose();
    let pieces: Result<Vec<(f64, f64)>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let obs: Vec<usize> = (0..m).filter(|&i| x.is_observed(i, j)).collect();
            let v = DVector::from_iterator(
                obs.len(),
                obs.iter().map(|&i| x.values()[(i, j)] - mu[(i, j)]),
            );
            let cm = cov.conditional_moments(&v, &obs, &[])?;
            Ok((cm.logdet_obs, cm.quad_obs))
        })
        .collect();
    let mut total = lambda * (a.norm_squared() + b.norm_squared());
    for (ld, q) in pieces? {
        total += ld + q;
    }
    Ok(total)
}

/// Initialization: `Theta` from a masked per-row spline fit, `A`/`B` from
/// the alternating ridge solver on the detrended data, `Lambda = 1e-4`, and
/// `L` with i.i.d. N(0, 1e-4) entries from the seeded stream.
#[allow(clippy::type_complexity)]
pub fn step1_init(
    x: &MaskedMatrix,
    basis: &PeriodicBasis,
    hyper: &Step1Hyper,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
    let (m, _) = x.shape();
    let r_l = hyper.resolved_cov_rank(m, x.ncols());
    let theta = spline_fit_masked(x, basis, 0.0)?;
    let mean = theta.transpose() * basis.phi().transpose();
    let detrended = MaskedMatrix::new(x.values() - &mean, x.mask().clone())?;
    let si = softimpute_als(&detrended, hyper.rank, hyper.lambda, SoftImputeOpts::default())?;
    let lambda_diag = DVector::from_element(m, 1e-4);
    let mut rng = rng_from_seed(derive_seed(hyper.init_seed, tags::STEP1_INIT));
    let l = DMatrix::from_fn(m, r_l, |_, _| 1e-2 * rng.sample::<f64, _>(StandardNormal));
    Ok((si.a, si.b, theta, lambda_diag, l))
}

/// Result of a Step-1 fit.
#[derive(Debug, Clone)]
pub struct Step1Fit {
    pub model: Step1Model,
    /// Input with scattered missing entries replaced by conditional means;
    /// downtime columns stay missing.
    pub x1: MaskedMatrix,
    /// Full conditional-mean matrix `E[X | observed]` at the final model.
    pub cond_mean: DMatrix<f64>,
}

/// Run the ECM loop.
pub fn step1_fit(x: &MaskedMatrix, basis: &PeriodicBasis, hyper: &Step1Hyper) -> Result<Step1Fit> {
    let (m, n) = x.shape();
    hyper.validate(m, n)?;
    if basis.len() != n {
        return Err(dim_err!("basis grid has {} points for {n} columns", basis.len()));
    }
    x.require_observed_rows()?;

    let r_l = hyper.resolved_cov_rank(m, n);
    let mut hyper_used = hyper.clone();
    hyper_used.cov_rank = r_l;

    let (mut a, mut b, mut theta, mut lambda_diag, mut l) = step1_init(x, basis, hyper)?;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut prev_product = &a * b.transpose();

    for _ in 0..hyper.max_iter {
        let cov = SpikedCov::new(lambda_diag.clone(), l.clone())?;
        let exp = estep(x, basis, &a, &b, &theta, &cov)?;
        let obj = exp.obs_logdet
            + exp.obs_quad
            + hyper.lambda * (a.norm_squared() + b.norm_squared());
        if !obj.is_finite() {
            return Err(Error::Conditioning(
                "ECM objective became non-finite (divergence)".into(),
            ));
        }
        trace.push(obj);

        let b_new = update_b1(&exp, &a, &theta, &cov, basis, hyper.lambda)?;
        let (l_new, lam_new) = update_l_lambda(&exp)?;
        // The A-step's surrogate is weighted by the covariance as already
        // updated in this sweep; using the stale one would break descent.
        let cov_new = SpikedCov::new(lam_new.clone(), l_new.clone())?;
        let a_new = update_a1(&exp, &b_new, &theta, &cov_new, basis, hyper.lambda)?;
        let theta_new = update_theta1(&exp, &a_new, &b_new, basis)?;

        let product = &a_new * b_new.transpose();
        let prod_denom = prev_product.norm_squared();
        let factor_change = if prod_denom > 0.0 {
            (&product - &prev_product).norm_squared() / prod_denom
        } else {
            f64::INFINITY
        };
        let lam_denom = lambda_diag.norm_squared();
        let lam_change = if lam_denom > 0.0 {
            (&lam_new - &lambda_diag).norm_squared() / lam_denom
        } else {
            f64::INFINITY
        };

        a = a_new;
        b = b_new;
        theta = theta_new;
        l = l_new;
        lambda_diag = lam_new;
        prev_product = product;

        if factor_change < hyper.eps_factors && lam_change < hyper.eps_lambda {
            converged = true;
            break;
        }
    }

    // Final E-step: objective at the last parameters and the conditional
    // means used for imputation.
    let cov = SpikedCov::new(lambda_diag.clone(), l.clone())?;
    let exp = estep(x, basis, &a, &b, &theta, &cov)?;
    let obj =
        exp.obs_logdet + exp.obs_quad + hyper.lambda * (a.norm_squared() + b.norm_squared());
    if !obj.is_finite() {
        return Err(Error::Conditioning(
            "ECM objective became non-finite (divergence)".into(),
        ));
    }
    trace.push(obj);

    let downtime = x.downtime_columns();
    let mut values = x.values().clone();
    let mut mask = x.mask().clone();
    for j in 0..n {
        if downtime.binary_search(&j).is_ok() {
            continue;
        }
        for i in 0..m {
            if !mask[(i, j)] {
                values[(i, j)] = exp.ex[(i, j)];
                mask[(i, j)] = true;
            }
        }
    }
    let x1 = MaskedMatrix::new(values, mask)?;

    Ok(Step1Fit {
        model: Step1Model {
            a,
            b,
            theta,
            lambda_diag,
            l,
            hyper: hyper_used,
            trace,
            converged,
        },
        x1,
        cond_mean: exp.ex,
    })
}
