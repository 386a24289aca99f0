//! Step 2: low-rank completion with an autoregressive penalty on the
//! latent time trajectories.
//!
//! Starting from `X1` (scattered gaps already filled, downtime columns
//! still missing), this stage fits `X ~ A B^T` where each latent
//! coordinate of `B`, after removal of a periodic trend `Phi Theta`,
//! is encouraged to follow a per-coordinate AR(p) process. Every sweep
//! applies exact closed-form block updates to a majorizing surrogate
//! (missing entries filled with the current fit), so the penalized loss
//! is nonincreasing sweep over sweep.
//!
//! The loss is
//!
//! ```text
//! F2(A, B, Theta) = ||P(X1 - A B^T)||^2 + lambda1 ||A||^2
//!                   + lambda2 ||Bt_{0:p}||^2
//!                   + alpha * sum_w ||bt_{w+p} - sum_l Gamma_l bt_{w+p-l}||^2
//! ```
//!
//! where `Bt = B - Phi Theta` holds the detrended latent rows `bt_t`, `P`
//! keeps observed entries, and each `Gamma_l` is diagonal, so the AR penalty
//! acts coordinate by coordinate.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masked::MaskedMatrix;
use crate::softimpute::{ridge_solve, softimpute_als, FactorPair, SoftImputeOpts};
use crate::spline::{ls_fit, ridge_guard, PeriodicBasis};
use crate::{dim_err, input_err};

/// Which linear solver handles the `B` block each sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BUpdateMode {
    /// Banded direct solve up to rank 15, Gauss-Seidel sweep above that.
    Auto,
    /// Always solve the full banded normal system exactly.
    Vectorized,
    /// Always run one Gauss-Seidel pass over the time columns per sweep.
    Sequential,
}

impl BUpdateMode {
    fn use_vectorized(self, rank: usize) -> bool {
        match self {
            BUpdateMode::Auto => rank <= 15,
            BUpdateMode::Vectorized => true,
            BUpdateMode::Sequential => false,
        }
    }
}

/// Hyperparameters for the refinement stage.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct Step2Hyper {
    /// Factor rank r.
    pub rank: usize,
    /// Autoregression order p (>= 1).
    pub p: usize,
    /// Ridge weight on `||A||^2`.
    pub lambda1: f64,
    /// Proximal weight tying the first p detrended latent rows to zero.
    pub lambda2: f64,
    /// Weight of the AR penalty on the detrended latent rows.
    pub alpha: f64,
    /// Stop when the squared relative change of `A B^T` falls below this.
    pub tol: f64,
    pub max_iter: usize,
    /// Ridge for the internal SoftImpute warm start when no `init` is given.
    pub init_lambda: f64,
    /// Remove a periodic trend from `B` before penalizing (on by default);
    /// with `false` the trend is pinned at zero and never updated.
    pub detrend: bool,
    /// Re-estimate the AR coefficients every this many sweeps (0 = never;
    /// refreshing changes the objective, so loss traces are only comparable
    /// between refreshes).
    pub gamma_refresh_every: usize,
    pub b_update: BUpdateMode,
}

impl Default for Step2Hyper {
    fn default() -> Self {
        Step2Hyper {
            rank: 10,
            p: 2,
            lambda1: 3.0,
            lambda2: 3.0,
            alpha: 3.0,
            tol: 1e-8,
            max_iter: 300,
            init_lambda: 5.0,
            detrend: true,
            gamma_refresh_every: 0,
            b_update: BUpdateMode::Auto,
        }
    }
}

impl Step2Hyper {
    /// Check the hyperparameters against a data shape.
    pub fn validate(&self, nrows: usize, ncols: usize) -> Result<()> {
        if self.rank == 0 || self.rank > nrows.min(ncols) {
            return Err(input_err!(
                "rank {} out of range for a {nrows}x{ncols} matrix",
                self.rank
            ));
        }
        if self.p == 0 {
            return Err(input_err!("autoregression order p must be >= 1"));
        }
        if self.p >= ncols {
            return Err(input_err!(
                "autoregression order p = {} needs more than p time points, got {ncols}",
                self.p
            ));
        }
        if self.alpha > 0.0 && 2 * self.p > ncols {
            return Err(input_err!(
                "autoregression order p = {} exceeds half the {ncols} time points",
                self.p
            ));
        }
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("alpha", self.alpha),
            ("tol", self.tol),
            ("init_lambda", self.init_lambda),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(input_err!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if self.max_iter == 0 {
            return Err(input_err!("max_iter must be >= 1"));
        }
        Ok(())
    }
}

/// Provenance of one output entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    /// Present in the original data; copied through bit-exactly.
    Observed,
    /// Filled by the first-stage conditional mean (scattered entries).
    Step1,
    /// Filled by the second-stage low-rank fit (downtime entries).
    Step2,
}

impl SourceTag {
    /// Stable numeric code used in the CSV export.
    pub fn code(self) -> u8 {
        match self {
            SourceTag::Observed => 0,
            SourceTag::Step1 => 1,
            SourceTag::Step2 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(SourceTag::Observed),
            1 => Ok(SourceTag::Step1),
            2 => Ok(SourceTag::Step2),
            other => Err(input_err!("unknown source tag code {other}")),
        }
    }
}

/// A completed matrix together with per-entry provenance tags.
#[derive(Debug, Clone)]
pub struct ImputedMatrix {
    values: DMatrix<f64>,
    tags: DMatrix<u8>,
}

impl ImputedMatrix {
    pub fn new(values: DMatrix<f64>, tags: DMatrix<u8>) -> Result<Self> {
        if values.shape() != tags.shape() {
            return Err(dim_err!(
                "values are {:?} but tags are {:?}",
                values.shape(),
                tags.shape()
            ));
        }
        for t in tags.iter() {
            SourceTag::from_code(*t)?;
        }
        Ok(ImputedMatrix { values, tags })
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn tag(&self, i: usize, j: usize) -> SourceTag {
        SourceTag::from_code(self.tags[(i, j)]).expect("tags validated on construction")
    }

    /// Raw tag codes, same layout as `values`.
    pub fn tag_codes(&self) -> &DMatrix<u8> {
        &self.tags
    }

    pub fn count(&self, tag: SourceTag) -> usize {
        self.tags.iter().filter(|t| **t == tag.code()).count()
    }
}

/// Fitted second-stage model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Step2Model {
    /// Row factors, m x r.
    pub a: DMatrix<f64>,
    /// Time factors in original coordinates (trend included), n x r.
    pub b: DMatrix<f64>,
    /// Periodic-trend coefficients for the latent rows, kappa x r.
    pub theta: DMatrix<f64>,
    /// Diagonal AR coefficients; row l-1 holds the lag-l diagonal, p x r.
    pub gamma: DMatrix<f64>,
    pub hyper: Step2Hyper,
    /// Loss values: entry 0 at initialization, then one per sweep. After a
    /// coefficient refresh the objective itself changes, so consecutive
    /// entries are only comparable between refreshes.
    pub loss_trace: Vec<f64>,
    /// Per-sweep loss decreases, evaluated under the AR coefficients active
    /// during that sweep (equals the trace difference except right after a
    /// refresh).
    pub delta_trace: Vec<f64>,
    /// Sweep indices (1-based) after which the AR coefficients were
    /// re-estimated.
    pub gamma_refreshes: Vec<usize>,
    pub converged: bool,
}

impl Step2Model {
    /// The completed low-rank surface `A B^T`.
    pub fn product(&self) -> DMatrix<f64> {
        &self.a * self.b.transpose()
    }

    /// Latent rows with the periodic trend removed, n x r.
    pub fn b_detrended(&self, basis: &PeriodicBasis) -> Result<DMatrix<f64>> {
        if basis.len() != self.b.nrows() || basis.dim() != self.theta.nrows() {
            return Err(dim_err!(
                "basis ({} points, dim {}) does not match B ({} rows) / Theta ({} rows)",
                basis.len(),
                basis.dim(),
                self.b.nrows(),
                self.theta.nrows()
            ));
        }
        Ok(&self.b - basis.phi() * &self.theta)
    }
}

/// Signed AR filter tap: the residual at window `w` is
/// `sum_{j=0..=p} tap(j) .* bt_{w+p-j}` with `tap(0) = +1` and
/// `tap(j) = -gamma_j` for lags `j >= 1`.
fn ar_tap(gamma: &DMatrix<f64>, j: usize, coord: usize) -> f64 {
    if j == 0 {
        1.0
    } else {
        -gamma[(j - 1, coord)]
    }
}

/// AR residuals of the detrended latent rows: `(n - p) x r`, row `w` is
/// `bt_{w+p} - sum_l gamma_l .* bt_{w+p-l}`.
fn ar_residuals(b_tilde: &DMatrix<f64>, gamma: &DMatrix<f64>) -> DMatrix<f64> {
    let n = b_tilde.nrows();
    let r = b_tilde.ncols();
    let p = gamma.nrows();
    let windows = n.saturating_sub(p);
    let mut g = DMatrix::zeros(windows, r);
    for w in 0..windows {
        for i in 0..r {
            let mut s = 0.0;
            for j in 0..=p {
                s += ar_tap(gamma, j, i) * b_tilde[(w + p - j, i)];
            }
            g[(w, i)] = s;
        }
    }
    g
}

/// Estimate per-coordinate AR(p) coefficients from detrended latent rows by
/// least squares over the lag windows whose p+1 consecutive time points are
/// all outside `downtime_cols`.
///
/// Returns a p x r matrix whose row l-1 holds the lag-l coefficients.
pub fn estimate_gamma(
    b_tilde: &DMatrix<f64>,
    p: usize,
    downtime_cols: &[usize],
) -> Result<DMatrix<f64>> {
    let n = b_tilde.nrows();
    let r = b_tilde.ncols();
    if p == 0 {
        return Err(input_err!("autoregression order p must be >= 1"));
    }
    if 2 * p > n {
        return Err(input_err!(
            "autoregression order p = {p} exceeds half the {n} time points"
        ));
    }
    let mut is_down = vec![false; n];
    for &c in downtime_cols {
        if c >= n {
            return Err(input_err!(
                "downtime column {c} out of range for {n} time points"
            ));
        }
        is_down[c] = true;
    }
    let windows: Vec<usize> = (0..n - p)
        .filter(|&w| (w..=w + p).all(|t| !is_down[t]))
        .collect();
    if windows.is_empty() {
        return Err(input_err!(
            "no complete autoregression windows: downtime is too dense for lag order {p}"
        ));
    }
    let mut gamma = DMatrix::zeros(p, r);
    for i in 0..r {
        let mut normal = DMatrix::zeros(p, p);
        let mut rhs = DVector::zeros(p);
        for &w in &windows {
            for l in 1..=p {
                let bl = b_tilde[(w + p - l, i)];
                rhs[l - 1] += b_tilde[(w + p, i)] * bl;
                for q in l..=p {
                    normal[(l - 1, q - 1)] += b_tilde[(w + p - q, i)] * bl;
                }
            }
        }
        for l in 0..p {
            for q in 0..l {
                normal[(l, q)] = normal[(q, l)];
            }
        }
        let chol = Cholesky::new(normal).ok_or_else(|| {
            Error::Conditioning(format!(
                "autoregression normal matrix is singular for latent coordinate {i}; \
                 the coordinate may be degenerate or the lag order too large"
            ))
        })?;
        let coeffs = chol.solve(&rhs);
        for l in 0..p {
            gamma[(l, i)] = coeffs[l];
        }
    }
    Ok(gamma)
}

/// Evaluate the stage loss given the detrended state.
fn f2_value(
    x1: &MaskedMatrix,
    phi: &DMatrix<f64>,
    a: &DMatrix<f64>,
    b_tilde: &DMatrix<f64>,
    theta: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    hyper: &Step2Hyper,
) -> f64 {
    let b_full = b_tilde + phi * theta;
    let product = a * b_full.transpose();
    let mask = x1.mask();
    let values = x1.values();
    let mut data = 0.0;
    for j in 0..x1.ncols() {
        for i in 0..x1.nrows() {
            if mask[(i, j)] {
                let d = values[(i, j)] - product[(i, j)];
                data += d * d;
            }
        }
    }
    let ridge_a = hyper.lambda1 * a.norm_squared();
    let mut trend_prox = 0.0;
    for t in 0..hyper.p.min(b_tilde.nrows()) {
        for i in 0..b_tilde.ncols() {
            trend_prox += b_tilde[(t, i)] * b_tilde[(t, i)];
        }
    }
    trend_prox *= hyper.lambda2;
    let ar = if hyper.alpha > 0.0 {
        hyper.alpha * ar_residuals(b_tilde, gamma).norm_squared()
    } else {
        0.0
    };
    data + ridge_a + trend_prox + ar
}

/// Penalized completion loss at `(A, B, Theta)` with `B` in original
/// coordinates (trend included).
pub fn loss_f2(
    x1: &MaskedMatrix,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    theta: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    basis: &PeriodicBasis,
    hyper: &Step2Hyper,
) -> Result<f64> {
    check_state_shapes(x1, basis, a, b, theta, hyper)?;
    if gamma.nrows() != hyper.p || gamma.ncols() != hyper.rank {
        return Err(dim_err!(
            "AR coefficients are {:?}, expected {}x{}",
            gamma.shape(),
            hyper.p,
            hyper.rank
        ));
    }
    let b_tilde = b - basis.phi() * theta;
    Ok(f2_value(x1, basis.phi(), a, &b_tilde, theta, gamma, hyper))
}

fn check_state_shapes(
    x1: &MaskedMatrix,
    basis: &PeriodicBasis,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    theta: &DMatrix<f64>,
    hyper: &Step2Hyper,
) -> Result<()> {
    let (m, n) = x1.shape();
    if basis.len() != n {
        return Err(dim_err!(
            "basis covers {} time points but the data has {n}",
            basis.len()
        ));
    }
    if a.nrows() != m || a.ncols() != hyper.rank {
        return Err(dim_err!(
            "A is {:?}, expected {m}x{}",
            a.shape(),
            hyper.rank
        ));
    }
    if b.nrows() != n || b.ncols() != hyper.rank {
        return Err(dim_err!(
            "B is {:?}, expected {n}x{}",
            b.shape(),
            hyper.rank
        ));
    }
    if theta.nrows() != basis.dim() || theta.ncols() != hyper.rank {
        return Err(dim_err!(
            "Theta is {:?}, expected {}x{}",
            theta.shape(),
            basis.dim(),
            hyper.rank
        ));
    }
    Ok(())
}

/// Symmetric positive-definite banded matrix in lower-band storage:
/// `band[(d, c)] = M[c + d, c]` for `d <= bandwidth`. Factors in place.
struct BandedSpd {
    n: usize,
    bw: usize,
    band: DMatrix<f64>,
}

impl BandedSpd {
    fn zeros(n: usize, bw: usize) -> Self {
        BandedSpd {
            n,
            bw,
            band: DMatrix::zeros(bw + 1, n),
        }
    }

    /// Add to entry (row, col) of the lower half; requires row >= col and
    /// row - col <= bandwidth.
    fn add(&mut self, row: usize, col: usize, v: f64) {
        debug_assert!(row >= col && row - col <= self.bw);
        self.band[(row - col, col)] += v;
    }

    /// In-place banded Cholesky; errors when the matrix is not positive
    /// definite.
    fn cholesky_in_place(&mut self) -> Result<()> {
        for c in 0..self.n {
            let start = c.saturating_sub(self.bw);
            let mut d = self.band[(0, c)];
            for k in start..c {
                let l = self.band[(c - k, k)];
                d -= l * l;
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::Conditioning(format!(
                    "latent-row normal system is not positive definite at index {c}; \
                     positive lambda2 and alpha (or a full-rank A) are required"
                )));
            }
            let d = d.sqrt();
            self.band[(0, c)] = d;
            let last = (c + self.bw).min(self.n - 1);
            for s in c + 1..=last {
                let mut v = self.band[(s - c, c)];
                for k in start.max(s.saturating_sub(self.bw))..c {
                    v -= self.band[(s - k, k)] * self.band[(c - k, k)];
                }
                self.band[(s - c, c)] = v / d;
            }
        }
        Ok(())
    }

    /// Solve `M x = b` after `cholesky_in_place`.
    fn solve_in_place(&self, x: &mut DVector<f64>) {
        for c in 0..self.n {
            let start = c.saturating_sub(self.bw);
            let mut v = x[c];
            for k in start..c {
                v -= self.band[(c - k, k)] * x[k];
            }
            x[c] = v / self.band[(0, c)];
        }
        for c in (0..self.n).rev() {
            let last = (c + self.bw).min(self.n - 1);
            let mut v = x[c];
            for s in c + 1..=last {
                v -= self.band[(s - c, c)] * x[s];
            }
            x[c] = v / self.band[(0, c)];
        }
    }
}

/// Assemble the banded normal system of the vectorized latent-row update,
/// `I (x) A^T A + lambda2 Q (x) I + alpha C0^T C0` over `vec(Bt^T)` with the
/// scalar index `t*r + i`.
fn assemble_b_system(
    ata: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    lambda2: f64,
    alpha: f64,
    n: usize,
) -> BandedSpd {
    let r = ata.ncols();
    let p = gamma.nrows();
    let bw = if alpha > 0.0 {
        (p * r).max(r.saturating_sub(1))
    } else {
        r.saturating_sub(1)
    };
    let mut band = BandedSpd::zeros(n * r, bw);
    for t in 0..n {
        let base = t * r;
        for i in 0..r {
            for i2 in 0..=i {
                band.add(base + i, base + i2, ata[(i, i2)]);
            }
            if t < p {
                band.add(base + i, base + i, lambda2);
            }
        }
    }
    if alpha > 0.0 && n > p {
        for w in 0..n - p {
            for j in 0..=p {
                let row_t = (w + p - j) * r;
                for k in j..=p {
                    let col_t = (w + p - k) * r;
                    for i in 0..r {
                        band.add(
                            row_t + i,
                            col_t + i,
                            alpha * ar_tap(gamma, j, i) * ar_tap(gamma, k, i),
                        );
                    }
                }
            }
        }
    }
    band
}

/// Exact solve of the latent-row block: minimizes
/// `||R - A Bt^T||^2 + lambda2 ||Bt_{0:p}||^2 + alpha ||C0 vec(Bt^T)||^2`
/// through one banded Cholesky factorization.
fn b2_core_vectorized(
    resid: &DMatrix<f64>,
    a: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    lambda2: f64,
    alpha: f64,
) -> Result<DMatrix<f64>> {
    let n = resid.ncols();
    let r = a.ncols();
    let ata = a.transpose() * a;
    let atr = a.transpose() * resid;
    let mut band = assemble_b_system(&ata, gamma, lambda2, alpha, n);
    let mut rhs = DVector::zeros(n * r);
    for t in 0..n {
        for i in 0..r {
            rhs[t * r + i] = atr[(i, t)];
        }
    }
    band.cholesky_in_place()?;
    band.solve_in_place(&mut rhs);
    Ok(DMatrix::from_fn(n, r, |t, i| rhs[t * r + i]))
}

/// One Gauss-Seidel pass over the time columns of the same quadratic,
/// updating each r-vector `bt_t` exactly given the current others.
fn b2_core_sequential(
    resid: &DMatrix<f64>,
    a: &DMatrix<f64>,
    b_start: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    lambda2: f64,
    alpha: f64,
) -> Result<DMatrix<f64>> {
    let n = resid.ncols();
    let r = a.ncols();
    let p = gamma.nrows();
    let ata = a.transpose() * a;
    let atr = a.transpose() * resid;
    let mut b = b_start.clone();
    let windows = n.saturating_sub(p);
    for t in 0..n {
        let mut system = ata.clone();
        let mut rhs = DVector::from_fn(r, |i, _| atr[(i, t)]);
        if t < p {
            for i in 0..r {
                system[(i, i)] += lambda2;
            }
        }
        if alpha > 0.0 && windows > 0 {
            let w_lo = t.saturating_sub(p);
            let w_hi = t.min(windows - 1);
            for w in w_lo..=w_hi {
                let jt = w + p - t;
                for i in 0..r {
                    let ct = ar_tap(gamma, jt, i);
                    system[(i, i)] += alpha * ct * ct;
                    let mut partial = 0.0;
                    for j in 0..=p {
                        if j != jt {
                            partial += ar_tap(gamma, j, i) * b[(w + p - j, i)];
                        }
                    }
                    rhs[i] -= alpha * ct * partial;
                }
            }
        }
        let chol = Cholesky::new(system).ok_or_else(|| {
            Error::Conditioning(format!(
                "latent-row system for time {t} is not positive definite; \
                 positive lambda2 and alpha (or a full-rank A) are required"
            ))
        })?;
        let sol = chol.solve(&rhs);
        for i in 0..r {
            b[(t, i)] = sol[i];
        }
    }
    Ok(b)
}

/// Surrogate residual for the latent-row update: missing entries filled with
/// the current fit, then the trend contribution removed.
fn surrogate_residual(
    x1: &MaskedMatrix,
    phi: &DMatrix<f64>,
    a: &DMatrix<f64>,
    b_tilde: &DMatrix<f64>,
    theta: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let trend = phi * theta;
    let b_full = b_tilde + &trend;
    let fill = x1.fill_missing_with(&(a * b_full.transpose()))?;
    Ok(fill - a * trend.transpose())
}

/// Exact trend-coefficient update: with the fill taken at the current state,
/// minimizes `||X* - A (Bt + Phi Theta)^T||^2` over `Theta`.
fn theta_core(
    x1: &MaskedMatrix,
    phi: &DMatrix<f64>,
    a: &DMatrix<f64>,
    b_tilde: &DMatrix<f64>,
    theta_prev: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let b_full = b_tilde + phi * theta_prev;
    let fill = x1.fill_missing_with(&(a * b_full.transpose()))?;
    let resid = fill - a * b_tilde.transpose();
    let projected = ls_fit(phi, &(resid.transpose() * a), 0.0)?;
    let ata = a.transpose() * a;
    Ok(ridge_solve(&ata, &projected.transpose(), 0.0)?.transpose())
}

/// Public trend update: one exact majorize-minimize step on `Theta`.
pub fn update_theta2(
    x1: &MaskedMatrix,
    a: &DMatrix<f64>,
    b_tilde: &DMatrix<f64>,
    theta_prev: &DMatrix<f64>,
    basis: &PeriodicBasis,
) -> Result<DMatrix<f64>> {
    check_update_shapes(x1, basis, a, b_tilde, theta_prev)?;
    theta_core(x1, basis.phi(), a, b_tilde, theta_prev)
}

/// Public latent-row update, banded direct solve.
pub fn update_b2_vectorized(
    x1: &MaskedMatrix,
    a: &DMatrix<f64>,
    b_tilde_prev: &DMatrix<f64>,
    theta: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    basis: &PeriodicBasis,
    hyper: &Step2Hyper,
) -> Result<DMatrix<f64>> {
    check_update_shapes(x1, basis, a, b_tilde_prev, theta)?;
    let resid = surrogate_residual(x1, basis.phi(), a, b_tilde_prev, theta)?;
    b2_core_vectorized(&resid, a, gamma, hyper.lambda2, hyper.alpha)
}

/// Public latent-row update, one Gauss-Seidel pass starting from the
/// previous rows.
pub fn update_b2_sequential(
    x1: &MaskedMatrix,
    a: &DMatrix<f64>,
    b_tilde_prev: &DMatrix<f64>,
    theta: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    basis: &PeriodicBasis,
    hyper: &Step2Hyper,
) -> Result<DMatrix<f64>> {
    check_update_shapes(x1, basis, a, b_tilde_prev, theta)?;
    let resid = surrogate_residual(x1, basis.phi(), a, b_tilde_prev, theta)?;
    b2_core_sequential(&resid, a, b_tilde_prev, gamma, hyper.lambda2, hyper.alpha)
}

/// Public row-factor update: fills the missing entries with the current fit
/// and solves the ridge problem `A <- X* B (B^T B + lambda1 I)^{-1}`.
pub fn update_a2(
    x1: &MaskedMatrix,
    a_prev: &DMatrix<f64>,
    b_full: &DMatrix<f64>,
    lambda1: f64,
) -> Result<DMatrix<f64>> {
    if a_prev.nrows() != x1.nrows() || b_full.nrows() != x1.ncols() {
        return Err(dim_err!(
            "factors {:?} / {:?} do not match a {:?} matrix",
            a_prev.shape(),
            b_full.shape(),
            x1.shape()
        ));
    }
    if a_prev.ncols() != b_full.ncols() {
        return Err(dim_err!(
            "factor ranks differ: {} vs {}",
            a_prev.ncols(),
            b_full.ncols()
        ));
    }
    let fill = x1.fill_missing_with(&(a_prev * b_full.transpose()))?;
    let gram = b_full.transpose() * b_full;
    Ok(ridge_solve(&gram, &(b_full.transpose() * fill.transpose()), lambda1)?.transpose())
}

fn check_update_shapes(
    x1: &MaskedMatrix,
    basis: &PeriodicBasis,
    a: &DMatrix<f64>,
    b_tilde: &DMatrix<f64>,
    theta: &DMatrix<f64>,
) -> Result<()> {
    let (m, n) = x1.shape();
    if basis.len() != n {
        return Err(dim_err!(
            "basis covers {} time points but the data has {n}",
            basis.len()
        ));
    }
    let r = a.ncols();
    if a.nrows() != m {
        return Err(dim_err!("A is {:?}, expected {m} rows", a.shape()));
    }
    if b_tilde.nrows() != n || b_tilde.ncols() != r {
        return Err(dim_err!(
            "latent rows are {:?}, expected {n}x{r}",
            b_tilde.shape()
        ));
    }
    if theta.nrows() != basis.dim() || theta.ncols() != r {
        return Err(dim_err!(
            "Theta is {:?}, expected {}x{r}",
            theta.shape(),
            basis.dim()
        ));
    }
    Ok(())
}

/// Analytic block gradients of the stage loss at a detrended state:
/// `(dF/dA, dF/dBt, dF/dTheta)`.
pub(crate) fn block_gradients(
    x1: &MaskedMatrix,
    phi: &DMatrix<f64>,
    a: &DMatrix<f64>,
    b_tilde: &DMatrix<f64>,
    theta: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    hyper: &Step2Hyper,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let (m, n) = x1.shape();
    let r = a.ncols();
    let p = gamma.nrows();
    let b_full = b_tilde + phi * theta;
    let product = a * b_full.transpose();
    let mask = x1.mask();
    let values = x1.values();
    let mut resid = DMatrix::zeros(m, n);
    for j in 0..n {
        for i in 0..m {
            if mask[(i, j)] {
                resid[(i, j)] = values[(i, j)] - product[(i, j)];
            }
        }
    }
    let grad_a = -2.0 * &resid * &b_full + 2.0 * hyper.lambda1 * a;
    let data_b = -2.0 * resid.transpose() * a;
    let mut grad_b = data_b.clone();
    for t in 0..p.min(n) {
        for i in 0..r {
            grad_b[(t, i)] += 2.0 * hyper.lambda2 * b_tilde[(t, i)];
        }
    }
    if hyper.alpha > 0.0 && n > p {
        let g = ar_residuals(b_tilde, gamma);
        for w in 0..n - p {
            for j in 0..=p {
                for i in 0..r {
                    grad_b[(w + p - j, i)] +=
                        2.0 * hyper.alpha * ar_tap(gamma, j, i) * g[(w, i)];
                }
            }
        }
    }
    let grad_theta = phi.transpose() * data_b;
    (grad_a, grad_b, grad_theta)
}

/// Run one full sweep (trend, latent rows, row factors) in place and return
/// the loss after the sweep.
fn sweep_state(
    x1: &MaskedMatrix,
    phi: &DMatrix<f64>,
    a: &mut DMatrix<f64>,
    b_tilde: &mut DMatrix<f64>,
    theta: &mut DMatrix<f64>,
    gamma: &DMatrix<f64>,
    hyper: &Step2Hyper,
    vectorized: bool,
) -> Result<f64> {
    if hyper.detrend {
        *theta = theta_core(x1, phi, a, b_tilde, theta)?;
    }
    let resid = surrogate_residual(x1, phi, a, b_tilde, theta)?;
    *b_tilde = if vectorized {
        b2_core_vectorized(&resid, a, gamma, hyper.lambda2, hyper.alpha)?
    } else {
        b2_core_sequential(&resid, a, b_tilde, gamma, hyper.lambda2, hyper.alpha)?
    };
    let b_full = &*b_tilde + phi * &*theta;
    let fill = x1.fill_missing_with(&(&*a * b_full.transpose()))?;
    let gram = b_full.transpose() * &b_full;
    *a = ridge_solve(&gram, &(b_full.transpose() * fill.transpose()), hyper.lambda1)?.transpose();
    Ok(f2_value(x1, phi, a, b_tilde, theta, gamma, hyper))
}

/// Fit the refinement stage on `X1`.
///
/// `init` supplies warm-start factors (for example the first stage's
/// SoftImpute fit); without it an internal SoftImpute-ALS run with
/// `hyper.init_lambda` provides them. `observed_before_fill`, when given,
/// marks the entries observed in the original data so the output can
/// distinguish first-stage fills from genuine observations; it must be a
/// subset of the `X1` mask.
///
/// Returns the fitted model and the completed matrix: observed and
/// first-stage entries are passed through bit-exactly, downtime entries come
/// from the final low-rank fit.
pub fn step2_fit(
    x1: &MaskedMatrix,
    basis: &PeriodicBasis,
    hyper: &Step2Hyper,
    init: Option<&FactorPair>,
    observed_before_fill: Option<&DMatrix<bool>>,
) -> Result<(Step2Model, ImputedMatrix)> {
    let (m, n) = x1.shape();
    if basis.len() != n {
        return Err(dim_err!(
            "basis covers {} time points but the data has {n}",
            basis.len()
        ));
    }
    hyper.validate(m, n)?;
    if let Some(orig) = observed_before_fill {
        if orig.shape() != (m, n) {
            return Err(dim_err!(
                "original-observation mask is {:?}, expected {:?}",
                orig.shape(),
                (m, n)
            ));
        }
        for j in 0..n {
            for i in 0..m {
                if orig[(i, j)] && !x1.is_observed(i, j) {
                    return Err(input_err!(
                        "entry ({i}, {j}) is marked originally observed but missing in the input"
                    ));
                }
            }
        }
    }
    let phi = basis.phi();
    let downtime = x1.downtime_columns();

    let (mut a, b0) = match init {
        Some(fp) => {
            if fp.a.shape() != (m, hyper.rank) || fp.b.shape() != (n, hyper.rank) {
                return Err(dim_err!(
                    "warm-start factors {:?} / {:?} do not match rank {} on a {m}x{n} matrix",
                    fp.a.shape(),
                    fp.b.shape(),
                    hyper.rank
                ));
            }
            (fp.a.clone(), fp.b.clone())
        }
        None => {
            let si = softimpute_als(x1, hyper.rank, hyper.init_lambda, SoftImputeOpts::default())?;
            (si.a, si.b)
        }
    };
    let mut theta = if hyper.detrend {
        match ls_fit(phi, &b0, 0.0) {
            Ok(t) => t,
            Err(Error::Conditioning(_)) => {
                let guard = ridge_guard(&(phi.transpose() * phi)).max(1e-12);
                ls_fit(phi, &b0, guard)?
            }
            Err(e) => return Err(e),
        }
    } else {
        DMatrix::zeros(basis.dim(), hyper.rank)
    };
    let mut b_tilde = &b0 - phi * &theta;
    let mut gamma = if hyper.alpha > 0.0 {
        estimate_gamma(&b_tilde, hyper.p, &downtime)?
    } else {
        DMatrix::zeros(hyper.p, hyper.rank)
    };

    let init_loss = f2_value(x1, phi, &a, &b_tilde, &theta, &gamma, hyper);
    if !init_loss.is_finite() {
        return Err(Error::Conditioning(format!(
            "initial refinement loss is not finite ({init_loss})"
        )));
    }
    let mut loss_trace = vec![init_loss];
    let mut delta_trace = Vec::new();
    let mut gamma_refreshes = Vec::new();
    let mut prev_loss = init_loss;
    let mut prev_product = &a * (&b_tilde + phi * &theta).transpose();
    let vectorized = hyper.b_update.use_vectorized(hyper.rank);
    let mut converged = false;

    for sweep in 1..=hyper.max_iter {
        let cur = sweep_state(
            x1,
            phi,
            &mut a,
            &mut b_tilde,
            &mut theta,
            &gamma,
            hyper,
            vectorized,
        )?;
        if !cur.is_finite() {
            return Err(Error::Conditioning(format!(
                "refinement loss is not finite at sweep {sweep}"
            )));
        }
        delta_trace.push(prev_loss - cur);
        loss_trace.push(cur);
        if cur > prev_loss + 1e-10 * init_loss + 1e-15 {
            return Err(Error::Conditioning(format!(
                "refinement loss increased from {prev_loss:.12e} to {cur:.12e} at sweep \
                 {sweep}; this violates the descent guarantee and indicates an internal error"
            )));
        }
        let product = &a * (&b_tilde + phi * &theta).transpose();
        let change = (&product - &prev_product).norm_squared();
        let denom = prev_product.norm_squared().max(f64::MIN_POSITIVE);
        prev_product = product;
        prev_loss = cur;
        if change / denom < hyper.tol {
            converged = true;
            break;
        }
        if hyper.alpha > 0.0
            && hyper.gamma_refresh_every > 0
            && sweep % hyper.gamma_refresh_every == 0
            && sweep < hyper.max_iter
        {
            gamma = estimate_gamma(&b_tilde, hyper.p, &downtime)?;
            gamma_refreshes.push(sweep);
            prev_loss = f2_value(x1, phi, &a, &b_tilde, &theta, &gamma, hyper);
        }
    }
    if !converged {
        log::warn!(
            "refinement stopped after {} sweeps above tol {:e}",
            hyper.max_iter,
            hyper.tol
        );
    }

    let b_full = &b_tilde + phi * &theta;
    let product = &a * b_full.transpose();
    let values = x1.fill_missing_with(&product)?;
    let orig = observed_before_fill.unwrap_or_else(|| x1.mask());
    let tags = DMatrix::from_fn(m, n, |i, j| {
        if orig[(i, j)] {
            SourceTag::Observed.code()
        } else if x1.is_observed(i, j) {
            SourceTag::Step1.code()
        } else {
            SourceTag::Step2.code()
        }
    });
    let imputed = ImputedMatrix::new(values, tags)?;
    let model = Step2Model {
        a,
        b: b_full,
        theta,
        gamma,
        hyper: hyper.clone(),
        loss_trace,
        delta_trace,
        gamma_refreshes,
        converged,
    };
    Ok((model, imputed))
}

/// Post-fit convergence diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Step2Diagnostics {
    /// Completed sweeps K.
    pub sweeps: usize,
    /// Sweeps whose loss decrease was negative beyond roundoff tolerance.
    pub monotonicity_violations: usize,
    /// Smallest per-sweep decrease.
    pub min_delta: f64,
    /// Mean decrease `(F(1) - F(K+1)) / K`; `min_delta` can never exceed it.
    pub mean_delta_bound: f64,
    pub min_delta_within_bound: bool,
    /// Frobenius norms of the analytic block gradients at the final state.
    pub grad_a_norm: f64,
    pub grad_b_norm: f64,
    pub grad_theta_norm: f64,
    pub max_block_grad: f64,
    pub final_loss: f64,
}

/// Summarize descent and stationarity of a completed fit. Needs the data
/// and basis because the model does not store them.
pub fn convergence_report(
    model: &Step2Model,
    x1: &MaskedMatrix,
    basis: &PeriodicBasis,
) -> Result<Step2Diagnostics> {
    let sweeps = model.delta_trace.len();
    if sweeps < 2 {
        return Err(input_err!(
            "diagnostics need at least two completed sweeps, got {sweeps}"
        ));
    }
    check_state_shapes(x1, basis, &model.a, &model.b, &model.theta, &model.hyper)?;
    let scale = 1e-10 * model.loss_trace[0] + 1e-15;
    let monotonicity_violations = model
        .delta_trace
        .iter()
        .filter(|d| **d < -scale)
        .count();
    let min_delta = model
        .delta_trace
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let final_loss = *model.loss_trace.last().expect("trace nonempty");
    let mean_delta_bound = (model.loss_trace[0] - final_loss) / sweeps as f64;
    let b_tilde = model.b_detrended(basis)?;
    let (ga, gb, gt) = block_gradients(
        x1,
        basis.phi(),
        &model.a,
        &b_tilde,
        &model.theta,
        &model.gamma,
        &model.hyper,
    );
    let grad_a_norm = ga.norm();
    let grad_b_norm = gb.norm();
    let grad_theta_norm = if model.hyper.detrend { gt.norm() } else { 0.0 };
    Ok(Step2Diagnostics {
        sweeps,
        monotonicity_violations,
        min_delta,
        mean_delta_bound,
        min_delta_within_bound: min_delta <= mean_delta_bound + 1e-10,
        grad_a_norm,
        grad_b_norm,
        grad_theta_norm,
        max_block_grad: grad_a_norm.max(grad_b_norm).max(grad_theta_norm),
        final_loss,
    })
}
