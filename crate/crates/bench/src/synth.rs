//! Model-matched synthetic data: a periodic mean, low-rank factors whose
//! latent trajectories follow a diagonal autoregression, and spiked
//! (diagonal plus low-rank) noise. Every generating component is returned so
//! tests can use them as oracles.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use siap_core::error::Result;
use siap_core::input_err;
use siap_core::masked::MaskedMatrix;
use siap_core::seed::{derive_seed, rng_from_seed, tags};

use rand::Rng;
use rand_distr::StandardNormal;

/// Recipe for one synthetic matrix.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SyntheticSpec {
    /// Rows (spectral channels).
    pub m: usize,
    /// Columns (time steps).
    pub n: usize,
    /// Rank of the factor term.
    pub r_true: usize,
    /// Sinusoid periods of the row means, in time steps.
    pub periods: Vec<f64>,
    /// Matching sinusoid amplitudes.
    pub amplitudes: Vec<f64>,
    /// Constant level added to every entry; keeps relative errors
    /// well-defined the way strictly positive flux data does.
    pub offset: f64,
    /// Diagonal AR coefficients of the latent trajectories (lag 1..=p),
    /// shared by all coordinates; innovations have unit variance.
    pub ar: Vec<f64>,
    /// Variance of the diagonal noise component.
    pub lambda_scale: f64,
    /// Rank of the noise spike (0 = none).
    pub cov_rank: usize,
    /// Approximate standard deviation the spike contributes per entry.
    pub l_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            m: 60,
            n: 120,
            r_true: 3,
            periods: vec![60.0, 20.0],
            amplitudes: vec![3.0, 1.5],
            offset: 10.0,
            ar: vec![0.6, 0.25],
            lambda_scale: 0.04,
            cov_rank: 3,
            l_scale: 0.15,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 {
            return Err(input_err!("matrix dimensions must be positive"));
        }
        if self.r_true > self.m.min(self.n) {
            return Err(input_err!(
                "rank {} exceeds min({}, {})",
                self.r_true,
                self.m,
                self.n
            ));
        }
        if self.periods.len() != self.amplitudes.len() {
            return Err(input_err!(
                "{} periods but {} amplitudes",
                self.periods.len(),
                self.amplitudes.len()
            ));
        }
        for &p in &self.periods {
            if !(p > 0.0) || !p.is_finite() {
                return Err(input_err!("periods must be positive and finite, got {p}"));
            }
        }
        for &a in &self.amplitudes {
            if !a.is_finite() {
                return Err(input_err!("amplitudes must be finite, got {a}"));
            }
        }
        if !self.offset.is_finite() {
            return Err(input_err!("offset must be finite"));
        }
        if !(self.lambda_scale >= 0.0) || !self.lambda_scale.is_finite() {
            return Err(input_err!("diagonal noise variance must be finite and >= 0"));
        }
        if !(self.l_scale >= 0.0) || !self.l_scale.is_finite() {
            return Err(input_err!("spike scale must be finite and >= 0"));
        }
        if self.cov_rank > self.m {
            return Err(input_err!(
                "spike rank {} exceeds the row count {}",
                self.cov_rank,
                self.m
            ));
        }
        check_stationary(&self.ar)?;
        Ok(())
    }
}

/// Reject AR coefficients whose process is not stationary: the companion
/// matrix of the lag polynomial must have all eigenvalues strictly inside the
/// unit circle (they are the inverse roots of `1 - g_1 z - ... - g_p z^p`).
fn check_stationary(ar: &[f64]) -> Result<()> {
    for &g in ar {
        if !g.is_finite() {
            return Err(input_err!("AR coefficients must be finite"));
        }
    }
    let p = ar.len();
    if p == 0 {
        return Ok(());
    }
    let mut companion = DMatrix::zeros(p, p);
    for (l, &g) in ar.iter().enumerate() {
        companion[(0, l)] = g;
    }
    for l in 1..p {
        companion[(l, l - 1)] = 1.0;
    }
    let eigs = companion.complex_eigenvalues();
    for e in eigs.iter() {
        if e.norm() >= 1.0 - 1e-8 {
            return Err(input_err!(
                "AR coefficients {ar:?} are not stationary (companion eigenvalue magnitude {:.6})",
                e.norm()
            ));
        }
    }
    Ok(())
}

/// One generated matrix with its generating components.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    /// The fully observed matrix `mean + a b^T + noise`.
    pub x: MaskedMatrix,
    /// Periodic-plus-offset mean, m x n.
    pub mean: DMatrix<f64>,
    /// Row factors, m x r_true.
    pub a: DMatrix<f64>,
    /// Latent trajectories, n x r_true, diagonal-AR over time.
    pub b: DMatrix<f64>,
    /// Realized spiked noise, m x n.
    pub noise: DMatrix<f64>,
}

/// Generate one matrix. Deterministic: the same spec (seed included) always
/// produces the same bits. Draw order is fixed — mean phases, then row
/// factors, then latent innovations, then the noise spike — so adding
/// components never perturbs earlier ones.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let (m, n, r) = (spec.m, spec.n, spec.r_true);
    let mut rng = rng_from_seed(derive_seed(spec.seed, tags::SYNTHETIC));
    let tau = 2.0 * std::f64::consts::PI;

    // Mean: shared sinusoids with a random phase per (row, harmonic).
    let phases = DMatrix::from_fn(m, spec.periods.len(), |_, _| rng.gen::<f64>() * tau);
    let mean = DMatrix::from_fn(m, n, |i, j| {
        let mut v = spec.offset;
        for (k, (&period, &amp)) in spec.periods.iter().zip(&spec.amplitudes).enumerate() {
            v += amp * (tau * j as f64 / period + phases[(i, k)]).sin();
        }
        v
    });

    let a = DMatrix::from_fn(m, r, |_, _| rng.sample::<f64, _>(StandardNormal));

    // Latents: unit-variance innovations through the AR recursion, long
    // burn-in so the series starts in its stationary regime.
    let p = spec.ar.len();
    let burn = 512;
    let mut b = DMatrix::zeros(n, r);
    for k in 0..r {
        let mut history = vec![0.0f64; p];
        for t in 0..burn + n {
            let mut v: f64 = rng.sample(StandardNormal);
            for (l, &g) in spec.ar.iter().enumerate() {
                v += g * history[l];
            }
            if p > 0 {
                history.rotate_right(1);
                history[0] = v;
            }
            if t >= burn {
                b[(t - burn, k)] = v;
            }
        }
    }

    // Spiked noise: per-column low-rank draw plus diagonal jitter. The spike
    // loadings are scaled by 1/sqrt(rank) so `l_scale` stays the per-entry
    // contribution no matter how many spike directions there are.
    let r_l = spec.cov_rank;
    let l_entry_sd = if r_l > 0 {
        spec.l_scale / (r_l as f64).sqrt()
    } else {
        0.0
    };
    let l = DMatrix::from_fn(m, r_l, |_, _| l_entry_sd * rng.sample::<f64, _>(StandardNormal));
    let mut noise = DMatrix::zeros(m, n);
    let diag_sd = spec.lambda_scale.sqrt();
    for j in 0..n {
        let z = DMatrix::from_fn(r_l, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
        let spike = &l * z;
        for i in 0..m {
            noise[(i, j)] = spike[(i, 0)] + diag_sd * rng.sample::<f64, _>(StandardNormal);
        }
    }

    let x = MaskedMatrix::fully_observed(&mean + &a * b.transpose() + &noise)?;
    Ok(SyntheticData {
        x,
        mean,
        a,
        b,
        noise,
    })
}
