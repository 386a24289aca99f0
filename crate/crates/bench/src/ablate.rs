//! The module-ablation experiment: a ladder of model variants toggling
//! detrending, cross-sectional covariance, and autoregressive regularization,
//! scored on replicated synthetic masks for relative error, margins against a
//! per-row spline baseline, and split-conformal coverage.

use std::fmt;
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use siap_core::conformal::{
    avg_coverage, avg_coverage_rows, conformal_intervals, pattern_test_set,
};
use siap_core::error::Result;
use siap_core::input_err;
use siap_core::masked::MaskedMatrix;
use siap_core::missing::{
    sample_mixed_missingness, split_calibration, CalibrationSplit, MissingnessPattern,
};
use siap_core::pipeline::{fit_siap, SiapHyper};
use siap_core::seed::{derive_seed, tags};
use siap_core::softimpute::{softimpute_als, SoftImputeOpts};
use siap_core::spline::{spline_fit_masked, BasisSpec, PeriodicBasis};
use siap_core::step1::step1_fit;
use siap_core::step2::{step2_fit, Step2Hyper};

use crate::metrics::{mrae, mrae_margin, relative_mrae_margin};
use crate::synth::{generate_synthetic, SyntheticSpec};

/// The model ladder. Each variant enables a subset of the library's modules:
/// observed-space detrending, shrinkage factorization, cross-sectional
/// covariance, latent detrending, and AR regularization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Shrinkage factorization of the raw matrix, nothing else.
    #[serde(rename = "SI")]
    Si,
    /// Detrend rows with the periodic spline, then factorize the residual.
    #[serde(rename = "SI detrended")]
    SiDetrended,
    /// First stage in full: detrended factorization plus spiked covariance,
    /// imputing with conditional means.
    #[serde(rename = "SI detrended w/ cov")]
    SiDetrendedCov,
    /// AR-regularized factorization of the raw matrix, no trend removal.
    #[serde(rename = "SS SIA")]
    SsSia,
    /// Second stage on its own: latent detrending plus AR regularization.
    #[serde(rename = "SS SIA detrended")]
    SsSiaDetrended,
    /// First stage, then the second-stage refit with the AR penalty off.
    #[serde(rename = "S1 + SS SI detrended")]
    S1SsSiDetrended,
    /// The full two-step pipeline.
    #[serde(rename = "SIAP")]
    Siap,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Si,
        Variant::SiDetrended,
        Variant::SiDetrendedCov,
        Variant::SsSia,
        Variant::SsSiaDetrended,
        Variant::S1SsSiDetrended,
        Variant::Siap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Si => "SI",
            Variant::SiDetrended => "SI detrended",
            Variant::SiDetrendedCov => "SI detrended w/ cov",
            Variant::SsSia => "SS SIA",
            Variant::SsSiaDetrended => "SS SIA detrended",
            Variant::S1SsSiDetrended => "S1 + SS SI detrended",
            Variant::Siap => "SIAP",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = siap_core::Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                input_err!(
                    "unknown variant {s:?}; expected one of {:?}",
                    Variant::ALL.map(Variant::name)
                )
            })
    }
}

/// Fit one variant on (typically training) data and return its estimate of
/// the complete matrix.
pub fn fit_variant(
    variant: Variant,
    x: &MaskedMatrix,
    basis: &PeriodicBasis,
    hyper: &SiapHyper,
) -> Result<DMatrix<f64>> {
    match variant {
        Variant::Si => {
            let fit = softimpute_als(
                x,
                hyper.step1.rank,
                hyper.step1.lambda,
                SoftImputeOpts::default(),
            )?;
            Ok(fit.product())
        }
        Variant::SiDetrended => {
            let theta = spline_fit_masked(x, basis, 0.0)?;
            let mean = basis.mean_surface(&theta)?;
            let detrended = MaskedMatrix::new(x.values() - &mean, x.mask().clone())?;
            let fit = softimpute_als(
                &detrended,
                hyper.step1.rank,
                hyper.step1.lambda,
                SoftImputeOpts::default(),
            )?;
            Ok(mean + fit.product())
        }
        Variant::SiDetrendedCov => {
            let fit = step1_fit(x, basis, &hyper.step1)?;
            Ok(fit.cond_mean)
        }
        Variant::SsSia => {
            let h2 = Step2Hyper {
                detrend: false,
                ..hyper.step2.clone()
            };
            let (model, _) = step2_fit(x, basis, &h2, None, None)?;
            Ok(model.product())
        }
        Variant::SsSiaDetrended => {
            let (model, _) = step2_fit(x, basis, &hyper.step2, None, None)?;
            Ok(model.product())
        }
        Variant::S1SsSiDetrended => {
            let s1 = step1_fit(x, basis, &hyper.step1)?;
            let h2 = Step2Hyper {
                alpha: 0.0,
                ..hyper.step2.clone()
            };
            let (_, imputed) = step2_fit(&s1.x1, basis, &h2, None, Some(x.mask()))?;
            Ok(imputed.values().clone())
        }
        Variant::Siap => {
            let fit = fit_siap(x, basis, hyper)?;
            Ok(fit.imputed.values().clone())
        }
    }
}

/// Full experiment configuration; serialized verbatim into the report so any
/// report is reproducible from its own echo.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct AblationConfig {
    pub spec: SyntheticSpec,
    pub variants: Vec<Variant>,
    /// Downtime column probability; also the scattered probability among the
    /// remaining observed entries.
    pub p0: f64,
    pub replicates: usize,
    /// Interval miscoverage level.
    pub alpha: f64,
    /// Probability a fully observed column is held out for the downtime
    /// calibration family.
    pub p_cal1: f64,
    /// Probability an observed entry is held out for the scattered family.
    pub p_cal2: f64,
    pub hyper: SiapHyper,
    pub basis: BasisSpec,
    pub seed: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            spec: SyntheticSpec::default(),
            variants: Variant::ALL.to_vec(),
            p0: 0.3,
            replicates: 20,
            alpha: 0.05,
            p_cal1: 0.1,
            p_cal2: 0.1,
            hyper: SiapHyper::default(),
            basis: BasisSpec {
                periods: vec![60.0, 20.0],
                knots: vec![8, 6],
            },
            seed: 0,
        }
    }
}

impl AblationConfig {
    fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(input_err!("no variants requested"));
        }
        if self.replicates == 0 {
            return Err(input_err!("replicate count must be at least 1"));
        }
        if !(self.p0 > 0.0 && self.p0 < 1.0) {
            return Err(input_err!("p0 must lie in (0, 1), got {}", self.p0));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(input_err!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        Ok(())
    }
}

/// Mean with its Monte-Carlo standard error (absent below 2 samples).
#[derive(Debug, Clone, Serialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub se: Option<f64>,
    pub n: usize,
}

fn summarize(values: &[f64]) -> MetricSummary {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let n = finite.len();
    if n == 0 {
        return MetricSummary {
            mean: f64::NAN,
            se: None,
            n: 0,
        };
    }
    let mean = finite.iter().sum::<f64>() / n as f64;
    let se = if n >= 2 {
        let var = finite.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        Some((var / n as f64).sqrt())
    } else {
        None
    };
    MetricSummary { mean, se, n }
}

#[derive(Debug, Clone, Serialize)]
pub struct FailureRecord {
    pub replicate: usize,
    pub message: String,
}

/// Aggregated results for one variant.
#[derive(Debug, Clone, Serialize)]
pub struct VariantReport {
    pub variant: String,
    pub replicates_used: usize,
    pub scattered_mrae: MetricSummary,
    pub downtime_mrae: MetricSummary,
    pub scattered_margin: MetricSummary,
    pub downtime_margin: MetricSummary,
    pub scattered_rel_margin: MetricSummary,
    pub downtime_rel_margin: MetricSummary,
    pub avg_coverage: MetricSummary,
    pub row_coverage_mean: MetricSummary,
    /// Worst and best per-row coverage seen in any replicate.
    pub row_coverage_band: (f64, f64),
    pub halfwidth_scattered: MetricSummary,
    pub halfwidth_downtime: MetricSummary,
    /// Total infinite intervals across replicates (empty calibration rows).
    pub infinite_intervals: usize,
    pub failures: Vec<FailureRecord>,
    /// Per-replicate raw values backing the summaries, in replicate order,
    /// for downstream plotting (failed replicates omitted).
    pub scattered_mrae_per_replicate: Vec<f64>,
    pub downtime_mrae_per_replicate: Vec<f64>,
    pub coverage_per_replicate: Vec<f64>,
}

/// Everything one experiment produces. Serializes deterministically: wall
/// clock timings are carried alongside but never enter the JSON.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub config: AblationConfig,
    pub replicates: usize,
    /// False when a single replicate makes standard errors impossible.
    pub se_available: bool,
    pub baseline_scattered_mrae: MetricSummary,
    pub baseline_downtime_mrae: MetricSummary,
    pub variants: Vec<VariantReport>,
    /// Zero-truth entries excluded from relative errors, summed over
    /// replicates and sets.
    pub zero_truth_exclusions: usize,
    /// Replicate-level failures (mask or baseline construction), which void
    /// every variant for that replicate.
    pub replicate_failures: Vec<FailureRecord>,
    #[serde(skip)]
    pub timings: Timings,
}

#[derive(Debug, Clone, Default)]
pub struct Timings {
    pub total_seconds: f64,
    /// (variant, summed fit+score seconds across replicates).
    pub per_variant_seconds: Vec<(String, f64)>,
}

impl ExperimentReport {
    /// Flat table (one row per variant) for external plotting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "variant,replicates_used,scattered_mrae,scattered_se,downtime_mrae,downtime_se,\
             scattered_rel_margin,downtime_rel_margin,avg_coverage,coverage_se,\
             row_coverage_mean,halfwidth_scattered,halfwidth_downtime,infinite_intervals,failures\n",
        );
        let fmt_se = |se: Option<f64>| se.map(|s| s.to_string()).unwrap_or_default();
        for v in &self.variants {
            out.push_str(&format!(
                "{:?},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                v.variant,
                v.replicates_used,
                v.scattered_mrae.mean,
                fmt_se(v.scattered_mrae.se),
                v.downtime_mrae.mean,
                fmt_se(v.downtime_mrae.se),
                v.scattered_rel_margin.mean,
                v.downtime_rel_margin.mean,
                v.avg_coverage.mean,
                fmt_se(v.avg_coverage.se),
                v.row_coverage_mean.mean,
                v.halfwidth_scattered.mean,
                v.halfwidth_downtime.mean,
                v.infinite_intervals,
                v.failures.len(),
            ));
        }
        out
    }
}

/// The mask, calibration split, and training matrix of replicate `k`,
/// derived deterministically from the config seed. Public so a report can be
/// replayed piecewise against direct library calls.
pub fn replicate_inputs(
    config: &AblationConfig,
    k: usize,
    x_full: &MaskedMatrix,
) -> Result<(MissingnessPattern, CalibrationSplit, MaskedMatrix)> {
    let rep_seed = derive_seed(config.seed, tags::REPLICATE + k as u64);
    let (m, n) = x_full.shape();
    let pattern = sample_mixed_missingness(
        m,
        n,
        config.p0,
        config.p0,
        derive_seed(rep_seed, tags::MISSINGNESS),
    )?;
    let x_masked = pattern.apply(x_full.values())?;
    let split = split_calibration(
        &x_masked,
        &pattern,
        config.p_cal1,
        config.p_cal2,
        derive_seed(rep_seed, tags::SPLIT),
    )?;
    Ok((pattern, split, x_masked))
}

struct VariantScores {
    scattered_mrae: f64,
    downtime_mrae: f64,
    scattered_margin: f64,
    downtime_margin: f64,
    scattered_rel: f64,
    downtime_rel: f64,
    coverage: f64,
    row_cov_mean: f64,
    row_cov_min: f64,
    row_cov_max: f64,
    halfwidth_scattered: f64,
    halfwidth_downtime: f64,
    infinite_intervals: usize,
    zero_truth_excluded: usize,
    seconds: f64,
}

struct ReplicateResult {
    baseline_scattered: f64,
    baseline_downtime: f64,
    per_variant: Vec<std::result::Result<VariantScores, String>>,
}

fn family_halfwidths(
    lower: &DMatrix<f64>,
    upper: &DMatrix<f64>,
    set: &[(usize, usize)],
) -> (f64, usize) {
    let mut sum = 0.0;
    let mut finite = 0usize;
    let mut infinite = 0usize;
    for &(i, j) in set {
        let w = (upper[(i, j)] - lower[(i, j)]) / 2.0;
        if w.is_finite() {
            sum += w;
            finite += 1;
        } else {
            infinite += 1;
        }
    }
    let mean = if finite > 0 {
        sum / finite as f64
    } else {
        f64::NAN
    };
    (mean, infinite)
}

fn run_replicate(
    config: &AblationConfig,
    k: usize,
    truth_full: &MaskedMatrix,
    basis: &PeriodicBasis,
) -> std::result::Result<ReplicateResult, String> {
    let truth = truth_full.values();
    let (pattern, split, x_masked) =
        replicate_inputs(config, k, truth_full).map_err(|e| e.to_string())?;
    let train = split.train_matrix(&x_masked).map_err(|e| e.to_string())?;

    let scattered_set = pattern.scattered.clone();
    let mut downtime_set = Vec::new();
    for &j in &pattern.downtime_cols {
        for i in 0..truth.nrows() {
            downtime_set.push((i, j));
        }
    }
    if scattered_set.is_empty() || downtime_set.is_empty() {
        return Err(format!(
            "replicate {k}: degenerate mask ({} scattered, {} downtime entries)",
            scattered_set.len(),
            downtime_set.len()
        ));
    }

    // Baseline: per-row periodic spline fit on the training data.
    let baseline_hat = spline_fit_masked(&train, basis, 0.0)
        .and_then(|theta| basis.mean_surface(&theta))
        .map_err(|e| format!("baseline spline fit: {e}"))?;
    let baseline_scattered = mrae(&baseline_hat, truth, &scattered_set)
        .map_err(|e| e.to_string())?
        .value;
    let baseline_downtime = mrae(&baseline_hat, truth, &downtime_set)
        .map_err(|e| e.to_string())?
        .value;

    let test_set = pattern_test_set(&pattern);
    let per_variant = config
        .variants
        .iter()
        .map(|&variant| {
            let start = Instant::now();
            let scores: Result<VariantScores> = (|| {
                let x_hat = fit_variant(variant, &train, basis, &config.hyper)?;
                let sc = mrae(&x_hat, truth, &scattered_set)?;
                let dt = mrae(&x_hat, truth, &downtime_set)?;
                let (quantiles, est) =
                    conformal_intervals(&x_masked, &x_hat, &split, &pattern, config.alpha)?;
                let coverage = avg_coverage(&est, truth, &test_set)?;
                let rows = avg_coverage_rows(&est, truth, &test_set)?;
                let covered: Vec<f64> = rows.iter().flatten().copied().collect();
                let row_cov_mean = if covered.is_empty() {
                    f64::NAN
                } else {
                    covered.iter().sum::<f64>() / covered.len() as f64
                };
                let row_cov_min = covered.iter().copied().fold(f64::INFINITY, f64::min);
                let row_cov_max = covered.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let (hw_sc, inf_sc) = family_halfwidths(&est.lower, &est.upper, &scattered_set);
                let (hw_dt, inf_dt) = family_halfwidths(&est.lower, &est.upper, &downtime_set);
                let _ = &quantiles;
                Ok(VariantScores {
                    scattered_mrae: sc.value,
                    downtime_mrae: dt.value,
                    scattered_margin: mrae_margin(&x_hat, truth, &scattered_set, &baseline_hat)?,
                    downtime_margin: mrae_margin(&x_hat, truth, &downtime_set, &baseline_hat)?,
                    scattered_rel: relative_mrae_margin(
                        &x_hat,
                        truth,
                        &scattered_set,
                        &baseline_hat,
                    )?,
                    downtime_rel: relative_mrae_margin(
                        &x_hat,
                        truth,
                        &downtime_set,
                        &baseline_hat,
                    )?,
                    coverage,
                    row_cov_mean,
                    row_cov_min,
                    row_cov_max,
                    halfwidth_scattered: hw_sc,
                    halfwidth_downtime: hw_dt,
                    infinite_intervals: inf_sc + inf_dt,
                    zero_truth_excluded: sc.excluded_zero_truth + dt.excluded_zero_truth,
                    seconds: 0.0,
                })
            })();
            match scores {
                Ok(mut s) => {
                    s.seconds = start.elapsed().as_secs_f64();
                    Ok(s)
                }
                Err(e) => Err(e.to_string()),
            }
        })
        .collect();

    Ok(ReplicateResult {
        baseline_scattered,
        baseline_downtime,
        per_variant,
    })
}

/// Run the experiment: generate the truth once, then for each replicate draw
/// a fresh mask and calibration split, fit every requested variant on the
/// training portion, and aggregate. Replicates run in parallel; each derives
/// its own seed from (config seed, replicate index), so results are
/// identical at any thread count. Fit failures are recorded per replicate
/// and excluded from the aggregates, never silently dropped.
pub fn run_ablation(config: &AblationConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let started = Instant::now();
    let data = generate_synthetic(&config.spec)?;
    let grid: Vec<f64> = (0..config.spec.n).map(|t| t as f64).collect();
    let basis = config.basis.build(&grid)?;

    let outcomes: Vec<std::result::Result<ReplicateResult, String>> = (0..config.replicates)
        .into_par_iter()
        .map(|k| run_replicate(config, k, &data.x, &basis))
        .collect();

    if config.replicates == 1 {
        log::warn!("single replicate: the report carries no standard errors");
    }

    let mut replicate_failures = Vec::new();
    let mut baseline_sc = Vec::new();
    let mut baseline_dt = Vec::new();
    let mut zero_truth = 0usize;
    let mut per_variant_values: Vec<Vec<&VariantScores>> =
        vec![Vec::new(); config.variants.len()];
    let mut per_variant_failures: Vec<Vec<FailureRecord>> =
        vec![Vec::new(); config.variants.len()];

    for (k, outcome) in outcomes.iter().enumerate() {
        match outcome {
            Err(message) => {
                log::warn!("replicate {k} failed: {message}");
                replicate_failures.push(FailureRecord {
                    replicate: k,
                    message: message.clone(),
                });
            }
            Ok(rep) => {
                baseline_sc.push(rep.baseline_scattered);
                baseline_dt.push(rep.baseline_downtime);
                for (v, scores) in rep.per_variant.iter().enumerate() {
                    match scores {
                        Ok(s) => {
                            zero_truth += s.zero_truth_excluded;
                            per_variant_values[v].push(s);
                        }
                        Err(message) => {
                            log::warn!(
                                "replicate {k}, variant {}: {message}",
                                config.variants[v]
                            );
                            per_variant_failures[v].push(FailureRecord {
                                replicate: k,
                                message: message.clone(),
                            });
                        }
                    }
                }
            }
        }
    }

    let mut variants = Vec::with_capacity(config.variants.len());
    let mut per_variant_seconds = Vec::with_capacity(config.variants.len());
    for (v, &variant) in config.variants.iter().enumerate() {
        let vals = &per_variant_values[v];
        let collect = |f: fn(&VariantScores) -> f64| -> Vec<f64> {
            vals.iter().map(|s| f(s)).collect()
        };
        let band_min = vals
            .iter()
            .map(|s| s.row_cov_min)
            .fold(f64::INFINITY, f64::min);
        let band_max = vals
            .iter()
            .map(|s| s.row_cov_max)
            .fold(f64::NEG_INFINITY, f64::max);
        per_variant_seconds.push((
            variant.name().to_string(),
            vals.iter().map(|s| s.seconds).sum::<f64>(),
        ));
        variants.push(VariantReport {
            variant: variant.name().to_string(),
            replicates_used: vals.len(),
            scattered_mrae: summarize(&collect(|s| s.scattered_mrae)),
            downtime_mrae: summarize(&collect(|s| s.downtime_mrae)),
            scattered_margin: summarize(&collect(|s| s.scattered_margin)),
            downtime_margin: summarize(&collect(|s| s.downtime_margin)),
            scattered_rel_margin: summarize(&collect(|s| s.scattered_rel)),
            downtime_rel_margin: summarize(&collect(|s| s.downtime_rel)),
            avg_coverage: summarize(&collect(|s| s.coverage)),
            row_coverage_mean: summarize(&collect(|s| s.row_cov_mean)),
            row_coverage_band: (band_min, band_max),
            halfwidth_scattered: summarize(&collect(|s| s.halfwidth_scattered)),
            halfwidth_downtime: summarize(&collect(|s| s.halfwidth_downtime)),
            infinite_intervals: vals.iter().map(|s| s.infinite_intervals).sum(),
            failures: std::mem::take(&mut per_variant_failures[v]),
            scattered_mrae_per_replicate: collect(|s| s.scattered_mrae),
            downtime_mrae_per_replicate: collect(|s| s.downtime_mrae),
            coverage_per_replicate: collect(|s| s.coverage),
        });
    }

    Ok(ExperimentReport {
        config: config.clone(),
        replicates: config.replicates,
        se_available: config.replicates >= 2,
        baseline_scattered_mrae: summarize(&baseline_sc),
        baseline_downtime_mrae: summarize(&baseline_dt),
        variants,
        zero_truth_exclusions: zero_truth,
        replicate_failures,
        timings: Timings {
            total_seconds: started.elapsed().as_secs_f64(),
            per_variant_seconds,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> AblationConfig {
        let mut config = AblationConfig {
            spec: SyntheticSpec {
                m: 24,
                n: 48,
                r_true: 2,
                periods: vec![24.0],
                amplitudes: vec![2.0],
                ar: vec![0.5],
                cov_rank: 2,
                l_scale: 0.1,
                lambda_scale: 0.02,
                seed: 3,
                ..SyntheticSpec::default()
            },
            variants: vec![Variant::Si, Variant::Siap],
            p0: 0.2,
            replicates: 2,
            alpha: 0.2,
            p_cal1: 0.15,
            p_cal2: 0.1,
            basis: BasisSpec {
                periods: vec![24.0],
                knots: vec![6],
            },
            seed: 7,
            ..AblationConfig::default()
        };
        config.hyper.step1.rank = 3;
        config.hyper.step1.cov_rank = 3;
        config.hyper.step1.lambda = 0.5;
        config.hyper.step1.max_iter = 25;
        config.hyper.step2.rank = 3;
        config.hyper.step2.lambda1 = 0.3;
        config.hyper.step2.lambda2 = 0.3;
        config.hyper.step2.alpha = 0.5;
        config.hyper.step2.init_lambda = 0.5;
        config.hyper.step2.max_iter = 80;
        config
    }

    #[test]
    fn si_variant_matches_a_direct_shrinkage_fit() {
        let config = small_config();
        let data = generate_synthetic(&config.spec).unwrap();
        let grid: Vec<f64> = (0..config.spec.n).map(|t| t as f64).collect();
        let basis = config.basis.build(&grid).unwrap();
        let (_, split, x_masked) = replicate_inputs(&config, 0, &data.x).unwrap();
        let train = split.train_matrix(&x_masked).unwrap();

        let via_harness = fit_variant(Variant::Si, &train, &basis, &config.hyper).unwrap();
        let direct = softimpute_als(
            &train,
            config.hyper.step1.rank,
            config.hyper.step1.lambda,
            SoftImputeOpts::default(),
        )
        .unwrap()
        .product();
        assert_eq!(
            via_harness.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            direct.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            "harness SI diverged from the direct library call"
        );
    }

    #[test]
    fn report_covers_all_requested_variants_with_sane_numbers() {
        let config = small_config();
        let report = run_ablation(&config).unwrap();
        assert_eq!(report.variants.len(), 2);
        assert!(report.se_available);
        assert!(report.replicate_failures.is_empty());
        for v in &report.variants {
            assert_eq!(v.replicates_used, 2);
            assert!(v.scattered_mrae.mean.is_finite());
            assert!(v.downtime_mrae.mean.is_finite());
            assert!(v.scattered_mrae.se.is_some());
            assert!((0.0..=1.0).contains(&v.avg_coverage.mean));
            assert!(v.failures.is_empty());
            assert_eq!(v.scattered_mrae_per_replicate.len(), 2);
        }
        assert!(report.baseline_scattered_mrae.mean > 0.0);
        let csv = report.to_csv();
        assert!(csv.lines().count() == 3);
        assert!(csv.contains("\"SIAP\""));
        assert!(report.timings.total_seconds > 0.0);
    }

    #[test]
    fn single_replicate_reports_no_standard_errors() {
        let mut config = small_config();
        config.replicates = 1;
        let report = run_ablation(&config).unwrap();
        assert!(!report.se_available);
        for v in &report.variants {
            assert!(v.scattered_mrae.se.is_none());
            assert!(v.avg_coverage.se.is_none());
        }
        assert!(report.baseline_scattered_mrae.se.is_none());
    }

    #[test]
    fn report_json_is_deterministic() {
        let config = small_config();
        let one = serde_json::to_string(&run_ablation(&config).unwrap()).unwrap();
        let two = serde_json::to_string(&run_ablation(&config).unwrap()).unwrap();
        assert_eq!(one, two);
        assert!(!one.contains("seconds"), "timings leaked into the JSON");
    }

    #[test]
    fn variant_failures_are_recorded_and_excluded() {
        let mut config = small_config();
        // An AR order too large for the column count sinks every AR-penalized
        // variant while leaving the first-stage-only ladder intact.
        config.variants = vec![Variant::Si, Variant::SsSiaDetrended, Variant::Siap];
        config.hyper.step2.p = 40; // 2p > n = 48 with alpha > 0 is rejected
        let report = run_ablation(&config).unwrap();
        let by_name: std::collections::HashMap<&str, &VariantReport> = report
            .variants
            .iter()
            .map(|v| (v.variant.as_str(), v))
            .collect();
        assert_eq!(by_name["SI"].replicates_used, 2);
        assert!(by_name["SI"].failures.is_empty());
        for name in ["SS SIA detrended", "SIAP"] {
            let v = by_name[name];
            assert_eq!(v.replicates_used, 0, "{name} should have failed");
            assert_eq!(v.failures.len(), 2);
            assert!(v.scattered_mrae.mean.is_nan());
        }
    }

    #[test]
    fn variant_names_parse_back() {
        for v in Variant::ALL {
            let parsed: Variant = v.name().parse().unwrap();
            assert_eq!(parsed, v);
        }
        assert!("frobnicate".parse::<Variant>().is_err());
        let json = serde_json::to_string(&Variant::S1SsSiDetrended).unwrap();
        assert_eq!(json, "\"S1 + SS SI detrended\"");
        assert_eq!(
            serde_json::from_str::<Variant>(&json).unwrap(),
            Variant::S1SsSiDetrended
        );
    }
}
