//! Hyperparameter selection: cross-validated shrinkage weights, column-fold
//! selection of the second-stage ridge pair and AR weight, and an
//! information-criterion choice of the autoregression order.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rayon::prelude::*;

use siap_core::error::Result;
use siap_core::input_err;
use siap_core::masked::MaskedMatrix;
use siap_core::seed::{derive_seed, rng_from_seed, tags};
use siap_core::softimpute::{softimpute_als, SoftImputeOpts};
use siap_core::spline::{spline_fit_masked, PeriodicBasis};
use siap_core::step2::{estimate_gamma, step2_fit, Step2Hyper};

/// One evaluated grid point.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CvPoint {
    /// Grid coordinates of this point (one value per tuned parameter).
    pub params: Vec<f64>,
    /// Pooled held-out mean relative absolute error (NaN if every fold
    /// failed).
    pub score: f64,
    /// Folds that actually contributed.
    pub folds_used: usize,
    /// Held-out entries pooled into the score.
    pub held_out: usize,
}

/// A full grid evaluation with the winning index.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CvPath {
    pub points: Vec<CvPoint>,
    pub best_index: usize,
}

impl CvPath {
    pub fn best(&self) -> &CvPoint {
        &self.points[self.best_index]
    }

    /// Flat table for plotting: one row per grid point.
    pub fn to_csv(&self, param_names: &[&str]) -> String {
        let mut out = String::new();
        out.push_str(&param_names.join(","));
        out.push_str(",score,folds_used,held_out,selected\n");
        for (idx, p) in self.points.iter().enumerate() {
            let params = p
                .params
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(",");
            out.push_str(&format!(
                "{params},{},{},{},{}\n",
                p.score,
                p.folds_used,
                p.held_out,
                (idx == self.best_index) as u8
            ));
        }
        out
    }
}

fn pick_best(points: Vec<CvPoint>) -> Result<CvPath> {
    let mut best: Option<usize> = None;
    for (idx, p) in points.iter().enumerate() {
        if !p.score.is_finite() {
            continue;
        }
        if best.map_or(true, |b| p.score < points[b].score) {
            best = Some(idx);
        }
    }
    let best_index = best.ok_or_else(|| {
        input_err!("every grid point failed cross-validation; nothing to select")
    })?;
    Ok(CvPath {
        points,
        best_index,
    })
}

/// Sum of per-fold absolute relative errors with their counts, pooled into
/// one score. Folds whose fit fails are skipped loudly.
#[derive(Default, Clone, Copy)]
struct PooledScore {
    sum: f64,
    used: usize,
    folds: usize,
}

impl PooledScore {
    fn add(&mut self, sum: f64, used: usize) {
        if used > 0 {
            self.sum += sum;
            self.used += used;
            self.folds += 1;
        }
    }

    fn finish(self) -> (f64, usize, usize) {
        let score = if self.used > 0 {
            self.sum / self.used as f64
        } else {
            f64::NAN
        };
        (score, self.folds, self.used)
    }
}

/// Absolute relative error summed over the given held-out entries of a
/// prediction grid; zero-truth entries are skipped.
fn held_out_error(
    prediction: &DMatrix<f64>,
    truth: &MaskedMatrix,
    entries: &[(usize, usize)],
) -> (f64, usize) {
    let mut sum = 0.0;
    let mut used = 0usize;
    for &(i, j) in entries {
        let t = truth.values()[(i, j)];
        if t == 0.0 {
            continue;
        }
        sum += (prediction[(i, j)] - t).abs() / t.abs();
        used += 1;
    }
    (sum, used)
}

/// Random entry-level folds over the observed entries, balanced by
/// round-robin assignment of a shuffled index list.
fn entry_folds(x: &MaskedMatrix, folds: usize, seed: u64) -> Vec<Vec<(usize, usize)>> {
    let mut observed = x.observed_indices();
    let mut rng = rng_from_seed(derive_seed(seed, tags::CV_FOLDS));
    observed.shuffle(&mut rng);
    let mut out = vec![Vec::new(); folds];
    for (idx, entry) in observed.into_iter().enumerate() {
        out[idx % folds].push(entry);
    }
    out
}

/// Select the first-stage shrinkage weight by entry-fold cross-validation:
/// each fold is masked out, the detrended shrinkage factorization is refit on
/// the rest, and the fold is scored by relative error — scattered-style
/// holdout, matching how the weight is used downstream.
pub fn tune_lambda_cv(
    x: &MaskedMatrix,
    basis: &PeriodicBasis,
    grid: &[f64],
    folds: usize,
    rank: usize,
    seed: u64,
) -> Result<CvPath> {
    if grid.is_empty() {
        return Err(input_err!("the shrinkage grid is empty"));
    }
    if folds < 2 {
        return Err(input_err!("cross-validation needs at least 2 folds"));
    }
    let fold_entries = entry_folds(x, folds, seed);

    let points: Vec<CvPoint> = grid
        .iter()
        .map(|&lambda| {
            let fold_results: Vec<Option<(f64, usize)>> = fold_entries
                .par_iter()
                .enumerate()
                .map(|(f, entries)| {
                    if entries.is_empty() {
                        log::warn!("fold {f} holds no entries; skipped");
                        return None;
                    }
                    let result: Result<(f64, usize)> = (|| {
                        let train = x.with_masked_out(entries)?;
                        let theta = spline_fit_masked(&train, basis, 0.0)?;
                        let mean = basis.mean_surface(&theta)?;
                        let detrended =
                            MaskedMatrix::new(train.values() - &mean, train.mask().clone())?;
                        let fit =
                            softimpute_als(&detrended, rank, lambda, SoftImputeOpts::default())?;
                        let prediction = mean + fit.product();
                        Ok(held_out_error(&prediction, x, entries))
                    })();
                    match result {
                        Ok(pair) => Some(pair),
                        Err(e) => {
                            log::warn!("fold {f} failed at lambda {lambda}: {e}");
                            None
                        }
                    }
                })
                .collect();
            let mut pooled = PooledScore::default();
            for r in fold_results.into_iter().flatten() {
                pooled.add(r.0, r.1);
            }
            let (score, folds_used, held_out) = pooled.finish();
            CvPoint {
                params: vec![lambda],
                score,
                folds_used,
                held_out,
            }
        })
        .collect();
    pick_best(points)
}

/// Columns with at least one observed entry, split into random folds.
/// Masking a fold's columns entirely simulates downtime.
fn column_folds(x: &MaskedMatrix, folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut candidates: Vec<usize> = (0..x.ncols())
        .filter(|&j| (0..x.nrows()).any(|i| x.is_observed(i, j)))
        .collect();
    let mut rng = rng_from_seed(derive_seed(seed, tags::CV_FOLDS));
    candidates.shuffle(&mut rng);
    let mut out = vec![Vec::new(); folds];
    for (idx, j) in candidates.into_iter().enumerate() {
        out[idx % folds].push(j);
    }
    out
}

/// Shared column-fold engine: for each candidate hyperparameter set, mask
/// each fold's columns wholesale, refit the second stage, and pool the
/// held-out relative error (a simulated-downtime score).
fn column_fold_scores(
    x1: &MaskedMatrix,
    basis: &PeriodicBasis,
    configs: &[(Vec<f64>, Step2Hyper)],
    folds: usize,
    seed: u64,
) -> Result<Vec<CvPoint>> {
    if configs.is_empty() {
        return Err(input_err!("the hyperparameter grid is empty"));
    }
    if folds < 2 {
        return Err(input_err!("cross-validation needs at least 2 folds"));
    }
    let fold_cols = column_folds(x1, folds, seed);

    Ok(configs
        .iter()
        .map(|(params, hyper)| {
            let fold_results: Vec<Option<(f64, usize)>> = fold_cols
                .par_iter()
                .enumerate()
                .map(|(f, cols)| {
                    if cols.is_empty() {
                        log::warn!("column fold {f} is empty; skipped");
                        return None;
                    }
                    let entries: Vec<(usize, usize)> = cols
                        .iter()
                        .flat_map(|&j| {
                            (0..x1.nrows())
                                .filter(move |&i| x1.is_observed(i, j))
                                .map(move |i| (i, j))
                        })
                        .collect();
                    if entries.is_empty() {
                        log::warn!("column fold {f} holds no observed entries; skipped");
                        return None;
                    }
                    let result: Result<(f64, usize)> = (|| {
                        let train = x1.with_masked_out(&entries)?;
                        let (model, _) = step2_fit(&train, basis, hyper, None, None)?;
                        Ok(held_out_error(&model.product(), x1, &entries))
                    })();
                    match result {
                        Ok(pair) => Some(pair),
                        Err(e) => {
                            log::warn!("column fold {f} failed at {params:?}: {e}");
                            None
                        }
                    }
                })
                .collect();
            let mut pooled = PooledScore::default();
            for r in fold_results.into_iter().flatten() {
                pooled.add(r.0, r.1);
            }
            let (score, folds_used, held_out) = pooled.finish();
            CvPoint {
                params: params.clone(),
                score,
                folds_used,
                held_out,
            }
        })
        .collect())
}

/// Select the second-stage ridge pair by column-fold cross-validation with
/// the AR penalty switched off (it is tuned separately afterwards). Input is
/// the scattered-filled matrix the second stage actually consumes.
pub fn tune_lambda12_cv(
    x1: &MaskedMatrix,
    basis: &PeriodicBasis,
    grid: &[(f64, f64)],
    folds: usize,
    base: &Step2Hyper,
    seed: u64,
) -> Result<CvPath> {
    let configs: Vec<(Vec<f64>, Step2Hyper)> = grid
        .iter()
        .map(|&(l1, l2)| {
            (
                vec![l1, l2],
                Step2Hyper {
                    lambda1: l1,
                    lambda2: l2,
                    alpha: 0.0,
                    ..base.clone()
                },
            )
        })
        .collect();
    pick_best(column_fold_scores(x1, basis, &configs, folds, seed)?)
}

/// Select the AR weight by the same simulated-downtime column folds, now with
/// the AR penalty active; the returned path is the plot-ready error curve.
pub fn tune_alpha_cv(
    x1: &MaskedMatrix,
    basis: &PeriodicBasis,
    grid: &[f64],
    folds: usize,
    base: &Step2Hyper,
    seed: u64,
) -> Result<CvPath> {
    let configs: Vec<(Vec<f64>, Step2Hyper)> = grid
        .iter()
        .map(|&alpha| {
            (
                vec![alpha],
                Step2Hyper {
                    alpha,
                    ..base.clone()
                },
            )
        })
        .collect();
    pick_best(column_fold_scores(x1, basis, &configs, folds, seed)?)
}

/// Choose the autoregression order by an information criterion on fitted
/// latent trajectories: each coordinate is fit as a diagonal AR(p) by least
/// squares, and `N ln(RSS/N) + p ln(N)` (N = usable windows) is summed over
/// coordinates. Returns the winning order and the full (order, criterion)
/// path.
pub fn select_p_bic(latents: &DMatrix<f64>, grid: &[usize]) -> Result<(usize, Vec<(usize, f64)>)> {
    if grid.is_empty() {
        return Err(input_err!("the order grid is empty"));
    }
    let n = latents.nrows();
    let r = latents.ncols();
    let mut path = Vec::with_capacity(grid.len());
    for &p in grid {
        let gamma = estimate_gamma(latents, p, &[])?;
        let n_windows = n - p;
        let mut total = 0.0;
        for i in 0..r {
            let mut rss = 0.0;
            for t in p..n {
                let mut e = latents[(t, i)];
                for l in 1..=p {
                    e -= gamma[(l - 1, i)] * latents[(t - l, i)];
                }
                rss += e * e;
            }
            // Guard against a perfect fit: ln(0) would send the criterion to
            // negative infinity and trump every other order.
            let mean_rss = (rss / n_windows as f64).max(f64::MIN_POSITIVE);
            total += n_windows as f64 * mean_rss.ln() + p as f64 * (n_windows as f64).ln();
        }
        path.push((p, total));
    }
    let best = path
        .iter()
        .min_by(|a, b| a.1.partial_cmp(&b.1).expect("criterion values are finite"))
        .map(|&(p, _)| p)
        .expect("grid checked nonempty");
    Ok((best, path))
}
