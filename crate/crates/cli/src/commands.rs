//! The five subcommand bodies. Each one reads its section of the resolved
//! config, writes the config echo plus its artifacts into the output
//! directory, and never touches its input files.

use std::path::Path;

use serde::Serialize;

use siap_bench::ablate::{run_ablation, AblationConfig, Variant};
use siap_bench::synth::generate_synthetic;
use siap_bench::tune::{select_p_bic, tune_alpha_cv, tune_lambda12_cv, tune_lambda_cv, CvPath};
use siap_core::conformal::{avg_coverage, avg_coverage_rows, pattern_test_set};
use siap_core::io::{load_dense, load_matrix, store_dense, store_json, store_mask, store_matrix};
use siap_core::missing::{sample_mixed_missingness, MissingnessPattern};
use siap_core::model_io::{store_imputed, store_intervals, store_step1_model, store_step2_model};
use siap_core::pipeline::{fit_siap, uq_siap, SiapHyper};
use siap_core::spline::PeriodicBasis;
use siap_core::step1::step1_fit;
use siap_core::step2::{step2_fit, Step2Hyper};

use crate::config::RunConfig;
use crate::CliError;

/// Generate a synthetic matrix: full ground truth, a mixed missingness
/// pattern, and the masked matrix the other commands consume.
pub fn cmd_simulate(config: &RunConfig, out: &Path) -> Result<(), CliError> {
    let mut spec = config.simulate.spec.clone();
    spec.seed = config.seed;
    let data = generate_synthetic(&spec).map_err(CliError::from_run)?;
    let pattern = sample_mixed_missingness(
        spec.m,
        spec.n,
        config.simulate.p_col,
        config.simulate.p_cell,
        config.seed,
    )
    .map_err(CliError::from_run)?;
    let masked = pattern.apply(data.x.values()).map_err(CliError::from_run)?;

    config.write_echo(out, "simulate")?;
    store_dense(data.x.values(), &out.join("truth.csv")).map_err(CliError::from_run)?;
    store_matrix(&masked, &out.join("x.csv")).map_err(CliError::from_run)?;
    store_mask(masked.mask(), &out.join("mask.csv")).map_err(CliError::from_run)?;
    store_json(&pattern, &out.join("pattern.json")).map_err(CliError::from_run)?;
    log::info!(
        "simulated {}x{} matrix: {} downtime columns, {} scattered entries",
        spec.m,
        spec.n,
        pattern.downtime_cols.len(),
        pattern.scattered.len()
    );
    Ok(())
}

/// Fit the two-step model on a masked matrix and write both stage models plus
/// the imputed matrix with per-entry source tags.
pub fn cmd_fit(config: &RunConfig, out: &Path) -> Result<(), CliError> {
    let input = require_input(config.fit.input.as_deref(), "fit.input")?;
    let x = load_matrix(input).map_err(CliError::from_run)?;
    let basis = build_basis(config, x.ncols())?;

    let fit = fit_siap(&x, &basis, &config.hyper).map_err(CliError::from_run)?;

    config.write_echo(out, "fit")?;
    store_step1_model(&fit.step1.model, &out.join("step1_model.json"))
        .map_err(CliError::from_run)?;
    store_step2_model(&fit.step2, &out.join("step2_model.json")).map_err(CliError::from_run)?;
    store_imputed(
        &fit.imputed,
        &out.join("imputed.csv"),
        &out.join("imputed_tags.csv"),
    )
    .map_err(CliError::from_run)?;
    use siap_core::step2::SourceTag;
    log::info!(
        "fit done: {} observed, {} scattered-imputed, {} downtime-imputed entries",
        fit.imputed.count(SourceTag::Observed),
        fit.imputed.count(SourceTag::Step1),
        fit.imputed.count(SourceTag::Step2)
    );
    Ok(())
}

#[derive(Serialize)]
struct CoverageReport {
    alpha: f64,
    test_entries: usize,
    avg_coverage: f64,
    /// Per-row mean coverage; null for rows without test entries.
    row_coverage: Vec<Option<f64>>,
}

/// Calibrated prediction intervals for the missing entries, plus a coverage
/// report when the ground truth is available.
pub fn cmd_uq(config: &RunConfig, out: &Path) -> Result<(), CliError> {
    let input = require_input(config.uq.input.as_deref(), "uq.input")?;
    let x = load_matrix(input).map_err(CliError::from_run)?;
    let pattern = match &config.uq.pattern {
        Some(path) => {
            let p: MissingnessPattern =
                siap_core::io::load_json(path).map_err(CliError::from_run)?;
            p.validate().map_err(CliError::from_run)?;
            p
        }
        None => MissingnessPattern::infer(&x),
    };
    let basis = build_basis(config, x.ncols())?;

    let run = uq_siap(
        &x,
        &pattern,
        &basis,
        &config.hyper,
        config.uq.p_cal1,
        config.uq.p_cal2,
        config.uq.alpha,
        config.seed,
    )
    .map_err(CliError::from_run)?;

    config.write_echo(out, "uq")?;
    store_json(&run.split, &out.join("split.json")).map_err(CliError::from_run)?;
    store_intervals(
        &run.intervals,
        &run.quantiles,
        &out.join("interval_center.csv"),
        &out.join("interval_lower.csv"),
        &out.join("interval_upper.csv"),
        &out.join("quantiles.json"),
    )
    .map_err(CliError::from_run)?;

    if let Some(truth_path) = &config.uq.truth {
        let truth = load_dense(truth_path).map_err(CliError::from_run)?;
        let test_set = pattern_test_set(&pattern);
        let report = CoverageReport {
            alpha: config.uq.alpha,
            test_entries: test_set.len(),
            avg_coverage: avg_coverage(&run.intervals, &truth, &test_set)
                .map_err(CliError::from_run)?,
            row_coverage: avg_coverage_rows(&run.intervals, &truth, &test_set)
                .map_err(CliError::from_run)?,
        };
        store_json(&report, &out.join("coverage.json")).map_err(CliError::from_run)?;
        log::info!(
            "coverage over {} test entries: {:.4}",
            report.test_entries,
            report.avg_coverage
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct SelectedHyper {
    /// Final hyperparameters after every requested tuner ran.
    hyper: SiapHyper,
    /// Which parameters the tuners actually chose (the rest came from the
    /// config unchanged).
    tuned: Vec<String>,
}

/// Hyperparameter selection: shrinkage by entry-level cross-validation,
/// ridge pair and autoregression weight by simulated-downtime column folds,
/// autoregression order by an information criterion on fitted latents.
/// Each tuner runs only when its grid is non-empty; every path is written as
/// a plot-ready CSV.
pub fn cmd_tune(config: &RunConfig, out: &Path) -> Result<(), CliError> {
    let input = require_input(config.tune.input.as_deref(), "tune.input")?;
    let x = load_matrix(input).map_err(CliError::from_run)?;
    let basis = build_basis(config, x.ncols())?;
    let section = &config.tune;

    config.write_echo(out, "tune")?;
    let mut hyper = config.hyper.clone();
    let mut tuned = Vec::new();

    if !section.lambda_grid.is_empty() {
        let path = tune_lambda_cv(
            &x,
            &basis,
            &section.lambda_grid,
            section.folds,
            hyper.step1.rank,
            config.seed,
        )
        .map_err(CliError::from_run)?;
        hyper.step1.lambda = path.best().params[0];
        tuned.push("step1.lambda".to_string());
        write_path_csv(&path, &["lambda"], &out.join("lambda_path.csv"))?;
        log::info!("selected step1.lambda = {}", hyper.step1.lambda);
    }

    // The later tuners exercise the second stage, which consumes the
    // scattered-filled output of the first stage; fit that once.
    let needs_stage2 = !section.lambda12_grid.is_empty()
        || !section.alpha_grid.is_empty()
        || !section.p_grid.is_empty();
    if !needs_stage2 {
        store_json(&SelectedHyper { hyper, tuned }, &out.join("selected.json"))
            .map_err(CliError::from_run)?;
        return Ok(());
    }
    let s1 = step1_fit(&x, &basis, &hyper.step1).map_err(CliError::from_run)?;

    if !section.lambda12_grid.is_empty() {
        let path = tune_lambda12_cv(
            &s1.x1,
            &basis,
            &section.lambda12_grid,
            section.col_folds,
            &hyper.step2,
            config.seed,
        )
        .map_err(CliError::from_run)?;
        hyper.step2.lambda1 = path.best().params[0];
        hyper.step2.lambda2 = path.best().params[1];
        tuned.push("step2.lambda1".to_string());
        tuned.push("step2.lambda2".to_string());
        write_path_csv(&path, &["lambda1", "lambda2"], &out.join("lambda12_path.csv"))?;
        log::info!(
            "selected step2.lambda1 = {}, step2.lambda2 = {}",
            hyper.step2.lambda1,
            hyper.step2.lambda2
        );
    }

    if !section.p_grid.is_empty() {
        // Order selection looks at latent trajectories fitted without the
        // autoregression penalty, so the candidate orders compete on equal
        // footing instead of chasing the penalty already baked in.
        let h2 = Step2Hyper {
            alpha: 0.0,
            ..hyper.step2.clone()
        };
        let (model, _) = step2_fit(&s1.x1, &basis, &h2, None, None).map_err(CliError::from_run)?;
        let latents = model.b_detrended(&basis).map_err(CliError::from_run)?;
        let (best_p, bic_path) =
            select_p_bic(&latents, &section.p_grid).map_err(CliError::from_run)?;
        hyper.step2.p = best_p;
        tuned.push("step2.p".to_string());
        let mut csv = String::from("p,criterion,selected\n");
        for &(p, c) in &bic_path {
            csv.push_str(&format!("{p},{c},{}\n", if p == best_p { 1 } else { 0 }));
        }
        write_text(&out.join("p_path.csv"), &csv)?;
        log::info!("selected step2.p = {best_p}");
    }

    if !section.alpha_grid.is_empty() {
        let path = tune_alpha_cv(
            &s1.x1,
            &basis,
            &section.alpha_grid,
            section.col_folds,
            &hyper.step2,
            config.seed,
        )
        .map_err(CliError::from_run)?;
        hyper.step2.alpha = path.best().params[0];
        tuned.push("step2.alpha".to_string());
        write_path_csv(&path, &["alpha"], &out.join("alpha_path.csv"))?;
        log::info!("selected step2.alpha = {}", hyper.step2.alpha);
    }

    store_json(&SelectedHyper { hyper, tuned }, &out.join("selected.json"))
        .map_err(CliError::from_run)?;
    Ok(())
}

/// Run the multi-variant comparison and write the report as JSON plus a flat
/// CSV table.
pub fn cmd_ablate(config: &RunConfig, out: &Path) -> Result<(), CliError> {
    let mut spec = config.simulate.spec.clone();
    spec.seed = config.seed;
    let variants = if config.ablate.variants.is_empty() {
        Variant::ALL.to_vec()
    } else {
        config.ablate.variants.clone()
    };
    let ablation = AblationConfig {
        spec,
        variants,
        p0: config.ablate.p0,
        replicates: config.ablate.replicates,
        alpha: config.ablate.alpha,
        p_cal1: config.ablate.p_cal1,
        p_cal2: config.ablate.p_cal2,
        hyper: config.hyper.clone(),
        basis: config.basis.clone(),
        seed: config.seed,
    };

    config.write_echo(out, "ablate")?;
    let report = run_ablation(&ablation).map_err(CliError::from_run)?;
    store_json(&report, &out.join("report.json")).map_err(CliError::from_run)?;
    write_text(&out.join("report.csv"), &report.to_csv())?;
    log::info!(
        "ablation finished in {:.1}s: {} variants x {} replicates",
        report.timings.total_seconds,
        report.variants.len(),
        report.replicates
    );
    for (variant, seconds) in &report.timings.per_variant_seconds {
        log::debug!("  {variant}: {seconds:.1}s");
    }
    Ok(())
}

fn require_input<'a>(path: Option<&'a Path>, field: &str) -> Result<&'a Path, CliError> {
    path.ok_or_else(|| {
        CliError::config(format!(
            "no input matrix given: set {field} in the config or pass --input"
        ))
    })
}

fn build_basis(config: &RunConfig, n: usize) -> Result<PeriodicBasis, CliError> {
    let grid: Vec<f64> = (0..n).map(|t| t as f64).collect();
    config
        .basis
        .build(&grid)
        .map_err(|e| CliError::config(format!("basis: {e}")))
}

fn write_path_csv(path: &CvPath, names: &[&str], file: &Path) -> Result<(), CliError> {
    write_text(file, &path.to_csv(names))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text)
        .map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))
}
