//! End-to-end tests of the `siap` binary: exit codes, error JSON, flag
//! precedence, config echoes, and the file contracts of each subcommand.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn siap() -> Command {
    Command::new(env!("CARGO_BIN_EXE_siap"))
}

fn run(args: &[&str]) -> Output {
    siap().args(args).output().expect("binary runs")
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr_error_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text
        .lines()
        .rev()
        .find(|l| l.starts_with('{'))
        .unwrap_or_else(|| panic!("no JSON line on stderr:\n{text}"));
    serde_json::from_str(line).expect("stderr JSON parses")
}

fn read_dir_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

fn simulate_small(dir: &Path, seed: &str) -> PathBuf {
    let out = dir.join("sim");
    let res = run(&[
        "simulate",
        "--out",
        out.to_str().unwrap(),
        "--seed",
        seed,
        "--m",
        "24",
        "--n",
        "60",
    ]);
    assert_success(&res);
    out
}

/// Hyperparameters small enough that a fit takes well under a second.
fn small_hyper_toml() -> &'static str {
    "[basis]\nperiods = [30.0]\nknots = [6]\n\
     [hyper.step1]\nrank = 4\ncov_rank = 4\nmax_iter = 40\n\
     [hyper.step2]\nrank = 4\nmax_iter = 60\n"
}

#[test]
fn success_keeps_stdout_empty_and_writes_the_echo() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    let res = run(&[
        "simulate",
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "3",
        "--m",
        "10",
        "--n",
        "20",
    ]);
    assert_success(&res);
    assert!(res.stdout.is_empty(), "stdout must stay clean for piping");
    for name in ["x.csv", "truth.csv", "mask.csv", "pattern.json", "simulate.config.toml"] {
        assert!(out.join(name).is_file(), "{name} missing");
    }
    let echo = std::fs::read_to_string(out.join("simulate.config.toml")).unwrap();
    assert!(echo.contains("seed = 3"));
    assert!(echo.contains("m = 10"));
    assert!(!echo.contains("threads"));
}

#[test]
fn flags_override_config_file_values_and_the_echo_records_them() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "seed = 5\n[simulate.spec]\nm = 30\nn = 40\n").unwrap();
    let out = dir.path().join("sim");
    let res = run(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--m",
        "12",
    ]);
    assert_success(&res);
    let echo = std::fs::read_to_string(out.join("simulate.config.toml")).unwrap();
    assert!(echo.contains("m = 12"), "flag must beat the config file");
    assert!(echo.contains("n = 40"), "config must beat the default");
    assert!(echo.contains("seed = 5"));
    // And the artifact actually has the overridden shape.
    let x = std::fs::read_to_string(out.join("x.csv")).unwrap();
    assert_eq!(x.lines().count(), 12);
}

#[test]
fn a_run_is_reproducible_from_its_own_echo() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let res = run(&[
        "simulate",
        "--out",
        first.to_str().unwrap(),
        "--seed",
        "11",
        "--m",
        "14",
        "--n",
        "33",
        "--p-col",
        "0.3",
    ]);
    assert_success(&res);
    let echo = first.join("simulate.config.toml");
    let second = dir.path().join("second");
    let res = run(&[
        "simulate",
        "--config",
        echo.to_str().unwrap(),
        "--out",
        second.to_str().unwrap(),
    ]);
    assert_success(&res);
    assert_eq!(read_dir_files(&first), read_dir_files(&second));
}

#[test]
fn unknown_config_keys_exit_2_with_error_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[uq]\nalhpa = 0.05\n").unwrap();
    let res = run(&[
        "uq",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(2));
    let err = stderr_error_json(&res);
    assert_eq!(err["error"]["kind"], "config");
    assert_eq!(err["error"]["exit_code"], 2);
    assert!(
        err["error"]["message"].as_str().unwrap().contains("alhpa"),
        "schema violations must name the offending field: {err}"
    );
}

#[test]
fn invalid_parameter_values_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let res = run(&[
        "uq",
        "--alpha",
        "1.5",
        "--input",
        "whatever.csv",
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(2));
    assert_eq!(stderr_error_json(&res)["error"]["kind"], "config");
}

#[test]
fn missing_input_file_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let res = run(&[
        "fit",
        "--input",
        dir.path().join("nope.csv").to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(3));
    let err = stderr_error_json(&res);
    assert_eq!(err["error"]["kind"], "data");
    assert_eq!(err["error"]["exit_code"], 3);
}

#[test]
fn omitted_input_path_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let res = run(&["fit", "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    assert!(stderr_error_json(&res)["error"]["message"]
        .as_str()
        .unwrap()
        .contains("fit.input"));
}

#[test]
fn malformed_matrix_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "1.0,2.0\n3.0,oops\n").unwrap();
    let res = run(&[
        "fit",
        "--input",
        bad.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(3));
}

#[test]
fn fit_writes_models_and_never_mutates_its_input() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate_small(dir.path(), "21");
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, small_hyper_toml()).unwrap();
    let input = sim.join("x.csv");
    let before = std::fs::read(&input).unwrap();
    let out = dir.path().join("fit");
    let res = run(&[
        "fit",
        "--config",
        cfg.to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "21",
    ]);
    assert_success(&res);
    assert_eq!(std::fs::read(&input).unwrap(), before, "input was mutated");
    for name in [
        "step1_model.json",
        "step2_model.json",
        "imputed.csv",
        "imputed_tags.csv",
        "fit.config.toml",
    ] {
        assert!(out.join(name).is_file(), "{name} missing");
    }
    // Every cell is filled and tagged.
    let imputed = std::fs::read_to_string(out.join("imputed.csv")).unwrap();
    assert!(!imputed.contains("NaN"));
    let tags = std::fs::read_to_string(out.join("imputed_tags.csv")).unwrap();
    assert!(tags.contains('1') || tags.contains('2'));
}

#[test]
fn fit_on_a_fully_observed_matrix_returns_it_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("full.csv");
    let mut text = String::new();
    for i in 0..9 {
        // Smooth structure plus a rough component: an exactly low-rank,
        // noise-free matrix is a degenerate boundary case for the
        // covariance model and is rejected as such.
        let row: Vec<String> = (0..15)
            .map(|j| {
                let smooth = 5.0 + (i as f64) * 0.25 + ((j as f64) * 0.7).sin();
                let rough = 0.05 * ((1.3 * i as f64) + (2.7 * j as f64) + 0.5).sin();
                format!("{}", smooth + rough)
            })
            .collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    std::fs::write(&input, &text).unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        "[basis]\nperiods = [15.0]\nknots = [5]\n\
         [hyper.step1]\nrank = 2\ncov_rank = 2\nmax_iter = 20\n\
         [hyper.step2]\nrank = 2\nmax_iter = 30\n",
    )
    .unwrap();
    let out = dir.path().join("fit");
    let res = run(&[
        "fit",
        "--config",
        cfg.to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_success(&res);
    let imputed = std::fs::read_to_string(out.join("imputed.csv")).unwrap();
    assert_eq!(imputed, text, "observed entries must pass through bit-exactly");
    let tags = std::fs::read_to_string(out.join("imputed_tags.csv")).unwrap();
    assert!(
        tags.split([',', '\n']).filter(|s| !s.is_empty()).all(|s| s == "0"),
        "a fully observed matrix has nothing to impute"
    );
}

#[test]
fn uq_writes_intervals_and_coverage_only_with_truth() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate_small(dir.path(), "31");
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, small_hyper_toml()).unwrap();

    let out_no_truth = dir.path().join("uq1");
    let res = run(&[
        "uq",
        "--config",
        cfg.to_str().unwrap(),
        "--input",
        sim.join("x.csv").to_str().unwrap(),
        "--pattern",
        sim.join("pattern.json").to_str().unwrap(),
        "--out",
        out_no_truth.to_str().unwrap(),
        "--seed",
        "31",
    ]);
    assert_success(&res);
    for name in [
        "split.json",
        "quantiles.json",
        "interval_center.csv",
        "interval_lower.csv",
        "interval_upper.csv",
        "uq.config.toml",
    ] {
        assert!(out_no_truth.join(name).is_file(), "{name} missing");
    }
    assert!(!out_no_truth.join("coverage.json").exists());

    let out_truth = dir.path().join("uq2");
    let res = run(&[
        "uq",
        "--config",
        cfg.to_str().unwrap(),
        "--input",
        sim.join("x.csv").to_str().unwrap(),
        "--pattern",
        sim.join("pattern.json").to_str().unwrap(),
        "--truth",
        sim.join("truth.csv").to_str().unwrap(),
        "--out",
        out_truth.to_str().unwrap(),
        "--seed",
        "31",
    ]);
    assert_success(&res);
    let cov: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_truth.join("coverage.json")).unwrap())
            .unwrap();
    let avg = cov["avg_coverage"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&avg), "coverage {avg} out of range");
    assert!(cov["test_entries"].as_u64().unwrap() > 0);
    assert_eq!(
        cov["row_coverage"].as_array().unwrap().len(),
        24,
        "one row-coverage slot per matrix row"
    );
}

#[test]
fn uq_infers_the_pattern_when_none_is_given() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate_small(dir.path(), "41");
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, small_hyper_toml()).unwrap();
    let out = dir.path().join("uq");
    let res = run(&[
        "uq",
        "--config",
        cfg.to_str().unwrap(),
        "--input",
        sim.join("x.csv").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "41",
    ]);
    assert_success(&res);
    assert!(out.join("quantiles.json").is_file());
}

#[test]
fn tune_writes_selected_hyperparameters_and_paths() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate_small(dir.path(), "51");
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        format!(
            "{}[tune]\nlambda_grid = [1.0, 5.0]\nlambda12_grid = [[1.0, 1.0], [5.0, 5.0]]\n\
             alpha_grid = [0.0, 2.0]\np_grid = [1, 2]\nfolds = 3\ncol_folds = 3\n",
            small_hyper_toml()
        ),
    )
    .unwrap();
    let out = dir.path().join("tune");
    let res = run(&[
        "tune",
        "--config",
        cfg.to_str().unwrap(),
        "--input",
        sim.join("x.csv").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "51",
    ]);
    assert_success(&res);
    for name in [
        "selected.json",
        "lambda_path.csv",
        "lambda12_path.csv",
        "alpha_path.csv",
        "p_path.csv",
        "tune.config.toml",
    ] {
        assert!(out.join(name).is_file(), "{name} missing");
    }
    let selected: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("selected.json")).unwrap()).unwrap();
    let lambda = selected["hyper"]["step1"]["lambda"].as_f64().unwrap();
    assert!(lambda == 1.0 || lambda == 5.0, "selected off-grid: {lambda}");
    let tuned: Vec<&str> = selected["tuned"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    assert_eq!(
        tuned,
        [
            "step1.lambda",
            "step2.lambda1",
            "step2.lambda2",
            "step2.p",
            "step2.alpha"
        ]
    );
    let path = std::fs::read_to_string(out.join("lambda_path.csv")).unwrap();
    assert!(path.starts_with("lambda,"), "plot-ready header: {path}");
    assert_eq!(path.lines().count(), 3, "header plus one line per grid point");
}

#[test]
fn tune_skips_tuners_with_empty_grids() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate_small(dir.path(), "61");
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        format!(
            "{}[tune]\nlambda_grid = [2.0, 4.0]\nlambda12_grid = []\nalpha_grid = []\np_grid = []\nfolds = 3\n",
            small_hyper_toml()
        ),
    )
    .unwrap();
    let out = dir.path().join("tune");
    let res = run(&[
        "tune",
        "--config",
        cfg.to_str().unwrap(),
        "--input",
        sim.join("x.csv").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_success(&res);
    assert!(out.join("lambda_path.csv").is_file());
    assert!(!out.join("alpha_path.csv").exists());
    assert!(!out.join("p_path.csv").exists());
    let selected: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("selected.json")).unwrap()).unwrap();
    assert_eq!(
        selected["tuned"].as_array().unwrap().len(),
        1,
        "only the shrinkage tuner ran"
    );
}

#[test]
fn ablate_writes_report_json_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        format!(
            "{}[simulate.spec]\nm = 18\nn = 40\nperiods = [20.0]\namplitudes = [2.0]\n\
             [ablate]\nvariants = [\"SI\", \"SIAP\"]\nreplicates = 2\np0 = 0.2\n",
            small_hyper_toml()
        ),
    )
    .unwrap();
    let out = dir.path().join("ablate");
    let res = run(&[
        "ablate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "71",
    ]);
    assert_success(&res);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let variants = report["variants"].as_array().unwrap();
    assert_eq!(variants.len(), 2);
    assert_eq!(variants[0]["variant"], "SI");
    assert_eq!(variants[1]["variant"], "SIAP");
    assert_eq!(report["replicates"], 2);
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "header plus one line per variant");
}

#[test]
fn bad_basis_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate_small(dir.path(), "81");
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[basis]\nperiods = [30.0]\nknots = []\n").unwrap();
    let res = run(&[
        "fit",
        "--config",
        cfg.to_str().unwrap(),
        "--input",
        sim.join("x.csv").to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(2));
    assert_eq!(stderr_error_json(&res)["error"]["kind"], "config");
}
