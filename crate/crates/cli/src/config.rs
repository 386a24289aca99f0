//! Run configuration: one TOML file covering every subcommand, with
//! command-line flags overriding file values and defaults filling the rest.
//! The resolved config is echoed into the output directory so any artifact
//! can be reproduced from its own directory plus the seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use siap_bench::ablate::Variant;
use siap_bench::synth::SyntheticSpec;
use siap_core::pipeline::SiapHyper;
use siap_core::spline::BasisSpec;

use crate::CliError;

/// Everything a run can be told. Top-level fields are shared across
/// subcommands; each subcommand reads its own section.
///
/// `threads` is accepted here for convenience but deliberately excluded from
/// the echo: worker count must never change output bytes, so recording it
/// would break rerun comparisons across thread counts.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every random stream in a run is derived from it.
    pub seed: u64,
    #[serde(skip_serializing)]
    pub threads: Option<usize>,
    pub basis: BasisSpec,
    pub hyper: SiapHyper,
    pub simulate: SimulateSection,
    pub fit: FitSection,
    pub uq: UqSection,
    pub tune: TuneSection,
    pub ablate: AblateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            threads: None,
            basis: BasisSpec {
                periods: vec![60.0, 20.0],
                knots: vec![8, 6],
            },
            hyper: SiapHyper::default(),
            simulate: SimulateSection::default(),
            fit: FitSection::default(),
            uq: UqSection::default(),
            tune: TuneSection::default(),
            ablate: AblateSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    /// Generating recipe; its `seed` is overwritten by the run seed.
    pub spec: SyntheticSpec,
    /// Probability a column is dropped whole (downtime).
    pub p_col: f64,
    /// Probability a surviving entry is dropped individually (scattered).
    pub p_cell: f64,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection {
            spec: SyntheticSpec::default(),
            p_col: 0.2,
            p_cell: 0.2,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct FitSection {
    /// Matrix to impute, as CSV with empty or NaN cells for missing entries.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct UqSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    /// Missingness pattern JSON; inferred from the input when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pattern: Option<PathBuf>,
    /// Ground truth for a coverage report; optional.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth: Option<PathBuf>,
    /// Interval miscoverage level.
    pub alpha: f64,
    /// Probability an observed column is held out whole for calibration.
    pub p_cal1: f64,
    /// Probability an observed entry is held out individually.
    pub p_cal2: f64,
}

impl Default for UqSection {
    fn default() -> Self {
        UqSection {
            input: None,
            pattern: None,
            truth: None,
            alpha: 0.05,
            p_cal1: 0.1,
            p_cal2: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TuneSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    /// First-stage shrinkage grid; empty skips that tuner.
    pub lambda_grid: Vec<f64>,
    /// Second-stage ridge pairs; empty skips that tuner.
    pub lambda12_grid: Vec<(f64, f64)>,
    /// Autoregression-weight grid; empty skips that tuner.
    pub alpha_grid: Vec<f64>,
    /// Autoregression-order grid; empty skips that tuner.
    pub p_grid: Vec<usize>,
    /// Entry-level folds for the shrinkage tuner.
    pub folds: usize,
    /// Column-level folds for the ridge and autoregression tuners.
    pub col_folds: usize,
}

impl Default for TuneSection {
    fn default() -> Self {
        TuneSection {
            input: None,
            lambda_grid: vec![0.5, 1.0, 2.0, 5.0, 10.0, 20.0],
            lambda12_grid: vec![(1.0, 1.0), (3.0, 3.0), (10.0, 10.0), (30.0, 30.0)],
            alpha_grid: vec![0.0, 0.5, 1.0, 3.0, 10.0],
            p_grid: vec![1, 2, 3, 4],
            folds: 10,
            col_folds: 5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    /// Methods to compare; empty means all of them.
    pub variants: Vec<Variant>,
    /// Downtime column probability, reused as the scattered probability.
    pub p0: f64,
    pub replicates: usize,
    /// Interval miscoverage level.
    pub alpha: f64,
    pub p_cal1: f64,
    pub p_cal2: f64,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection {
            variants: Vec::new(),
            p0: 0.3,
            replicates: 20,
            alpha: 0.05,
            p_cal1: 0.1,
            p_cal2: 0.1,
        }
    }
}

impl RunConfig {
    /// Load from a TOML file, or start from defaults when no file is given.
    pub fn load(path: Option<&Path>) -> Result<RunConfig, CliError> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    CliError::config(format!("cannot read config {}: {e}", p.display()))
                })?;
                toml::from_str(&text).map_err(|e| {
                    CliError::config(format!("config {}: {e}", p.display()))
                })
            }
        }
    }

    /// Static sanity checks that do not need any data loaded. Violations are
    /// config errors, reported before the run starts.
    pub fn validate(&self) -> Result<(), CliError> {
        check_probability("simulate.p_col", self.simulate.p_col)?;
        check_probability("simulate.p_cell", self.simulate.p_cell)?;
        check_open_unit("uq.alpha", self.uq.alpha)?;
        check_probability("uq.p_cal1", self.uq.p_cal1)?;
        check_probability("uq.p_cal2", self.uq.p_cal2)?;
        check_open_unit("ablate.alpha", self.ablate.alpha)?;
        check_probability("ablate.p_cal1", self.ablate.p_cal1)?;
        check_probability("ablate.p_cal2", self.ablate.p_cal2)?;
        if !(self.ablate.p0 > 0.0 && self.ablate.p0 < 1.0) {
            return Err(CliError::config(format!(
                "ablate.p0 must lie in (0, 1), got {}",
                self.ablate.p0
            )));
        }
        if self.ablate.replicates == 0 {
            return Err(CliError::config("ablate.replicates must be at least 1"));
        }
        if !self.tune.lambda_grid.is_empty() && self.tune.folds < 2 {
            return Err(CliError::config(format!(
                "tune.folds must be at least 2, got {}",
                self.tune.folds
            )));
        }
        let needs_col_folds = !self.tune.lambda12_grid.is_empty() || !self.tune.alpha_grid.is_empty();
        if needs_col_folds && self.tune.col_folds < 2 {
            return Err(CliError::config(format!(
                "tune.col_folds must be at least 2, got {}",
                self.tune.col_folds
            )));
        }
        self.simulate
            .spec
            .validate()
            .map_err(|e| CliError::config(format!("simulate.spec: {e}")))?;
        Ok(())
    }

    /// Write the resolved config next to the outputs, named after the
    /// subcommand so chained runs into one directory never clobber each
    /// other's echo.
    pub fn write_echo(&self, out_dir: &Path, command: &str) -> Result<PathBuf, CliError> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| CliError::config(format!("cannot serialize config echo: {e}")))?;
        let path = out_dir.join(format!("{command}.config.toml"));
        std::fs::write(&path, text)
            .map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }
}

fn check_probability(name: &str, v: f64) -> Result<(), CliError> {
    if !(0.0..1.0).contains(&v) {
        return Err(CliError::config(format!(
            "{name} must lie in [0, 1), got {v}"
        )));
    }
    Ok(())
}

fn check_open_unit(name: &str, v: f64) -> Result<(), CliError> {
    if !(v > 0.0 && v < 1.0) {
        return Err(CliError::config(format!(
            "{name} must lie in (0, 1), got {v}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        // The worker count stays out of the echo by design.
        assert!(!text.contains("threads"));
    }

    #[test]
    fn partial_sections_fill_from_defaults() {
        let cfg: RunConfig = toml::from_str(
            "seed = 9\n[hyper.step2]\nalpha = 1.5\n[simulate.spec]\nm = 7\nn = 30\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.hyper.step2.alpha, 1.5);
        assert_eq!(
            cfg.hyper.step2.lambda1,
            siap_core::step2::Step2Hyper::default().lambda1
        );
        assert_eq!(cfg.simulate.spec.m, 7);
        assert_eq!(cfg.simulate.spec.r_true, SyntheticSpec::default().r_true);
        assert_eq!(cfg.uq.alpha, 0.05);
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_path() {
        let err = toml::from_str::<RunConfig>("[uq]\nalhpa = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("alhpa"), "{err}");
    }

    #[test]
    fn out_of_range_probabilities_are_config_errors() {
        let mut cfg = RunConfig::default();
        cfg.uq.alpha = 0.0;
        assert!(cfg.validate().is_err());
        cfg.uq.alpha = 0.05;
        cfg.ablate.p0 = 1.0;
        assert!(cfg.validate().is_err());
    }
}
