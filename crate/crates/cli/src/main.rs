//! `siap` — two-step matrix imputation for spectral time series.
//!
//! Subcommands: `simulate` (synthetic data), `fit` (impute a matrix), `uq`
//! (calibrated prediction intervals), `tune` (hyperparameter selection), and
//! `ablate` (multi-variant comparison). Progress goes to stderr; all machine
//! output goes to files in `--out`, so stdout stays clean for piping.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde::Serialize;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "siap", version)]
#[command(about = "Two-step matrix imputation with calibrated prediction intervals")]
struct Cli {
    /// TOML run config; flags override its values, defaults fill the rest.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory, created if absent.
    #[arg(long, global = true, default_value = "siap_out")]
    out: PathBuf,

    /// Master seed for every random stream in the run.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker thread cap; any value produces the same bytes as 1.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// More stderr detail (-v info, -vv debug, -vvv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic matrix, missingness pattern, and ground truth.
    Simulate {
        /// Rows (spectral channels).
        #[arg(long)]
        m: Option<usize>,
        /// Columns (time steps).
        #[arg(long)]
        n: Option<usize>,
        /// Probability a column is dropped whole.
        #[arg(long)]
        p_col: Option<f64>,
        /// Probability a surviving entry is dropped individually.
        #[arg(long)]
        p_cell: Option<f64>,
    },
    /// Fit the two-step model and write the imputed matrix.
    Fit {
        /// Matrix CSV with empty or NaN cells for missing entries.
        #[arg(long)]
        input: Option<PathBuf>,
        /// First-stage factorization rank.
        #[arg(long)]
        step1_rank: Option<usize>,
        /// First-stage noise-covariance rank (capped at the row count).
        #[arg(long)]
        cov_rank: Option<usize>,
        /// First-stage shrinkage weight.
        #[arg(long)]
        step1_lambda: Option<f64>,
        /// Second-stage factorization rank.
        #[arg(long)]
        step2_rank: Option<usize>,
        /// Second-stage ridge on the row factors.
        #[arg(long)]
        lambda1: Option<f64>,
        /// Second-stage ridge on the latent rows.
        #[arg(long)]
        lambda2: Option<f64>,
        /// Weight of the autoregression penalty.
        #[arg(long)]
        ar_weight: Option<f64>,
        /// Autoregression order.
        #[arg(long)]
        ar_order: Option<usize>,
    },
    /// Calibrated prediction intervals for the missing entries.
    Uq {
        /// Matrix CSV with empty or NaN cells for missing entries.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Missingness pattern JSON; inferred from the input when absent.
        #[arg(long)]
        pattern: Option<PathBuf>,
        /// Ground truth CSV; enables the coverage report.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Interval miscoverage level.
        #[arg(long)]
        alpha: Option<f64>,
        /// Probability an observed column is held out whole for calibration.
        #[arg(long)]
        p_cal1: Option<f64>,
        /// Probability an observed entry is held out individually.
        #[arg(long)]
        p_cal2: Option<f64>,
    },
    /// Cross-validation and information-criterion hyperparameter selection.
    Tune {
        /// Matrix CSV with empty or NaN cells for missing entries.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Entry-level folds for the shrinkage tuner.
        #[arg(long)]
        folds: Option<usize>,
        /// Column-level folds for the ridge and autoregression tuners.
        #[arg(long)]
        col_folds: Option<usize>,
    },
    /// Multi-variant synthetic comparison with replicate statistics.
    Ablate {
        /// Downtime column probability, reused as the scattered probability.
        #[arg(long)]
        p0: Option<f64>,
        /// Number of independent mask draws.
        #[arg(long)]
        replicates: Option<usize>,
        /// Interval miscoverage level.
        #[arg(long)]
        alpha: Option<f64>,
    },
}

impl Command {
    /// Flag > config: copy every flag that was actually given onto the
    /// config, so the echo records exactly what ran.
    fn apply_overrides(&self, cfg: &mut RunConfig) {
        fn set<T: Clone>(target: &mut T, source: &Option<T>) {
            if let Some(v) = source {
                *target = v.clone();
            }
        }
        match self {
            Command::Simulate { m, n, p_col, p_cell } => {
                set(&mut cfg.simulate.spec.m, m);
                set(&mut cfg.simulate.spec.n, n);
                set(&mut cfg.simulate.p_col, p_col);
                set(&mut cfg.simulate.p_cell, p_cell);
            }
            Command::Fit {
                input,
                step1_rank,
                cov_rank,
                step1_lambda,
                step2_rank,
                lambda1,
                lambda2,
                ar_weight,
                ar_order,
            } => {
                if input.is_some() {
                    cfg.fit.input.clone_from(input);
                }
                set(&mut cfg.hyper.step1.rank, step1_rank);
                set(&mut cfg.hyper.step1.cov_rank, cov_rank);
                set(&mut cfg.hyper.step1.lambda, step1_lambda);
                set(&mut cfg.hyper.step2.rank, step2_rank);
                set(&mut cfg.hyper.step2.lambda1, lambda1);
                set(&mut cfg.hyper.step2.lambda2, lambda2);
                set(&mut cfg.hyper.step2.alpha, ar_weight);
                set(&mut cfg.hyper.step2.p, ar_order);
            }
            Command::Uq {
                input,
                pattern,
                truth,
                alpha,
                p_cal1,
                p_cal2,
            } => {
                if input.is_some() {
                    cfg.uq.input.clone_from(input);
                }
                if pattern.is_some() {
                    cfg.uq.pattern.clone_from(pattern);
                }
                if truth.is_some() {
                    cfg.uq.truth.clone_from(truth);
                }
                set(&mut cfg.uq.alpha, alpha);
                set(&mut cfg.uq.p_cal1, p_cal1);
                set(&mut cfg.uq.p_cal2, p_cal2);
            }
            Command::Tune {
                input,
                folds,
                col_folds,
            } => {
                if input.is_some() {
                    cfg.tune.input.clone_from(input);
                }
                set(&mut cfg.tune.folds, folds);
                set(&mut cfg.tune.col_folds, col_folds);
            }
            Command::Ablate {
                p0,
                replicates,
                alpha,
            } => {
                set(&mut cfg.ablate.p0, p0);
                set(&mut cfg.ablate.replicates, replicates);
                set(&mut cfg.ablate.alpha, alpha);
            }
        }
    }
}

/// CLI-level error: the failure class decides the exit code, and the message
/// is emitted as one JSON line on stderr so scripts can parse failures.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or config file contents. Exit 2.
    Config(String),
    /// Missing, malformed, or incompatible input data. Exit 3.
    Data(String),
    /// A solve failed numerically. Exit 4.
    Numerical(String),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError::Data(msg.into())
    }

    /// Classify a library error raised while running a command. Conditioning
    /// failures are numerical; everything else at this stage means the data
    /// (or its interaction with the chosen parameters) was unusable.
    pub fn from_run(err: siap_core::Error) -> Self {
        match err {
            siap_core::Error::Conditioning(msg) => CliError::Numerical(msg),
            other => CliError::Data(other.to_string()),
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Numerical(_) => "numerical",
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Numerical(m) => m,
        }
    }

    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

#[derive(Serialize)]
struct ErrorJson<'a> {
    error: ErrorBody<'a>,
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    kind: &'a str,
    exit_code: i32,
    message: &'a str,
}

fn main() {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    match run(&cli) {
        Ok(()) => {}
        Err(err) => {
            let body = ErrorJson {
                error: ErrorBody {
                    kind: err.kind(),
                    exit_code: err.exit_code(),
                    message: err.message(),
                },
            };
            log::error!("{}: {}", err.kind(), err.message());
            eprintln!(
                "{}",
                serde_json::to_string(&body).expect("error body serializes")
            );
            std::process::exit(err.exit_code());
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let mut config = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if cli.threads.is_some() {
        config.threads = cli.threads;
    }
    cli.command.apply_overrides(&mut config);
    config.validate()?;

    if let Some(threads) = config.threads {
        if threads == 0 {
            return Err(CliError::config("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::config(format!("cannot configure {threads} threads: {e}")))?;
    }

    std::fs::create_dir_all(&cli.out)
        .map_err(|e| CliError::data(format!("cannot create {}: {e}", cli.out.display())))?;

    match &cli.command {
        Command::Simulate { .. } => commands::cmd_simulate(&config, &cli.out),
        Command::Fit { .. } => commands::cmd_fit(&config, &cli.out),
        Command::Uq { .. } => commands::cmd_uq(&config, &cli.out),
        Command::Tune { .. } => commands::cmd_tune(&config, &cli.out),
        Command::Ablate { .. } => commands::cmd_ablate(&config, &cli.out),
    }
}
