//! Experiment harness for the two-step imputation library: model-matched
//! synthetic data, relative-error metrics, the module-ablation runner, and
//! cross-validation / information-criterion hyperparameter selection.

pub mod ablate;
pub mod metrics;
pub mod synth;
pub mod tune;

pub use ablate::{run_ablation, AblationConfig, ExperimentReport, Variant};
pub use metrics::{mrae, mrae_margin, rae, relative_mrae_margin, MraeResult};
pub use synth::{generate_synthetic, SyntheticData, SyntheticSpec};
