//! Two-step low-rank imputation for seasonal sensor matrices with mixed
//! missingness (whole-column downtime plus scattered dropouts), with
//! split-conformal uncertainty intervals and a simulation/ablation harness.
//!
//! The pipeline: detrend with periodic splines, fit a spiked-covariance
//! factor model by ECM to fill scattered entries, then impute downtime
//! columns with a latent-space autoregressively regularized matrix
//! factorization. See the crate README for formats and CLI usage.

pub mod conformal;
pub mod error;
pub mod io;
pub mod masked;
pub mod missing;
pub mod model_io;
pub mod pipeline;
pub mod seed;
pub mod softimpute;
pub mod spiked;
pub mod step1;
pub mod step2;
pub mod spline;

pub use conformal::{IntervalEstimate, RowQuantiles};
pub use error::{Error, Result};
pub use masked::{EntryKind, MaskedMatrix};
pub use missing::{CalibrationSplit, MissingnessPattern};
pub use pipeline::{fit_siap, uq_siap, SiapFit, SiapHyper, UqRun};
pub use spline::{BasisSpec, PeriodicBasis};
pub use step2::{ImputedMatrix, SourceTag, Step2Hyper, Step2Model};
