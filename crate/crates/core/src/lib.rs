//! Split conformal prediction with a smoothed Kolmogorov-Smirnov training
//! regularizer for conditional coverage.
//!
//! The crate trains differentiable regression models so that, after the usual
//! split-conformal calibration step, the resulting predictive intervals hold
//! their nominal coverage not just marginally but (approximately) conditional
//! on the features. The lever is a penalty on the worst-case smoothed KS
//! distance between the marginal nonconformity-score distribution and the
//! per-point conditional score distribution simulated from a fitted
//! conditional density model.
//!
//! Module map:
//! - [`data`]: synthetic generators, CSV ingestion, splitting, standardization
//! - [`diffmodels`]: linear / MLP / two-headed quantile models plus the
//!   reverse-mode tape every training objective is built on
//! - [`cde`]: conditional density models (mixture density network,
//!   Nadaraya-Watson kernel estimator)
//! - [`scores`]: nonconformity scores and their inversion into intervals
//! - [`conformal`]: split-conformal calibration and calibrated predictors
//! - [`ksreg`]: ECDFs, exact/smoothed KS, the KS-regularized training loop,
//!   and the orthogonal quantile regression baseline
//! - [`eval`]: coverage metrics (marginal, analytic conditional, worst-slab)
//! - [`cli`]: experiment runner behind the `kscp` binary

pub mod cde;
pub mod cli;
pub mod conformal;
pub mod data;
pub mod diffmodels;
pub mod eval;
pub mod ksreg;
pub mod scores;

pub use cde::{CdeModel, CondDensity, MdnConfig, MdnModel, NwCde};
pub use conformal::{conformal_quantile, CalibratedPredictor, QuantileRule};
pub use data::{DataSplits, Dataset, Standardizer};
pub use diffmodels::{DiffModel, ModelKind, ModelSpec, OptimizerConfig};
pub use eval::{IntervalPredictor, MetricsReport};
pub use ksreg::{ks_exact, ks_smoothed, KsConfig};
pub use scores::{Interval, ScoreKind};

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv parse error at row {row}, column {column}: {message}")]
    CsvParse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("missing target column '{0}'")]
    MissingTarget(String),

    #[error("invalid split: n_train {n_train} + n_calib {n_calib} > n {n}")]
    InvalidSplit {
        n_train: usize,
        n_calib: usize,
        n: usize,
    },

    #[error("alpha must be in (0, 1), got {0}")]
    InvalidAlpha(f64),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in graph at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("training diverged at epoch {epoch} (loss {loss:.3e})")]
    Diverged { epoch: usize, loss: f64 },

    #[error("query outside data support")]
    OutsideSupport,

    #[error("slab mass too small: delta*n = {0:.1} < 20")]
    DegenerateSlab(f64),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
