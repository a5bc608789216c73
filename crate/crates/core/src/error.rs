use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("linear solver did not converge after {iterations} iterations (relative residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("system matrix is not positive definite (p'Ap = {curvature:e} at iteration {iteration})")]
    Indefinite { iteration: usize, curvature: f64 },

    #[error("covariance embedding failed and grid of {cells} cells is too large for the dense fallback")]
    FieldTooLarge { cells: usize },

    #[error("non-positive {component} = {value:e} at pixel ({px}, {py})")]
    NonPositive {
        component: &'static str,
        value: f64,
        px: usize,
        py: usize,
    },

    #[error("shape mismatch in layer {layer}: {message}")]
    Shape { layer: String, message: String },

    #[error("loss is NaN in batch {batch}")]
    NanLoss { batch: usize },

    #[error("empty split: {0}")]
    EmptySplit(&'static str),

    #[error("target component {component} has zero variance; NRMSE undefined")]
    ZeroVariance { component: usize },

    #[error("preprocessing statistics do not match the model (expected {expected}, got {actual})")]
    StatsMismatch { expected: String, actual: String },

    #[error("too many failed samples: {failed} of {total}")]
    TooManyFailures { failed: usize, total: usize },

    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("corrupt data in {path}: {message}")]
    Corrupt { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidSpec(_) => "invalid_spec",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::InvalidConfig(_) => "invalid_config",
            Error::NonConvergence { .. } => "non_convergence",
            Error::Indefinite { .. } => "indefinite",
            Error::FieldTooLarge { .. } => "field_too_large",
            Error::NonPositive { .. } => "non_positive",
            Error::Shape { .. } => "shape",
            Error::NanLoss { .. } => "nan_loss",
            Error::EmptySplit(_) => "empty_split",
            Error::ZeroVariance { .. } => "zero_variance",
            Error::StatsMismatch { .. } => "stats_mismatch",
            Error::TooManyFailures { .. } => "too_many_failures",
            Error::BackendUnavailable(_) => "backend_unavailable",
            Error::Corrupt { .. } => "corrupt",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
