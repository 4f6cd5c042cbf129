use std::path::PathBuf;

use thiserror::Error;

use crate::panel::Period;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv parse failure at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("invalid panel: {0}")]
    InvalidPanel(String),

    #[error("value {value} for country {country} in period {period} is outside (15, 110)")]
    ValueOutOfRange {
        country: String,
        period: Period,
        value: f64,
    },

    #[error("country {country} has an internal gap at period {period}")]
    InternalGap { country: String, period: Period },

    #[error("duplicate row for country {country}, period {period}")]
    DuplicateRow { country: String, period: Period },

    #[error("period {0} not found in panel")]
    PeriodNotFound(Period),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("non-positive input: {0}")]
    NonPositive(&'static str),

    #[error("simulation failed: {0}")]
    Simulation(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("sampler failure: {0}")]
    Sampler(String),

    #[error("missing parameter {0} in draws")]
    MissingParameter(String),

    #[error("fit was run without shock terms")]
    ShocksDisabled,

    #[error("fit did not converge: max split-R-hat {max_rhat:.4} exceeds {threshold}")]
    Unconverged { max_rhat: f64, threshold: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
