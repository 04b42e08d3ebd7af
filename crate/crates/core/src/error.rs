use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("step {t} outside [{min}, {max}]")]
    StepOutOfRange { t: usize, min: usize, max: usize },

    #[error("condition subset is empty")]
    EmptySubset,

    #[error("invalid condition: {0}")]
    InvalidCondition(String),

    #[error("invalid world: {0}")]
    InvalidWorld(String),

    #[error("{name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },

    #[error("invalid guidance config: {0}")]
    InvalidGuidance(String),

    #[error("strategy {0} requires a negative condition")]
    MissingNegativeCondition(String),

    #[error("strategy {strategy} is not supported by {runner}")]
    UnsupportedStrategy {
        strategy: String,
        runner: &'static str,
    },

    #[error("trajectory has no negative branch to diagnose")]
    NoNegativeBranch,

    #[error("vector is not unit norm (norm = {0})")]
    NonUnitVector(f64),

    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },

    #[error("empty sample set")]
    EmptySamples,

    #[error("label sets do not partition the components: {0}")]
    InvalidPartition(String),

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error(transparent)]
    Par(#[from] crate::par::ParError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
