use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("variable does not belong to the active graph")]
    NoGraph,

    #[error("numeric instability: {0}")]
    NumericInstability(String),

    #[error("invalid model configuration: {0}")]
    Config(String),

    #[error("invalid label {value} at row {row}, column {column}")]
    InvalidLabel { row: usize, column: usize, value: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("split impossible: {0}")]
    SplitImpossible(String),

    #[error("AUC undefined: labels contain a single class")]
    UndefinedAuc,

    #[error("bootstrap failed: {0}")]
    BootstrapFailure(String),

    #[error("out of range: {0}")]
    Range(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

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
