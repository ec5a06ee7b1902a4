use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-deterministic function: {0}")]
    Determinism(String),

    /// Every violation found, not only the first.
    #[error("config error: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("template error: {0}")]
    Template(String),

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("NaN loss at batch {batch} (epoch {epoch})")]
    NanLoss { epoch: usize, batch: usize },

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(vec![msg.into()])
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), msg: msg.into() }
    }

    /// Short machine-readable kind, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Index(_) => "index",
            Error::NonFinite { .. } => "non_finite",
            Error::Contract(_) => "contract",
            Error::Determinism(_) => "determinism",
            Error::Config(_) => "config",
            Error::Template(_) => "template",
            Error::Ingestion(_) => "ingestion",
            Error::Generation(_) => "generation",
            Error::NanLoss { .. } => "nan_loss",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
        }
    }
}
