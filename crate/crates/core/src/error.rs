use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum DmanError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Degenerate(String),
    #[error("non-finite gradient in parameter block `{block}` (element {index}, value {value})")]
    NonFiniteGradient {
        block: String,
        index: usize,
        value: f64,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: expected {expected} bytes, found {actual} ({})", byte_gap(*.expected, *.actual))]
    Corrupt {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },
    #[error("{what}: unsupported version {found} (expected {expected})")]
    Version {
        what: String,
        found: u32,
        expected: u32,
    },
    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
}

fn byte_gap(expected: u64, actual: u64) -> String {
    if actual < expected {
        format!("{} bytes short", expected - actual)
    } else {
        format!("{} bytes over", actual - expected)
    }
}

impl DmanError {
    /// Short machine-readable category, used in CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            DmanError::Tensor(_) => "tensor",
            DmanError::Input(_) => "input",
            DmanError::Config(_) => "config",
            DmanError::Degenerate(_) => "degenerate",
            DmanError::NonFiniteGradient { .. } => "nonfinite",
            DmanError::Io { .. } => "io",
            DmanError::Corrupt { .. } => "corrupt",
            DmanError::Version { .. } => "version",
            DmanError::Parse { .. } => "parse",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        DmanError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, DmanError>;
