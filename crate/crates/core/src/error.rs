use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Pipeline stage named in non-finite diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    TextEncoding,
    RegionProjection,
    RegionLogits,
    Aggregation,
    Probability,
    Loss,
    Gradient,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Stage::TextEncoding => "text encoding",
            Stage::RegionProjection => "region projection",
            Stage::RegionLogits => "region logits",
            Stage::Aggregation => "aggregation",
            Stage::Probability => "class probability",
            Stage::Loss => "loss",
            Stage::Gradient => "gradient",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("grid {h}x{w} has {cells} cells, cannot host {needed} distinct planted labels")]
    GridTooSmall {
        h: usize,
        w: usize,
        cells: usize,
        needed: usize,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite value at stage {stage}")]
    NonFinite { stage: Stage },

    #[error("{0}")]
    Aborted(Box<crate::loss_opt::TrainAbort>),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("incompatible prompt mode: {0}")]
    IncompatibleMode(String),

    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("truncated file {path}: {detail}")]
    Truncated { path: PathBuf, detail: String },

    #[error("shape mismatch in {path}: {detail}")]
    ShapeMismatch { path: PathBuf, detail: String },

    #[error("unsupported format version {found} in {path}")]
    FormatVersion { path: PathBuf, found: u32 },

    #[error("malformed file {path}: {detail}")]
    Malformed { path: PathBuf, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
