use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: bad magic {found:?}, expected {expected:?}")]
    BadMagic {
        path: PathBuf,
        expected: [u8; 4],
        found: [u8; 4],
    },

    #[error("{path}: unsupported format version {version}")]
    UnsupportedVersion { path: PathBuf, version: u16 },

    #[error("{path}: unsupported dtype code {dtype}")]
    UnsupportedDtype { path: PathBuf, dtype: u8 },

    #[error("{path}: truncated payload, expected {expected} bytes but found {actual}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("{path}: {trailing} unexpected trailing bytes")]
    TrailingBytes { path: PathBuf, trailing: u64 },

    #[error("{path}:{line}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("manifest has no train-normal entries; a normal bank needs at least one image")]
    NoNormalImages,

    #[error("no anomaly images available for mining (K = 0); use the kNN scorer instead")]
    NoAnomalyImages,

    #[error("retention rate {rate} keeps 0 of {available} anomaly features")]
    EmptyRetention { rate: f64, available: usize },

    #[error("mixing target {target} is smaller than the {mined} mined features")]
    MixTargetTooSmall { target: usize, mined: usize },

    #[error("empty {0} batch")]
    EmptyBatch(&'static str),

    #[error(
        "loss became non-finite at epoch {epoch}; try a smaller learning rate than {learning_rate}"
    )]
    NonFiniteLoss { epoch: usize, learning_rate: f64 },

    #[error("metric undefined: evaluation set needs both normal and anomaly labels")]
    SingleClass,

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
