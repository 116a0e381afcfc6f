use std::io;

/// Every failure the library can report.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("degenerate axis in {op}: last axis has extent {extent}, need at least 2")]
    DegenerateAxis { op: &'static str, extent: usize },

    #[error("rank error: {0}")]
    Rank(String),

    #[error("adapter rank {rank} exceeds min(d, k) = {max} at site `{site}`")]
    AdapterRank {
        site: String,
        rank: usize,
        max: usize,
    },

    #[error("numeric instability: {0}")]
    NumericInstability(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("{what} {value} out of range {range}")]
    Range {
        what: &'static str,
        value: String,
        range: String,
    },

    #[error("training diverged: non-finite loss at batch {batch}")]
    Divergence { batch: usize },

    #[error("not a checkpoint: bad magic bytes")]
    NotACheckpoint,

    #[error("truncated checkpoint: manifest declares {expected} payload bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),

    #[error("incompatible: {0}")]
    Incompatible(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt record {index}: label byte {label} exceeds {max}")]
    CorruptRecord { index: usize, label: u8, max: u8 },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
