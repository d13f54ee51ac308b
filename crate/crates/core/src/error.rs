use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("could not place {n_objects} objects in a {image_size}px image after {attempts} attempts")]
    Placement {
        n_objects: usize,
        image_size: usize,
        attempts: usize,
    },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("zero-norm row {row} in {what}")]
    ZeroNorm { what: &'static str, row: usize },

    #[error("degenerate box {0:?}")]
    DegenerateBox([i64; 4]),

    #[error("sentence span {start}..{end} lies beyond the truncation point")]
    Truncated { start: usize, end: usize },

    #[error("record {0} has no local pairs")]
    MissingLocalPairs(String),

    #[error("unsupported format version {found:?} (expected {expected:?})")]
    Version { expected: String, found: String },

    #[error("malformed {what}: {detail}")]
    Malformed { what: String, detail: String },

    #[error("non-finite loss (global={global}, local={local}, tsl={tsl})")]
    NonFinite { global: f64, local: f64, tsl: f64 },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(what: impl Into<String>, detail: impl ToString) -> Self {
        Error::Malformed {
            what: what.into(),
            detail: detail.to_string(),
        }
    }

    /// Coarse classification used by the command line front end.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::ZeroNorm { .. })
    }

    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
