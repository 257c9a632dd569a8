use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: expected \"EMB1\", found {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported store version {0}")]
    UnsupportedVersion(u8),

    #[error("size mismatch: header declares {expected} bytes of data, file has {actual}")]
    SizeMismatch { expected: u64, actual: u64 },

    #[error("meta length mismatch: {field} has {len} entries, store has {rows} rows")]
    MetaLengthMismatch {
        field: String,
        len: usize,
        rows: usize,
    },

    #[error("invalid store: {0}")]
    InvalidStore(String),

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("row {0} has zero norm")]
    ZeroRow(usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("missing prompts in text store ({} missing): {}", .0.len(), .0.join(" | "))]
    MissingPrompts(Vec<String>),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss is {loss}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        loss: f64,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
