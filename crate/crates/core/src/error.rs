use std::path::PathBuf;

/// Errors raised anywhere in the engine, model, data, or checkpoint layers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("invalid model configuration: {0}")]
    Config(String),

    #[error("tape was consumed by backward; call reset() before recording")]
    TapeConsumed,

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("malformed {format} at byte {offset}: {detail}")]
    Format {
        format: &'static str,
        offset: usize,
        detail: String,
    },

    #[error("checkpoint CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("label {label} out of range at row {row}, column {col}")]
    Label { label: u8, row: usize, col: usize },

    #[error("run config line {line}: {detail}")]
    RunConfig { line: usize, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn format(format: &'static str, offset: usize, detail: impl Into<String>) -> Self {
        Error::Format {
            format,
            offset,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
