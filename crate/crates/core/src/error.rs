use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("finite-difference oracle failed at entry ({row}, {col}): objective returned {value}")]
    Oracle { row: usize, col: usize, value: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite gradient for parameter `{path}`")]
    NonFiniteGradient { path: String },

    #[error("missing accumulator snapshot for tile ({query_block}, {key_block})")]
    MissingAccumulator {
        query_block: usize,
        key_block: usize,
    },

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            op,
            detail: detail.into(),
        }
    }
}
