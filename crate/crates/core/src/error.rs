use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{kind}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        kind: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{kind}: {reason}")]
    InvalidArgument { kind: &'static str, reason: String },
    #[error("{0}: empty input")]
    EmptyInput(&'static str),
    #[error("{0}: produced a non-finite value")]
    NonFinite(&'static str),
    #[error("backward: {0}")]
    Backward(String),
    #[error("missing gradient for parameter `{0}`")]
    MissingGrad(String),
    #[error("data: {0}")]
    Data(String),
    #[error("config: {0}")]
    Config(String),
    #[error("genotype: {0}")]
    Genotype(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(kind: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            kind,
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(kind: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            kind,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
