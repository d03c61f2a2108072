use std::path::PathBuf;

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },

    #[error("non-finite loss at inner step {step}")]
    NonFiniteInner { step: usize },

    #[error("non-finite meta-gradient for episode {episode}")]
    NonFiniteMetaGradient { episode: usize },

    #[error("gradient requested of a non-scalar output with shape {shape:?}")]
    NotScalar { shape: Vec<usize> },

    #[error("variables belong to different graphs")]
    GraphMismatch,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("loss function is non-deterministic: {first} != {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("dataset format error at {record}: {reason}")]
    Format { record: String, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("fixed teacher parameters were modified")]
    FixedTeacherMutated,

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
