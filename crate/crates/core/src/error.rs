use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::Shape;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left} and {right}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("node {0} is not recorded on this tape")]
    ForeignNode(usize),

    #[error("tag `{0}` is already bound to a node")]
    DuplicateTag(String),

    #[error("unknown tag `{0}`")]
    UnknownTag(String),

    #[error("prediction bundle was produced without tracing")]
    NotTraced,

    #[error("{context}: malformed data at byte {offset}: {reason}")]
    Format {
        context: String,
        offset: usize,
        reason: String,
    },

    #[error("weight `{name}`: {reason}")]
    Weight { name: String, reason: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("cannot parse `{input}`: {reason}")]
    Parse { input: String, reason: String },

    #[error("method `{method}` failed: {source}")]
    Method {
        method: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn parse(input: &str, reason: impl Into<String>) -> Self {
        Error::Parse {
            input: input.to_string(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by malformed user input rather than data or contract violations.
    pub fn is_usage(&self) -> bool {
        match self {
            Error::Parse { .. } => true,
            Error::Method { source, .. } => source.is_usage(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
