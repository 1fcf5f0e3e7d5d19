use std::path::PathBuf;

/// Errors raised anywhere in the reconstruction pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("preprocessing settings hash mismatch: expected {expected}, found {found}")]
    HashMismatch { expected: String, found: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),
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

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Wraps an error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }

    /// Innermost error, skipping stage annotations.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for numeric breakdowns (non-finite losses or gradients).
    pub fn is_numeric(&self) -> bool {
        matches!(self.root(), Error::NonFinite(_))
    }

    pub fn is_hash_mismatch(&self) -> bool {
        matches!(self.root(), Error::HashMismatch { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
