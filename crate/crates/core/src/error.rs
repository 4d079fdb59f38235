use std::path::PathBuf;

/// Errors raised anywhere in the scoring, training and IO stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tape already consumed by a previous backward pass")]
    StaleTape,

    #[error("{0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("unknown token {token:?} (not in vocabulary)")]
    OutOfVocabulary { token: String },

    #[error("unknown class name {0:?}")]
    UnknownClass(String),

    #[error("missing feature map for config {config}, stage {stage}, sample {sample}, module {module}")]
    MissingFeature {
        config: usize,
        stage: usize,
        sample: usize,
        module: &'static str,
    },

    #[error("incomplete archive: {0}")]
    IncompleteArchive(String),

    #[error("training diverged: non-finite loss at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
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
