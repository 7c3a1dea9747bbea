use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("codec: {0}")]
    Codec(#[from] CodecError),

    #[error("metric: {0}")]
    Metric(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    Manifest {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("utterance {id}: assembled sequence of {len} exceeds max_seq {max}")]
    SequenceOverflow { id: String, len: usize, max: usize },

    #[error("non-finite loss at stage {stage} step {step} (batch: {ids:?})")]
    NonFiniteLoss {
        stage: String,
        step: usize,
        ids: Vec<String>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("annotator: {0}")]
    Annotator(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("unbalanced marker {marker:?} at token {position}")]
    Unbalanced { marker: String, position: usize },
    #[error("nested marker {marker:?} at token {position}")]
    Nested { marker: String, position: usize },
    #[error("empty entity span at token {position}")]
    EmptySpan { position: usize },
    #[error("unknown reserved symbol in {token:?}")]
    UnknownMarker { token: String },
    #[error("phrase {phrase:?} contains a reserved marker symbol")]
    ReservedInPhrase { phrase: String },
    #[error("span phrase {phrase:?} not found in plain text after offset {offset}")]
    PhraseNotFound { phrase: String, offset: usize },
    #[error("unknown entity tag {0:?}")]
    UnknownTag(String),
}
