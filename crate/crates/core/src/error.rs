use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("label {label} out of range for {class_count} classes (line {line})")]
    LabelOutOfRange {
        label: usize,
        class_count: usize,
        line: usize,
    },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("word {0:?} is not in the vocabulary")]
    UnknownWord(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint has no vocabulary digest")]
    CheckpointDigestMissing,

    #[error("checkpoint is inconsistent: {0}")]
    CheckpointShape(String),

    #[error("checkpoint could not be parsed: {0}")]
    CheckpointParse(#[from] serde_json::Error),

    #[error(
        "source model has {source_classes} classes but target has {target_classes}; \
         use incremental mode with head reinitialization"
    )]
    ClassCountMismatch {
        source_classes: usize,
        target_classes: usize,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
