use std::path::PathBuf;

use thiserror::Error;

use crate::actions::{Action, Verdict};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty source timeline")]
    EmptyTimeline,

    #[error("invalid word {index}: {reason}")]
    InvalidWord { index: usize, reason: String },

    #[error("non-monotone end times at word {index}: {end} < {previous}")]
    NonMonotoneTimeline { index: usize, end: f64, previous: f64 },

    #[error("no target emissions")]
    EmptyEmissions,

    #[error("alignment link ({source_index}, {target_index}) out of bounds for {source_len} source / {target_len} target words")]
    AlignmentOutOfBounds {
        source_index: usize,
        target_index: usize,
        source_len: usize,
        target_len: usize,
    },

    #[error("wait anchor {anchor} out of bounds for a {len}-word timeline")]
    AnchorOutOfBounds { anchor: usize, len: usize },

    #[error("{hypotheses} hypotheses but {references} references")]
    LengthMismatch { hypotheses: usize, references: usize },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("unknown action {0:?}")]
    UnknownAction(String),

    #[error("invalid trace: {0}")]
    InvalidTrace(Verdict),

    #[error("trace has {steps} steps but the timeline only {words} words")]
    TraceTooLong { steps: usize, words: usize },

    #[error("keyword rule list is empty")]
    EmptyRules,

    #[error("k-means needs at least {k} embedded examples, found {found}")]
    TooFewEmbeddings { k: usize, found: usize },

    #[error("no embeddings available")]
    NoEmbeddings,

    #[error("embedding dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("missing statistics for allowed action {0}")]
    MissingStats(Action),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("endpoint error: {0}")]
    Endpoint(String),

    #[error("{}:{line}: {message}", path.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "<input>".into()))]
    Parse {
        path: Option<PathBuf>,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: None,
            line,
            message: message.into(),
        }
    }

    /// Attaches a file path to a parse error; other variants pass through.
    pub fn with_path(self, p: impl Into<PathBuf>) -> Self {
        match self {
            Error::Parse { line, message, .. } => Error::Parse {
                path: Some(p.into()),
                line,
                message,
            },
            other => other,
        }
    }

    /// True for failures of the remote endpoint rather than of local data.
    pub fn is_endpoint(&self) -> bool {
        matches!(self, Error::Endpoint(_))
    }
}
