use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown token `{0}`")]
    UnknownToken(String),
    #[error("token id {id} out of range for vocabulary of size {size}")]
    IndexOutOfRange { id: usize, size: usize },
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("gold token {0} is outside the vocabulary")]
    GoldOutOfVocabulary(usize),
    #[error("candidate token {0} is outside the vocabulary")]
    CandidateOutOfVocabulary(usize),
    #[error("group of {0} rewards is too small, need at least 2")]
    GroupTooSmall(usize),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
    #[error("selection is empty")]
    EmptySelection,
    #[error("requested {requested} items from a pool of {available}")]
    CountTooLarge { requested: usize, available: usize },
    #[error("synthetic environment too large: {0}")]
    SpecTooLarge(String),
    #[error("malformed record at line {line}: {detail}")]
    MalformedRecord { line: usize, detail: String },
    #[error("cannot read {path}: {source}")]
    UnreadablePath {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
    #[error("remote endpoint unavailable after {attempts} attempt(s): {detail}")]
    RemoteUnavailable { attempts: usize, detail: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("request timed out after {0:?}")]
    TimeoutExceeded(std::time::Duration),
    #[error("unparseable judgment: {0}")]
    UnparseableJudgment(String),
    #[error("no recorded response for request {0}")]
    CassetteMiss(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {detail}")]
    TypeError { key: String, detail: String },
    #[error("missing path for `{key}`: {path}")]
    MissingPath { key: String, path: PathBuf },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
