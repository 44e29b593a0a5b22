use crate::dataset::PointId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A record could not be decoded. `line` is 1-based.
    #[error("parse error on line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("duplicate point id {0}")]
    DuplicateId(PointId),

    #[error("invalid data: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("out of range: {0}")]
    Range(String),

    #[error("no unlabeled points remain")]
    Exhausted,

    /// An interaction violated the session protocol. `index` is the position
    /// of the offending event in its log when known.
    #[error("protocol error{}: {message}", index.map(|i| format!(" at event {i}")).unwrap_or_default())]
    Protocol { index: Option<usize>, message: String },

    #[error("session budget expired")]
    Expired,

    #[error("not found: {0}")]
    NotFound(String),

    #[error("not applicable: {0}")]
    NotApplicable(String),

    #[error("session has no events")]
    EmptySession,

    #[error("undefined: {0}")]
    Undefined(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn protocol(message: impl Into<String>) -> Self {
        Error::Protocol {
            index: None,
            message: message.into(),
        }
    }
}
