use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid segment [{start}, {end}]: end must be greater than start and start non-negative")]
    InvalidSegment { start: f64, end: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("speaker label {0:?} is not in the speaker list")]
    UnknownSpeaker(String),

    #[error("index {index} out of range (length {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{context}:{line}: {message}")]
    Parse {
        context: String,
        line: usize,
        message: String,
    },

    #[error("uri mismatch: reference {reference:?}, hypothesis {hypothesis:?}")]
    UriMismatch { reference: String, hypothesis: String },

    #[error("no speakers found")]
    NoSpeakersFound,

    #[error("infeasible parameters: {0}")]
    Infeasible(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Whether the error stems from bad inputs (as opposed to the environment).
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io(_))
    }

    pub(crate) fn parse(context: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            line,
            message: message.into(),
        }
    }
}
