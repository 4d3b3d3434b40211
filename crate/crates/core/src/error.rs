use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("stale activation cache: {0}")]
    StaleCache(String),

    #[error("gradient tape is empty")]
    EmptyTape,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("degenerate sequence: no state can emit frame {frame}")]
    Degenerate { frame: usize },

    #[error("invalid parameter: {0}")]
    Invalid(String),

    #[error("dataset error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("dataset error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("EM iteration {iteration}: {source}")]
    Em {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by non-finite arithmetic, at any nesting depth.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NonFinite(_) | Error::Degenerate { .. } => true,
            Error::Em { source, .. } => source.is_numerical(),
            _ => false,
        }
    }

    pub fn is_data(&self) -> bool {
        match self {
            Error::Parse { .. } | Error::Data(_) | Error::Shape(_) => true,
            Error::Em { source, .. } => source.is_data(),
            _ => false,
        }
    }
}
