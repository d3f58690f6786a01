use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes or argument values violate an operation's contract.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("index {index} out of range for {what} of size {len}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    /// Structured-text input rejected at a specific line.
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("vocabulary: {0}")]
    Vocabulary(String),

    #[error("city generation: {0}")]
    Generation(String),

    #[error("routing: {0}")]
    Route(String),

    #[error("corpus: {0}")]
    Corpus(String),

    /// Checkpoint, network or config hashes do not agree.
    #[error("integrity: {0}")]
    Integrity(String),

    /// NaN/Inf or a diverged loss.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("evaluation: {0}")]
    Evaluation(String),

    #[error("usage: {0}")]
    Usage(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 2,
            Error::Integrity(_) => 3,
            Error::Numerical(_) => 4,
            _ => 1,
        }
    }
}
