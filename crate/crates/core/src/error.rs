//! Crate-wide error type and result alias.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Malformed line in a line-delimited input file. `line` is 1-based.
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    /// A record parsed but violates the trace data contract.
    #[error("invalid trace `{id}` ({path}:{line}): {msg}")]
    InvalidTrace {
        path: String,
        line: usize,
        id: String,
        msg: String,
    },

    /// A precondition on an operation's arguments failed.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A metric is undefined on the given data (degenerate labels, empty set).
    #[error("metric undefined: {0}")]
    Metric(String),

    /// Transport or protocol failure talking to a backend.
    #[error("backend: {0}")]
    Backend(String),

    /// The backend answered, but the reply could not be parsed as required.
    #[error("unparseable backend reply: {0}")]
    ReplyParse(String),

    /// Strict replay mode saw a request that was never recorded.
    #[error("replay miss: no recorded response for {op} request {digest}")]
    ReplayMiss { op: String, digest: String },

    /// A numeric routine left its domain (non-PSD kernel, failed convergence).
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
