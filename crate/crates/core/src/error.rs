use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures raised by a scoring backend.
#[derive(Debug, Error)]
pub enum BackendError {
    /// The remote service could not be reached or did not answer in time.
    #[error("transport error talking to {endpoint}: {message} (attempts: {attempts}, retryable: {retryable})")]
    Transport {
        endpoint: String,
        message: String,
        attempts: u32,
        retryable: bool,
    },
    #[error("handshake failed: {0}")]
    Handshake(String),
    /// Replay was asked for a (context, target) pair that was never recorded.
    #[error("trace miss: no entry for context hash {ctx_hash:016x}, target {target}")]
    TraceMiss { ctx_hash: u64, target: u32 },
    /// The backend returned something that breaks the scoring contract.
    #[error("backend contract violation: {0}")]
    ContractViolation(String),
    /// The request itself was invalid (empty targets, out-of-range ids).
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("trace write failed: {0}")]
    TraceWrite(#[from] std::io::Error),
}

/// Crate-wide error. The variant determines the CLI exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("backend error at {location}: {source}")]
    Backend {
        location: String,
        #[source]
        source: BackendError,
    },
    #[error("data error: {0}")]
    Data(String),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn backend(location: impl Into<String>, source: BackendError) -> Self {
        Error::Backend {
            location: location.into(),
            source,
        }
    }

    /// Process exit code: 1 configuration, 2 backend/transport, 3 data.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Backend { .. } => 2,
            Error::Data(_) | Error::Io { .. } => 3,
        }
    }
}

impl From<BackendError> for Error {
    fn from(source: BackendError) -> Self {
        Error::backend("backend", source)
    }
}
