use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: CSV: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },
    /// Input violates a documented precondition or invariant.
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("zero-variance sample set (range {range:e})")]
    ZeroVariance { range: f64 },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("unit {unit}: {source}")]
    Unit {
        unit: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("{what}: {source}")]
    Context {
        what: String,
        #[source]
        source: Box<Error>,
    },
    #[error("model runner: {0}")]
    Runner(String),
    #[error("model runner timed out after {seconds} s")]
    RunnerTimeout { seconds: f64 },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn context(self, what: impl Into<String>) -> Self {
        Error::Context {
            what: what.into(),
            source: Box::new(self),
        }
    }

    /// Strips `Unit` and `Context` wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Unit { source, .. } | Error::Context { source, .. } => source.root(),
            other => other,
        }
    }
}
