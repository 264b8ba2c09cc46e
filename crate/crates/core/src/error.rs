use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An input violates a documented invariant.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("parse error at {locus}: {message}")]
    Parse { locus: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// An argument outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("resample error: {0}")]
    Resample(String),

    #[error("normalization error: {0}")]
    Normalization(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Non-finite loss or gradient during optimization.
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn parse(locus: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            locus: locus.into(),
            message: message.into(),
        }
    }

    /// Coarse class used for process exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::Numerical(_) => ErrorKind::Numerical,
            Error::Shape { .. } | Error::Domain(_) => ErrorKind::Config,
            Error::Validation(_)
            | Error::Parse { .. }
            | Error::Io { .. }
            | Error::Resample(_)
            | Error::Normalization(_)
            | Error::InsufficientData(_) => ErrorKind::Data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}
