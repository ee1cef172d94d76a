use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("clip too short: {samples} samples, need at least {needed}")]
    ClipTooShort { samples: usize, needed: usize },

    #[error("unknown sound class {0}")]
    UnknownClass(usize),

    #[error("polyphony cap exceeded in frames {frames:?}")]
    Polyphony { frames: Vec<usize> },

    #[error("no reference events")]
    NoReferenceEvents,

    #[error("zero-length direction vector")]
    ZeroVector,

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("parameter sets are misaligned: {0}")]
    Misaligned(String),

    #[error("second-order gradient not available through `{0}`")]
    SecondOrderUnsupported(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("room `{room}` has {have} segments, needs {need}")]
    RoomTooSmall {
        room: String,
        have: usize,
        need: usize,
    },

    #[error("dataset mismatch: {0}")]
    DatasetMismatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid input: {0}")]
    Invalid(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::NonFinite(_) => 4,
            Error::Io { .. }
            | Error::Format { .. }
            | Error::ClipTooShort { .. }
            | Error::Polyphony { .. }
            | Error::NoReferenceEvents
            | Error::RoomTooSmall { .. }
            | Error::DatasetMismatch(_) => 3,
            _ => 1,
        }
    }
}
