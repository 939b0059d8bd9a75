use thiserror::Error;

pub type Result<T, E = NptcError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum NptcError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{0}")]
    Argument(String),
    #[error("{0}")]
    Shape(String),
    #[error("{0}")]
    DisconnectedBand(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    CacheMiss(String),
    #[error("{0}")]
    Internal(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl NptcError {
    /// Stable machine-readable category name, used by the CLI error line.
    pub fn category(&self) -> &'static str {
        match self {
            NptcError::EmptyCloud => "EmptyCloud",
            NptcError::Parse { .. } => "ParseError",
            NptcError::Argument(_) => "ArgumentError",
            NptcError::Shape(_) => "ShapeError",
            NptcError::DisconnectedBand(_) => "DisconnectedBand",
            NptcError::Config(_) => "ConfigError",
            NptcError::CacheMiss(_) => "CacheMiss",
            NptcError::Internal(_) => "InternalError",
            NptcError::Io(_) => "IoError",
        }
    }
}

pub(crate) fn argument(msg: impl Into<String>) -> NptcError {
    NptcError::Argument(msg.into())
}

pub(crate) fn shape(msg: impl Into<String>) -> NptcError {
    NptcError::Shape(msg.into())
}
