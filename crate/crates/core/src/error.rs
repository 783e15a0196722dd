use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric overflow in `{param}`")]
    NumericOverflow { param: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("insufficient data: {msg} (longest available segment: {longest_segment})")]
    InsufficientData { msg: String, longest_segment: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt file: {0}")]
    Corruption(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag for the error category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::NumericOverflow { .. } => "numeric_overflow",
            Error::Numeric(_) => "numeric",
            Error::Config(_) => "config",
            Error::Usage(_) => "usage",
            Error::InsufficientData { .. } => "insufficient_data",
            Error::Data(_) => "data",
            Error::Format(_) => "format",
            Error::Corruption(_) => "corruption",
            Error::Divergence(_) => "divergence",
            Error::Io { .. } => "io",
        }
    }
}
