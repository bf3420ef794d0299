use std::path::PathBuf;

/// Errors raised anywhere in the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("registration error: {dimension} differs ({detail})")]
    Registration {
        dimension: &'static str,
        detail: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Format(_) => "format",
            Error::Data(_) => "data",
            Error::Io { .. } => "io",
            Error::Registration { .. } => "registration",
            Error::Config(_) => "config",
            Error::Sampling(_) => "sampling",
            Error::Shape(_) => "shape",
            Error::Numerical(_) => "numerical",
            Error::Degenerate(_) => "degenerate",
        }
    }

    /// True for failures caused by the caller's inputs (bad config, bad files)
    /// rather than by the computation itself.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Format(_)
                | Error::Config(_)
                | Error::Io { .. }
                | Error::Registration { .. }
                | Error::Data(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
