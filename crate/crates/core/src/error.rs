use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes that do not compose.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// NaN, infinity, or a solver that failed to converge.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Bad user-supplied data or arguments.
    #[error("input error: {0}")]
    Input(String),

    /// A caller violated a documented precondition.
    #[error("contract error: {0}")]
    Contract(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) | Error::Checkpoint(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
