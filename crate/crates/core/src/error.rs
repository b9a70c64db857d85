use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("nli backend error: {0}")]
    Nli(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable process exit code contract: 0 success, 1 usage, 2 data, 3 missing artifact.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::MissingArtifact(_) => 3,
            _ => 2,
        }
    }
}
