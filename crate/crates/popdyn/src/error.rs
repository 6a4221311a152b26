use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed ratings row: {msg}")]
    RatingsParse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}:{line}: duplicate rating for user {user}, item {item}")]
    DuplicateRating {
        path: PathBuf,
        line: usize,
        user: u64,
        item: u64,
    },

    #[error("ratings file {path} contains no data rows")]
    EmptyRatings { path: PathBuf },

    #[error("config error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    TrainDiverged { epoch: usize },

    #[error("interaction log is empty")]
    EmptyLog,

    #[error("infeasible target: {0}")]
    Infeasible(String),

    #[error("bad file format: {0}")]
    Format(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
