use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("collective error: {0}")]
    Collective(String),

    #[error("format error at byte offset {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad user input (configs, files, shapes)
    /// rather than a failure inside the library. A missing input file counts
    /// as bad input.
    pub fn is_validation(&self) -> bool {
        if let Error::Io(e) = self {
            return e.kind() == std::io::ErrorKind::NotFound;
        }
        matches!(
            self,
            Error::Dimension { .. }
                | Error::Domain(_)
                | Error::Config(_)
                | Error::Partition(_)
                | Error::Format { .. }
                | Error::Validation(_)
                | Error::Json(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
