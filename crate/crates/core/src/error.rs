use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Coefficients produced non-finite values or a singular diffusion matrix.
    #[error("model error: {0}")]
    Model(String),
    /// A caller-side precondition was violated.
    #[error("contract error: {0}")]
    Contract(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    /// A pathwise structural invariant failed during simulation.
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("path {index}: {source}")]
    Path {
        index: u64,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn at_path(self, index: u64) -> Self {
        Error::Path {
            index,
            source: Box::new(self),
        }
    }

    /// The innermost error, with path indices stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::Path { source, .. } => source.root(),
            other => other,
        }
    }
}
