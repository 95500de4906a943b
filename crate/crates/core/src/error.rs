use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("unknown op tag `{0}`")]
    UnknownOp(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("node {wrt} is not an ancestor of node {of}")]
    NotAncestor { wrt: usize, of: usize },

    /// A training phase produced a non-finite loss or gradient.
    #[error("{phase} phase at iteration {iteration}: {source}")]
    Phase {
        phase: &'static str,
        iteration: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn in_phase(self, phase: &'static str, iteration: u64) -> Self {
        Error::Phase {
            phase,
            iteration,
            source: Box::new(self),
        }
    }
}
