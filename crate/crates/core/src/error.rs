use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("genotype parse error at line {line}, field `{field}`: {message}")]
    GenotypeParse {
        line: usize,
        field: String,
        message: String,
    },

    #[error("invalid genotype: {0}")]
    InvalidGenotype(String),

    #[error("PFM parse error at byte {offset}: {message}")]
    Pfm { offset: usize, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite loss at epoch {epoch}, phase {phase}, batch {batch}")]
    NonFiniteLoss {
        epoch: usize,
        phase: String,
        batch: usize,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
