use thiserror::Error;

/// Errors shared across the tensor substrate and the model layers.
#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension mismatch: {context}: {lhs:?} vs {rhs:?}")]
    Dimension {
        context: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("computation graph error: {0}")]
    Graph(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("projection error: {0}")]
    Projection(String),

    #[error("oracle error: {0}")]
    Oracle(String),

    #[error("format error at offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("training diverged: non-finite loss at iteration {iteration} (epoch {epoch})")]
    Divergence { epoch: usize, iteration: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dimension(context: impl Into<String>, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            context: context.into(),
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }
}
