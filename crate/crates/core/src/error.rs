use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("invalid channel layout: {0}")]
    Layout(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The bit budget cannot cover even the cheapest configuration.
    #[error("infeasible bit budget: need {required:.3} bits, have {available:.3} (short by {shortfall:.3})")]
    Infeasible {
        required: f64,
        available: f64,
        shortfall: f64,
    },

    #[error("search space too large: {0} candidate tuples")]
    SearchSpace(u128),

    #[error("truncated stream: needed {needed} more bits")]
    Truncated { needed: usize },

    #[error("unsupported format version {0}")]
    Version(u8),

    #[error("malformed payload: {0}")]
    Malformed(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("io error: {0}")]
    Io(String),

    /// A failure inside a training run, tagged with where it happened.
    #[error("iteration (t={t}, k={k}): {source}")]
    Training {
        t: usize,
        k: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn infeasible(required: f64, available: f64) -> Self {
        Error::Infeasible {
            required,
            available,
            shortfall: required - available,
        }
    }

    /// The innermost error, looking through training context.
    pub fn root(&self) -> &Error {
        match self {
            Error::Training { source, .. } => source.root(),
            other => other,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
