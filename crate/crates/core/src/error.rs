use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("function under gradient check is not deterministic ({0} vs {1})")]
    NonDeterministic(f64, f64),

    #[error("data error: {0}")]
    Data(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("model state: {0}")]
    ModelState(String),

    #[error("spec conflict: checkpoint holds {found}, expected {expected}")]
    SpecConflict { expected: String, found: String },

    #[error("container: {0}")]
    Container(String),

    #[error("checksum mismatch: container is corrupted")]
    Checksum,

    #[error("non-finite loss at epoch {epoch}, batch {batch}; parameter norms: {norms}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        norms: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
