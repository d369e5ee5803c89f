use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("empty batch passed to {0}")]
    EmptyBatch(&'static str),

    #[error("dataset `{0}` has no image records")]
    EmptyDataset(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("could not parse config id `{input}`: {reason}")]
    ConfigParse { input: String, reason: String },

    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },

    #[error("benchmark has no entry for dataset `{dataset}`, config `{config}`")]
    BenchmarkMiss { dataset: String, config: String },

    #[error("no transform for meta-feature version {0}")]
    MissingTransform(usize),

    #[error("meta-feature version {actual} does not match transform source version {expected}")]
    VersionMismatch { expected: usize, actual: usize },

    #[error("requested {requested} items from a pool of {available}")]
    PoolTooSmall { requested: usize, available: usize },

    #[error("rejection sampling exhausted after {0} attempts")]
    RejectionExhausted(usize),

    #[error("least-squares system is rank deficient: {0}")]
    RankDeficient(String),

    #[error("zero variance input to {0}")]
    ZeroVariance(&'static str),

    #[error("{0}")]
    Invalid(String),

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
}
