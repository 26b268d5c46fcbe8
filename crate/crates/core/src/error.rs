use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid probability vector: {0}")]
    InvalidProbability(String),

    #[error("invalid transition matrix: {0}")]
    InvalidTransition(String),

    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),

    #[error("objective is not finite at coordinate {coordinate}")]
    NonFiniteEvaluation { coordinate: usize },

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("{path}: line {line}: record `{id}`: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        id: String,
        message: String,
    },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("inconsistent dataset: {0}")]
    InconsistentDataset(String),

    #[error("no training data")]
    NoTrainingData,

    #[error("point `{0}` has no strong label")]
    MissingStrongLabel(String),

    #[error("no non-abstain votes anywhere in the data")]
    NoVotes,

    #[error("no voted points to train on")]
    NoVotedPoints,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("matrix is singular")]
    SingularMatrix,

    #[error("non-finite gradient in parameter block `{block}` at index {index}")]
    NonFiniteGradient { block: String, index: usize },

    #[error("forward cache does not match this network: {0}")]
    CacheMismatch(String),

    #[error("transitions are x-independent")]
    XIndependent,

    #[error("this label model variant requires a feature vector")]
    MissingFeatures,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
