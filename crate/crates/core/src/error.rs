use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("invalid layout: {0}")]
    InvalidLayout(String),

    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("unsupported model family for {0}")]
    UnsupportedFamily(&'static str),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("invalid covariance: {0}")]
    InvalidCovariance(String),

    #[error("invalid generator: {0}")]
    InvalidGenerator(String),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("sampling precondition violated: tau*batch_size = {requested} exceeds shard size n_k = {available}")]
    BatchOverflow { requested: usize, available: usize },

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("invalid participation: {0}")]
    InvalidParticipation(String),

    #[error("missing phi snapshot for client {0}")]
    MissingSnapshot(usize),

    #[error("diverged at round {round}, step {step}, client {client}: batch loss {loss:e}")]
    Diverged { round: usize, step: usize, client: usize, loss: f64 },

    #[error("unknown block: {0}")]
    UnknownBlock(String),

    #[error("count mismatch: {0}")]
    CountMismatch(String),

    #[error("insufficient trials: {got} < {min}")]
    InsufficientTrials { got: usize, min: usize },

    #[error("no evaluation source: {0}")]
    NoEvalSource(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
