use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty reduction")]
    EmptyReduction,

    #[error("degenerate vector (norm {norm:e} below {eps:e})")]
    DegenerateVector { norm: f64, eps: f64 },

    #[error("non-finite function value at coordinate {coord}")]
    NonFiniteEvaluation { coord: usize },

    #[error("dimension mismatch: {what} expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate schedule: alpha_max must be positive")]
    DegenerateSchedule,

    #[error("cross-video distance between timelines {a} and {b}")]
    CrossVideoDistance { a: usize, b: usize },

    #[error("clip length {clip_len} exceeds timeline duration {duration}")]
    ClipTooLong { clip_len: f64, duration: f64 },

    #[error("infeasible topic separation: {0}")]
    InfeasibleSeparation(String),

    #[error("contrastive loss needs >=2 videos, got {0}")]
    TooFewVideos(usize),

    #[error("need >=2 videos for negatives")]
    NoNegatives,

    #[error("positive index {0} is not in the negative pool")]
    PositiveNotInPool(usize),

    #[error("negative pool has {0} entries, need at least 2")]
    PoolTooSmall(usize),

    #[error("probability {0} outside (0, 1]")]
    InvalidProbability(f64),

    #[error("all losses disabled")]
    NoLossEnabled,

    #[error("divergence: non-finite iterate at step {step}")]
    Divergence { step: usize },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("corpus has {have} videos, batch needs {need}")]
    CorpusTooSmall { have: usize, need: usize },

    #[error("single-class training set")]
    SingleClass,

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
