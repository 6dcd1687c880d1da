use std::io;

/// Errors raised anywhere in the fine-tuning lab.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty batch")]
    EmptyBatch,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("unknown condition {0}")]
    UnknownCondition(usize),
    #[error("score singular near t=0 (t = {t}, floor = {floor})")]
    ScoreSingular { t: f64, floor: f64 },
    #[error("non-finite value in {stage} at step {step}")]
    NonFinite { stage: &'static str, step: usize },
    #[error("degenerate transition: variance {0} is not positive")]
    DegenerateTransition(f64),
    #[error("group too small: need at least {min}, got {got}")]
    GroupTooSmall { min: usize, got: usize },
    #[error("missing transition record: {0}")]
    MissingTransition(String),
    #[error("degenerate pair")]
    DegeneratePair,
    #[error("window violation: {0}")]
    Window(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("divergence at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("image too small: {width}x{height}, need at least {min} per side")]
    ImageTooSmall { width: usize, height: usize, min: usize },
    #[error("no smooth region")]
    NoSmoothRegion,
    #[error("incomplete trajectory")]
    IncompleteTrajectory,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("iteration {iter}, condition {cond}: {source}")]
    Iteration {
        iter: usize,
        cond: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
