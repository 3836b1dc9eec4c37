use thiserror::Error;
use unas_autodiff::TapeError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("site `{site}` has non-finite logits")]
    NonFiniteLogits { site: String },
    #[error("site `{site}` needs at least 2 choices, got {k}")]
    TooFewChoices { site: String, k: usize },
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("choice {index} out of range for {k} options")]
    BadChoice { index: usize, k: usize },
    #[error("expected {expected} decision sites, got {got}")]
    SiteCount { expected: usize, got: usize },
    #[error("site `{site}` has {got} choices, expected {expected}")]
    SiteArity {
        site: String,
        expected: usize,
        got: usize,
    },
    #[error("architecture space has {count} members, above the enumeration limit {limit}")]
    SpaceTooLarge { count: u128, limit: u128 },
    #[error("estimator `{estimator}` needs eval_relaxed; for a non-differentiable loss use `relax` with a surrogate")]
    MissingRelaxation { estimator: &'static str },
    #[error("relax needs a surrogate for the non-differentiable loss")]
    MissingSurrogate,
    #[error("sample count must be at least 1")]
    NoSamples,
    #[error("loss evaluation failed: {0}")]
    Loss(String),
    #[error("non-finite gradient at step {step}")]
    NonFiniteGradient { step: usize },
    #[error("design matrix is rank-deficient (rank {rank} of {cols}); draw more samples")]
    RankDeficient { rank: usize, cols: usize },
    #[error("need at least {needed} samples to fit {needed} coefficients, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite objective at step {step}; aborted with checkpoint")]
    NumericalAbort {
        step: usize,
        checkpoint: Box<crate::search::Checkpoint>,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
