//! Error type shared by every module in the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm {norm} is below the zero threshold")]
    ZeroNorm { norm: f64 },
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("input contains a non-finite value")]
    NonFiniteInput,
    #[error("support violation: p[{index}] > 0 but q[{index}] = 0")]
    SupportViolation { index: usize },
    #[error("function evaluated to a non-finite value during finite differencing")]
    NonFiniteEvaluation,
    #[error("finite-difference step {0} outside [1e-7, 1e-3]")]
    StepOutOfRange(f64),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("encoder produced dimension {got}, expected {expected}")]
    EncoderDimensionMismatch { expected: usize, got: usize },
    #[error("requested {requested} clusters from {points} points")]
    TooManyClusters { requested: usize, points: usize },
    #[error("top-k size {k} exceeds usable knowledge-base size {usable}")]
    KTooLarge { k: usize, usable: usize },
    #[error("refresh period must be at least 1, got {0}")]
    NonPositivePeriod(i64),
    #[error("index {index} out of range for size {size}")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("injection ratio must lie in [0, 1], got {0}")]
    RhoOutOfRange(f64),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("sinkhorn epsilon must be positive, got {0}")]
    NonPositiveEpsilon(f64),
    #[error("mixing factor beta must lie in [0, 1], got {0}")]
    BetaOutOfRange(f64),
    #[error("ntxent temperature must be positive, got {0}")]
    NonPositiveTau(f64),
    #[error("shape mismatch: {left}x{left} vs {right}x{right}")]
    ShapeMismatch { left: usize, right: usize },
    #[error("knowledge potential must be strictly positive, got {0}")]
    NonPositivePotential(f64),
    #[error("knowledge base is empty")]
    EmptyKB,
    #[error("current and stale knowledge vectors are not index-aligned: {current} vs {stale}")]
    IndexMisalignment { current: usize, stale: usize },
    #[error("every knowledge-base entry is in the batch; no out-of-batch set")]
    EmptyOutOfBatchSet,
    #[error("invalid corpus counts: {0}")]
    InvalidCounts(String),
    #[error("recall cutoff {k} exceeds pool size {pool}")]
    KExceedsPoolSize { k: usize, pool: usize },
    #[error("drift magnitude must be non-negative, got {0}")]
    NegativeMagnitude(f64),
    #[error("need at least two encoder snapshots, got {0}")]
    TooFewSnapshots(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed snapshot file: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
