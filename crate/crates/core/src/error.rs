use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by dataset validation, the statistics, and the CLI plumbing.
#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate record for id {id:?} at timepoint {timepoint}")]
    DuplicateRecord { id: String, timepoint: u8 },

    #[error("observations of different kinds in one dataset: {0}")]
    HeterogeneousKinds(String),

    #[error("quantile functions are not on a shared probability grid")]
    GridMismatch,

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid quantile function: {0}")]
    InvalidQuantile(String),

    #[error("invalid timepoint {0}; expected 1 or 2")]
    InvalidTimepoint(String),

    #[error("id {0:?} has covariates but no observation at either timepoint")]
    UnknownId(String),

    #[error("no covariates supplied for id {0:?}")]
    MissingCovariates(String),

    #[error("empty sample")]
    EmptySample,

    #[error("invalid bandwidth {0}; must be finite and > 0")]
    InvalidBandwidth(f64),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("kernel metric {metric} cannot be applied to {kind} observations")]
    KindMismatch { metric: &'static str, kind: &'static str },

    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    #[error("median heuristic is degenerate: the median pairwise squared distance is zero")]
    DegenerateBandwidth,

    #[error("internal consistency: statistic {0:e} is negative beyond round-off")]
    NegativeStatistic(f64),

    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    #[error("alpha = {alpha} needs both incomplete blocks non-empty (n2 = {n2}, n3 = {n3})")]
    IncompatibleAlpha { alpha: f64, n2: usize, n3: usize },

    #[error("alpha = {alpha} needs at least one complete pair")]
    NoCompletePairs { alpha: f64 },

    #[error("labels contain a single class; cannot fit a classifier")]
    DegenerateLabels,

    #[error("logistic fit did not converge after {iterations} iterations (likely separation; try a ridge penalty > 0)")]
    Separation { iterations: usize },

    #[error("scale V2*tau(Z) = {0} is not positive")]
    DegenerateScale(f64),

    #[error("k = {k} exceeds the {available} pairs with positive weight")]
    TooManyClusters { k: usize, available: usize },

    #[error("cluster {0} is empty")]
    EmptyCluster(usize),

    #[error("source and target cluster are both {0}")]
    SameCluster(usize),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: u64,
        msg: String,
    },
}

impl Error {
    /// True for failures that indicate a bug rather than bad input.
    pub fn is_internal(&self) -> bool {
        matches!(self, Error::NegativeStatistic(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
