//! Error type shared across the toolkit.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum FkdError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {file}:{line}: {msg}")]
    Parse {
        file: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("node index {index} out of range (n = {n}) in {file}:{line}")]
    IndexOutOfRange {
        file: PathBuf,
        line: usize,
        index: usize,
        n: usize,
    },

    #[error("row-count mismatch: {features} feature rows vs {labels} label rows")]
    RowCountMismatch { features: usize, labels: usize },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("graph has no edges")]
    EmptyEdgeSet,

    #[error("mask selects no nodes")]
    EmptyMask,

    #[error("infeasible degree: {requested} edges requested but only {available} pairs available")]
    InfeasibleDegree { requested: usize, available: usize },

    #[error("failed to hit homophily tolerance: target {target}, best {best} after {attempts} attempts")]
    HomophilyTolerance {
        target: f64,
        best: f64,
        attempts: usize,
    },

    #[error("class {class} has {available} nodes, {requested} requested for the split")]
    SplitInfeasible {
        class: usize,
        available: usize,
        requested: usize,
    },

    #[error("jacobi eigensolver did not converge after {sweeps} sweeps (off-diagonal norm {off})")]
    EigNoConvergence { sweeps: usize, off: f64 },

    #[error("band power {power} not available (max {max})")]
    MissingPower { power: usize, max: usize },

    #[error("non-finite loss at epoch {epoch} during {stage}")]
    NonFiniteLoss { epoch: usize, stage: String },

    #[error("operation requires an exact-mode framelet system")]
    ExactModeRequired,

    #[error("chebyshev degree {0} below minimum 4")]
    DegreeTooLow(usize),

    #[error("({0}, {1}) is not an edge")]
    NonEdge(usize, usize),

    #[error("rewiring has no candidate edge left to add")]
    RewireSaturated,

    #[error("framelet cache invalid: {0}")]
    CacheInvalid(String),

    #[error("checkpoint invalid: {0}")]
    CheckpointInvalid(String),

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, FkdError>;
