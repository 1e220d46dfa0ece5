use alloc::string::String;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("perturbation mask has no editable coordinate")]
    EmptyMask,

    #[error("grid shape {rows}x{cols} does not cover {len} coordinates")]
    GridShape {
        rows: usize,
        cols: usize,
        len: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("template is empty")]
    EmptyTemplate,

    #[error("one-class SVM did not converge after {iterations} iterations (KKT violation {kkt_violation:e})")]
    SolverNonConvergence {
        iterations: usize,
        kkt_violation: f64,
    },

    #[error("cannot roll back {requested} self-update entries, only {available} present")]
    RollbackExceeds { requested: usize, available: usize },

    #[error("zero-norm update direction")]
    UndefinedDirection,

    #[error("heuristic rank {rank} has {found} accepted records, at least 3 are required")]
    HeuristicFit { rank: usize, found: usize },

    #[error("{0} set is empty")]
    EmptySet(&'static str),

    #[error("operation unsupported for this dataset mode: {0}")]
    UnsupportedMode(&'static str),
}
