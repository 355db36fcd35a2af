//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller handed us data that violates a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A 2-opt (or 3-opt) move refers to positions that are out of range,
    /// adjacent, or otherwise not applicable to a tour of the given length.
    #[error("invalid move ({i}, {j}) for tour of length {n}")]
    InvalidMove { i: usize, j: usize, n: usize },

    /// Two tensors fed to the same operation disagree on dimensions.
    #[error("shape mismatch in {op}: left {left:?} vs right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// An operation refused to run because its cost guard tripped
    /// (exact solver size cap, lookahead budget, 3-opt scan cap).
    #[error("size limit exceeded: {0}")]
    SizeLimit(String),

    /// Text input (TSPLIB file, JSONL dataset, tour file) failed to parse.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Every candidate action is masked out, so no distribution exists.
    #[error("no admissible action: every candidate move is masked")]
    NoFeasibleAction,

    /// A configuration value or combination is unusable.
    #[error("config error: {0}")]
    Config(String),

    /// A checkpoint file is missing, corrupt, or incompatible with the
    /// requested configuration.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
