use thiserror::Error;

/// Errors raised by the numeric substrate, the adaptation engine, and the
/// benchmark generators.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    /// Batch-norm asked to use batch statistics on a single-row batch.
    #[error("degenerate batch: batch statistics require at least 2 rows")]
    DegenerateBatch,

    #[error("row {row} is not a probability distribution (sum {sum})")]
    NotADistribution { row: usize, sum: f64 },

    #[error("label row {row} is not one-hot")]
    NotOneHot { row: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("non-finite values produced in {0}")]
    NonFinite(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Model split produced no adaptable normalization parameters anywhere.
    #[error("nothing to adapt: no normalization layers in shallow segment or branch")]
    NothingToAdapt,

    #[error("training diverged: non-finite loss at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    #[error("missing forward trace for layer {0}")]
    MissingTrace(usize),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;
