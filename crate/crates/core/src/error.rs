use thiserror::Error;

pub type Result<T, E = TagError> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TagError {
    #[error("unknown task id {0}")]
    UnknownTask(usize),

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("training diverged at step {step} on task {task}: loss {loss}")]
    Diverged { step: usize, task: usize, loss: f64 },

    #[error("no affinity samples survive the schedule filter")]
    EmptyFilter,

    #[error("target column {target} has {present} present entries (need at least 2)")]
    SparseColumn { target: usize, present: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("instance exceeds guard: {0}")]
    GuardExceeded(String),

    #[error("selection problem is infeasible: {0}")]
    Infeasible(String),

    #[error("task {0} is not covered by any chosen group")]
    Uncovered(usize),

    #[error("rejection sampling exhausted {attempts} attempts: {what}")]
    SamplingExhausted { attempts: usize, what: String },

    #[error("malformed input: {0}")]
    Parse(String),

    #[error("provenance mismatch: {0}")]
    Provenance(String),
}

impl TagError {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        TagError::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
