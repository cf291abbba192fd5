use thiserror::Error;

pub type Result<T, E = GqaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GqaError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid grouping: {0}")]
    Grouping(String),

    #[error("invalid conversion plan: {0}")]
    Plan(String),

    #[error("no candidate indices left after exclusion")]
    EmptyCandidates,

    #[error("accuracy oracle failed: {0}")]
    Oracle(String),

    #[error("enumeration budget exceeded: {count} partitions > cap {cap}")]
    Budget { count: String, cap: u64 },

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Training { epoch: usize, loss: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl GqaError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        GqaError::Shape {
            op,
            detail: detail.into(),
        }
    }
}
