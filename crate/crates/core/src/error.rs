use thiserror::Error;

pub type Result<T> = std::result::Result<T, DeptError>;

#[derive(Debug, Error)]
pub enum DeptError {
    #[error("shape error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index {index} out of range for {bound} rows")]
    Index { index: usize, bound: usize },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("sequence length {len} exceeds limit {max}")]
    Length { len: usize, max: usize },

    #[error("prompt length m={m} exceeds budget length l={l}")]
    Budget { m: usize, l: usize },

    #[error("rank r={r} exceeds min(s, d)={max}")]
    Rank { r: usize, max: usize },

    #[error("cannot transfer tensor `{tensor}`: expected shape {expected:?}, found {found:?}")]
    Transfer {
        tensor: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("sample of k={k} requested from {n} examples")]
    Sample { k: usize, n: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged at step {step}: {reason}")]
    Training { step: usize, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl DeptError {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        DeptError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// True for errors caused by user-supplied configuration rather than by a
    /// failure during the run itself.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            DeptError::Config(_)
                | DeptError::Budget { .. }
                | DeptError::Rank { .. }
                | DeptError::Json(_)
                | DeptError::Sample { .. }
        )
    }
}
