use thiserror::Error;

/// Errors raised anywhere in the lab.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: u64, msg: String },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("integrity violation: {0}")]
    Integrity(String),
    #[error("model error: {0}")]
    Model(String),
    #[error("training diverged at step {step}: {msg}")]
    Divergence { step: u64, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl LabError {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        LabError::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            LabError::Config(_) | LabError::Parse { .. } | LabError::Shape { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
