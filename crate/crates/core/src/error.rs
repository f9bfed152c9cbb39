use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid model or configuration input. `field` names the offending item.
    #[error("configuration error in `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("base heading {base_phi} does not match joint 0 value {joint_phi}")]
    HeadingMismatch { base_phi: f64, joint_phi: f64 },

    #[error("numerical failure at step {step}: {msg}")]
    Numerical { step: usize, msg: String },

    #[error("step index {k} out of range (horizon {horizon})")]
    StepOutOfRange { k: usize, horizon: usize },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }
}
