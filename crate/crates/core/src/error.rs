use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed document: {0}")]
    Parse(serde_json::Error),

    #[error("invalid field `{field}`: {reason}")]
    InvalidField { field: String, reason: String },

    #[error("microbatch size {b} is not present in the profile tables")]
    MissingMicrobatch { b: u32 },

    #[error("depth {depth} does not divide block count {blocks}")]
    Indivisible { depth: usize, blocks: usize },

    #[error("invalid schedule shape: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("simulation deadlock: {0}")]
    Deadlock(String),

    #[error("render error: {0}")]
    Render(String),

    #[error("no feasible configuration: {0}")]
    Infeasible(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::InvalidField {
        field: field.into(),
        reason: reason.into(),
    }
}
