use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A tropical reduction row had no finite candidate.
    #[error("degenerate row {row}: no finite candidate and no bias")]
    DegenerateRow { row: usize },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid network spec: {0}")]
    Spec(String),

    #[error("initialization failed: {0}")]
    Init(String),

    #[error("init scheme does not cover parameter `{0}`")]
    Scheme(String),

    #[error("missing parameter `{0}`")]
    MissingParameter(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("evaluation point is within eps of a tie after {retries} retries")]
    DegeneratePoint { retries: usize },

    #[error("divergence in parameter `{id}`: non-finite gradient")]
    Divergence { id: String },

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("data format: {0}")]
    Format(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}
