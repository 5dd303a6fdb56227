use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("missing value: {field} is not observed at row {row}")]
    MissingValue { row: usize, field: &'static str },

    #[error("pattern support: {pattern} has no observations ({context})")]
    PatternSupport { pattern: String, context: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("identification failure: {0}")]
    Identification(String),

    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error("invalid scenario: {}", .0.join("; "))]
    Scenario(Vec<String>),

    #[error("internal invariant violated: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, Error>;
