use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed JSON; `offset` is a byte offset into the input.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("invalid document {document}: {message}")]
    Validation { document: String, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("graph consistency: {0}")]
    Consistency(String),

    #[error("autodiff: {0}")]
    Tape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("expression parse error at token {position}: {message}")]
    Expression { position: usize, message: String },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("decode error: {0}")]
    Decode(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("id mismatch: missing predictions for [{}], unknown predictions [{}]", missing.join(","), extra.join(","))]
    IdMismatch {
        missing: Vec<String>,
        extra: Vec<String>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by bad user input (as opposed to a broken
    /// internal invariant).
    pub fn is_input_error(&self) -> bool {
        !matches!(
            self,
            Error::Shape(_) | Error::Consistency(_) | Error::Tape(_)
        )
    }
}
