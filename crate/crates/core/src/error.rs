use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("malformed {what}: {reason}")]
    Parse { what: String, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("fold index {0} out of range, expected 0..=3")]
    FoldIndex(usize),

    #[error("class count {0} is not divisible by 4")]
    ClassCount(usize),

    #[error("class {class_id} has {available} images, need at least {needed}")]
    NotEnoughImages {
        class_id: u32,
        available: usize,
        needed: usize,
    },

    #[error("split has no classes")]
    EmptySplit,

    #[error("duplicate class id {0}")]
    DuplicateClass(u32),

    #[error("class {0} has an empty description")]
    EmptyDescription(u32),

    #[error("no description for class {0}")]
    MissingDescription(u32),

    #[error("token {0:?} already present in vocabulary")]
    TokenExists(String),

    #[error("tokenizer lacks special token {0}")]
    MissingSpecialToken(&'static str),

    #[error("prompt has no image slot")]
    MissingImageSlot,

    #[error("semantic prompt unavailable: no <SEM_prompt> token was generated")]
    SemanticPromptUnavailable,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(what: impl Into<String>, reason: impl ToString) -> Self {
        Error::Parse {
            what: what.into(),
            reason: reason.to_string(),
        }
    }

    /// Numerical failures map to a distinct process exit code.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite(_))
    }
}
