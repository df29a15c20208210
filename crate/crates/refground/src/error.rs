use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad configuration: unknown key, unparsable value, inconsistent dims.
    #[error("config error: {0}")]
    Config(String),

    /// A geometric precondition was violated (box outside image bounds etc).
    #[error("invalid box: {0}")]
    InvalidBox(String),

    /// Tensor / parameter shape mismatch.
    #[error("shape error: {0}")]
    Shape(String),

    /// Dataset generation or validation failure.
    #[error("data error: {0}")]
    Data(String),

    /// Malformed line in an annotation file.
    #[error("line {line}: {msg}")]
    DataLine { line: usize, msg: String },

    /// A loss term became NaN or infinite during training.
    #[error("non-finite loss in term '{term}' (value {value})")]
    NonFiniteLoss { term: String, value: f64 },

    /// Gradient check exceeded the tolerance.
    #[error("gradient check failed: max relative error {max_rel_err:.3e} (worst: {worst})")]
    GradCheck { max_rel_err: f64, worst: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("png error: {0}")]
    Png(String),
}

impl Error {
    /// Process exit code the CLI maps this error to.
    /// 1 usage, 2 validation, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFiniteLoss { .. } | Error::GradCheck { .. } => 3,
            _ => 2,
        }
    }
}
