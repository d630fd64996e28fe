use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite feature at agent {agent}, step {step}, feature {feature}")]
    NonFinite {
        agent: usize,
        step: usize,
        feature: usize,
    },

    #[error("parse error at {line}:{column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("denoiser failed at diffusion step {step}: {message}")]
    Denoiser { step: usize, message: String },

    #[error("non-finite loss ({0})")]
    NonFiniteLoss(f64),

    #[error("prior has {count} components, cap is {cap}; reduce agents or behaviors")]
    TooManyComponents { count: usize, cap: usize },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
