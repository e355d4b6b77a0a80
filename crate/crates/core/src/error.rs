use alloc::string::String;

/// Errors raised by the core pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Two arrays that must agree in shape do not.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration is internally inconsistent (caught at assembly time).
    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },

    /// The rasterizer cannot fit the requested channels into the image.
    #[error("render error: {0}")]
    Render(String),

    /// Ingested data violates an invariant (non-finite values, bad labels, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Training produced a non-finite loss.
    #[error("non-finite loss at batch {batch} (lr = {lr:e}, grad-norm = {grad_norm:e})")]
    NonFiniteLoss { lr: f64, grad_norm: f64, batch: usize },
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { field: field.into(), message: message.into() }
    }
}
