use alloc::string::String;

/// Errors raised by the segmentation engine.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A mask selected no pixels at feature resolution. Pooling is undefined
    /// on it, so the episode has to be rejected by the caller.
    #[error("degenerate mask: {0}")]
    DegenerateMask(String),

    #[error("non-finite value in {context}{}", iteration.map(|j| alloc::format!(" (iteration {j})")).unwrap_or_default())]
    NonFinite {
        context: String,
        iteration: Option<usize>,
    },

    #[error("episode sampling failed: {0}")]
    Sampling(String),

    #[error("dataset error: {0}")]
    Dataset(String),
}

pub type Result<T> = core::result::Result<T, Error>;
