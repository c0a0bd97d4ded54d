use alloc::string::String;

/// Failure modes shared by every kernel and pipeline stage.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid annotation: {0}")]
    Annotation(String),

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("invalid synthetic sequence description: {0}")]
    Spec(String),

    #[error("frame source: {0}")]
    Source(String),

    #[error("malformed weight data: {0}")]
    Format(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn dim(op: &'static str, detail: String) -> Error {
    Error::Dimension { op, detail }
}
