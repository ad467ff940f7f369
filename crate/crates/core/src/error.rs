use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up; `axis` names the offending dimension.
    #[error("{op}: dimension mismatch on {axis}: {detail}")]
    Shape {
        op: &'static str,
        axis: String,
        detail: String,
    },
    /// A configuration value is invalid (group counts, ladders, schedules...).
    #[error("configuration error: {0}")]
    Config(String),
    /// A caller broke an operation precondition.
    #[error("contract violated: {0}")]
    Contract(String),
    /// A metric is undefined for the given inputs (e.g. Hausdorff of an empty set).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    /// Training hit a non-finite loss or gradient.
    #[error("non-finite value during training: {0}")]
    NonFinite(String),
    /// Synthetic data generation could not meet its constraints.
    #[error("generation failed: {0}")]
    Generation(String),
    /// Malformed volume or checkpoint file.
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, axis: impl Into<String>, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        axis: axis.into(),
        detail: detail.into(),
    }
}
