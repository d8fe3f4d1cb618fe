use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An input lies outside the domain where an operation is defined.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("pressure design matrix for segment {segment} is rank deficient")]
    RankDeficient { segment: usize },

    #[error("partition {partition} contains no points")]
    EmptyPartition { partition: usize },

    #[error("insufficient correspondences: need at least {required}, got {got}")]
    InsufficientData { required: usize, got: usize },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("tracking lost: {0}")]
    TrackingLoss(String),

    #[error("unknown viewpoint `{0}`")]
    UnknownViewpoint(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
