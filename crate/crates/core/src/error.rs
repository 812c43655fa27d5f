use thiserror::Error;

/// Errors raised by tensor, transform, model and pipeline operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("axis {axis} out of range for rank-{rank} tensor")]
    Axis { axis: usize, rank: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("unsupported multiwavelet degree k={0} (supported: 1..=8)")]
    UnsupportedDegree(usize),

    #[error("decomposition depth {depth} too large for time extent {len}")]
    DepthTooLarge { depth: usize, len: usize },

    #[error("empty sample")]
    EmptySample,

    #[error("singular value decomposition did not converge")]
    NoConvergence,

    #[error("series too short: {len} rows, need at least {need}")]
    SeriesTooShort { len: usize, need: usize },

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Shape {
        op,
        detail: detail.into(),
    })
}
