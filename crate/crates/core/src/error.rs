use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("{0}")]
    Validation(String),
    #[error("{file}: row {row}: {msg}")]
    Parse { file: String, row: usize, msg: String },
    #[error("missing column `{column}` in {file}")]
    MissingColumn { file: String, column: String },
    #[error("block `{0}` has no calibration record")]
    MissingCalibration(String),
    #[error("block `{0}` has zero mean yield; cannot scale")]
    ZeroMean(String),
    #[error("block `{block}` has {count} points; outlier filtering needs at least 4")]
    TooFewPoints { block: String, count: usize },
    #[error("measured value is zero at index {index}; MAPE undefined")]
    ZeroMeasured { index: usize },
    #[error("{0}")]
    Degenerate(String),
    #[error("points outside every zone: {0:?}")]
    OutsideZones(Vec<u64>),
    #[error(transparent)]
    Neural(#[from] vineyield_neural::NeuralError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, CoreError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(CoreError::Validation(msg.into()))
}
