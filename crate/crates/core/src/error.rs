use std::path::PathBuf;

use thiserror::Error;

use crate::scene::ObjectClass;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point has non-positive camera depth z = {0}")]
    NonPositiveDepth(f64),
    #[error("rotation is not orthonormal (max |RᵀR - I| = {deviation:e}, det = {det})")]
    InvalidRotation { deviation: f64, det: f64 },
    #[error("invalid camera model: {0}")]
    InvalidCamera(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SensorError {
    #[error("radar buffer empty in window ending at {0}s")]
    EmptyBuffer(f64),
    #[error("invalid sensor configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StalenessError {
    #[error("no {modality} frame within one period of {time}s")]
    InsufficientHistory { modality: &'static str, time: f64 },
    #[error(transparent)]
    Sensor(#[from] SensorError),
    #[error("invalid staleness configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlignmentError {
    #[error("no LiDAR point survives projection at both timestamps")]
    NoCommonPoints,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectorError {
    #[error("training loss became non-finite at epoch {epoch}, batch {batch}")]
    DivergenceDetected { epoch: usize, batch: usize },
    #[error("baseline F1 is zero for class {0}")]
    BaselineZero(ObjectClass),
    #[error("feature dimension mismatch: model expects {expected}, grid provides {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
}

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown record kind {0}")]
    UnknownKind(u8),
    #[error("record truncated")]
    Truncated,
    #[error("trailing bytes after record")]
    TrailingBytes,
    #[error("unsupported schema version {0}")]
    UnsupportedSchema(u32),
    #[error("line {line}: {message}")]
    Csv { line: usize, message: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Top-level error carried by the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Sensor(#[from] SensorError),
    #[error(transparent)]
    Staleness(#[from] StalenessError),
    #[error(transparent)]
    Alignment(#[from] AlignmentError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

impl Error {
    /// Process exit code: 2 configuration, 3 data, 4 numeric divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Geometry(GeometryError::InvalidCamera(_)) => 2,
            Error::Sensor(SensorError::InvalidConfig(_)) => 2,
            Error::Staleness(StalenessError::InvalidConfig(_)) => 2,
            Error::Detector(DetectorError::DivergenceDetected { .. }) => 4,
            _ => 3,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
