use std::path::PathBuf;

/// Errors produced by the editing engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("malformed transforms file: {0}")]
    MalformedTransforms(String),
    #[error("malformed camera path: {0}")]
    MalformedPath(String),
    #[error("pose of frame {frame} is not orthonormal (deviation {deviation:.3e})")]
    NonOrthonormalPose { frame: usize, deviation: f64 },
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("unknown view {0}")]
    UnknownView(usize),
    #[error("image contains non-finite pixel values")]
    NonFinitePixels,
    #[error("direction {index} has norm {norm}, expected unit length")]
    NonUnitDirection { index: usize, norm: f64 },
    #[error("non-finite field input at sample {0}")]
    NonFiniteInput(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("pixel ({x}, {y}) outside {width}x{height} image")]
    PixelOutOfBounds {
        x: u32,
        y: u32,
        width: u32,
        height: u32,
    },
    #[error("invalid sampling spec: {0}")]
    InvalidSpec(String),
    #[error("downscale {downscale} does not divide {width}x{height}")]
    InvalidDownscale {
        downscale: u32,
        width: u32,
        height: u32,
    },
    #[error("dataset has no views")]
    EmptyDataset,
    #[error("non-finite loss at iteration {0}")]
    NonFiniteLoss(u64),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("remote service unavailable: {0}")]
    RemoteUnavailable(String),
    #[error("remote protocol error: {0}")]
    RemoteProtocolError(String),
    #[error("editor produced non-finite output")]
    NonFiniteOutput,
    #[error("operation not supported by editor `{0}`")]
    UnsupportedByEditor(String),
    #[error("noise level {0} is below the smallest schedule step")]
    NoiseLevelTooSmall(f64),
    #[error("degenerate edit direction (norm {0:.3e})")]
    DegenerateDirection(f64),
    #[error("invalid selection string `{0}`")]
    InvalidSelection(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("control conflict: {0}")]
    ControlConflict(String),
    #[error("port {0} already in use")]
    PortInUse(u16),
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
    #[error("png: {0}")]
    Png(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
