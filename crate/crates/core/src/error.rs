use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = HfnError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HfnError {
    #[error("hint map requires at least one click")]
    EmptyClicks,
    #[error("click ({row}, {col}) is outside the {height}x{width} image")]
    ClickOutOfBounds { row: usize, col: usize, height: usize, width: usize },
    #[error("click ({row}, {col}) appears more than once")]
    DuplicateClick { row: usize, col: usize },
    #[error("click ({row}, {col}) is both a foreground and a background click")]
    ConflictingClick { row: usize, col: usize },
    #[error("missing {side} click: at least one foreground and one background click are required")]
    MissingClicks { side: &'static str },
    #[error("{region} region has {pixels} pixels, too small for {bands} bands")]
    RegionTooSmall { region: &'static str, pixels: usize, bands: usize },
    #[error("no eligible {region} pixel 5-10 pixels from the lesion boundary for a noisy click")]
    NoNoisyCandidate { region: &'static str },
    #[error("click budget {0} is outside 1..=6")]
    InvalidBudget(usize),
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("invalid training config: {0}")]
    InvalidTrainConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("image is empty")]
    EmptyImage,
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("fraction {0} is outside (0, 1]")]
    InvalidFraction(f64),
    #[error("dataset has no {0} samples")]
    EmptySplit(&'static str),
    #[error("manifest contains no entries")]
    EmptyManifest,
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("could not decode image: {0}")]
    Decode(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HfnError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HfnError::Io { path: path.into(), source }
    }
}
