use std::path::PathBuf;

/// Errors produced by the registration engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("pyramid too coarse: level {level} would be {width}x{height}, minimum is 8x8")]
    TooCoarse { level: usize, width: usize, height: usize },
    #[error("mask has zero total weight")]
    EmptyMask,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("kernel scale theta*eta must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("corner configuration is degenerate")]
    DegenerateCorners,
    #[error("point maps to infinity under the homography")]
    AtInfinity,
    #[error("homography is singular")]
    Singular,
    #[error("linear system is numerically singular")]
    SingularSystem,
    #[error("image is too small: {0}")]
    TooSmall(String),
    #[error("zero-length grid edge at lattice point ({row}, {col})")]
    ZeroLengthEdge { row: usize, col: usize },
    #[error("input width {width} is not divisible by {groups} groups")]
    NotDivisible { width: usize, groups: usize },
    #[error("layer width mismatch: {0}")]
    WidthMismatch(String),
    #[error("training diverged at epoch {0}")]
    Divergence(usize),
    #[error("insufficient overlap: only {0} correspondences survived")]
    InsufficientOverlap(usize),
    #[error("invalid parameter '{key}': {reason}")]
    Schema { key: String, reason: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Codec {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
