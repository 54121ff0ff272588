use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the stitching engine.
#[derive(Error, Debug)]
pub enum StitchError {
    #[error("invalid calibration: {0}")]
    CalibrationInvalid(String),
    #[error("degenerate deformation: {0}")]
    DeformationDegenerate(String),
    #[error("template match undefined: {0}")]
    MatchUndefined(String),
    #[error("degenerate affine estimation: {0}")]
    EstimationDegenerate(String),
    #[error("affine transform is not invertible (det = {0:e})")]
    NonInvertible(f64),
    #[error("coverage hole: no valid source in x {x0}..={x1}, y {y0}..={y1}")]
    CoverageHole {
        x0: usize,
        y0: usize,
        x1: usize,
        y1: usize,
    },
    #[error("frame sequence gap: frame {0} is missing")]
    SequenceGap(u64),
    #[error("seam report undefined: {0}")]
    ReportUndefined(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("unsupported image format for {0}")]
    UnsupportedFormat(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl StitchError {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            StitchError::CalibrationInvalid(_) => 2,
            StitchError::CoverageHole { .. } => 3,
            StitchError::SequenceGap(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, StitchError>;
