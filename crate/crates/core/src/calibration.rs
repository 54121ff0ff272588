//! Calibration file: both lens models plus the alignment control points.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, StitchError};
use crate::lens_model::{LensCalibration, LensRole};
use crate::mls_deform::{ControlPointSet, DEFAULT_ALPHA};

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

fn default_pano_width() -> usize {
    2048
}

/// JSON layout:
///
/// ```json
/// { "left": {...}, "right": {...}, "pano_width": 2048, "alpha": 1.0,
///   "control_points": [[px, py, qx, qy], ...] }
/// ```
///
/// Control points are equirectangular pixels at `pano_width`; `p` is where a
/// scene point appears in the right unwarp, `q` where it appears in the left.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub left: LensCalibration,
    pub right: LensCalibration,
    #[serde(default = "default_pano_width")]
    pub pano_width: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub control_points: Vec<[f64; 4]>,
}

impl CalibrationFile {
    pub fn validate(&self) -> Result<()> {
        self.left.validate()?;
        self.right.validate()?;
        if self.left.role != LensRole::Left || self.right.role != LensRole::Right {
            return Err(StitchError::CalibrationInvalid(
                "lens roles must match their \"left\"/\"right\" keys".into(),
            ));
        }
        if self.pano_width == 0 || self.pano_width % 2 != 0 {
            return Err(StitchError::CalibrationInvalid(format!(
                "pano_width must be even and positive, got {}",
                self.pano_width
            )));
        }
        if self.left.fov_deg != self.right.fov_deg {
            return Err(StitchError::CalibrationInvalid(
                "both lenses must share one field of view".into(),
            ));
        }
        if !(self.alpha > 0.0) {
            return Err(StitchError::CalibrationInvalid(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    pub fn control_point_set(&self) -> Result<ControlPointSet> {
        self.control_point_set_with_alpha(self.alpha)
    }

    pub fn control_point_set_with_alpha(&self, alpha: f64) -> Result<ControlPointSet> {
        ControlPointSet::from_rows(&self.control_points, alpha)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cal: CalibrationFile = serde_json::from_str(text)
            .map_err(|e| StitchError::CalibrationInvalid(e.to_string()))?;
        cal.validate()?;
        Ok(cal)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("calibration serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            StitchError::CalibrationInvalid(format!("{}: {e}", path.display()))
        })?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}
