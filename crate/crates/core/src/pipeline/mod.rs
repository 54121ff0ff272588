//! End-to-end composition: seam layout, blending, single-frame and
//! frame-sequence stitching.

mod sequence;

use std::fmt;

use rayon::prelude::*;

use crate::calibration::CalibrationFile;
use crate::error::{Result, StitchError};
use crate::lens_model::{compensate_falloff, UnwarpMap};
use crate::mls_deform::{
    apply_grid, build_backward_grid, DeformationGrid, MlsVariant, DEFAULT_ALPHA,
    DEFAULT_GRID_SPACING,
};
use crate::raster::{EquirectImage, FisheyeImage, Raster};
use crate::refine_align::{
    collect_boundary_matches, estimate_affine, warp_affine, AffineFit, BoundaryMatchSet,
    MatchConfig,
};
use crate::temporal::{
    decide_frame, decide_frame_ungated, is_good, BoundaryScore, DecisionReason, FrameDecision,
    GateThresholds, TemporalState,
};

pub use sequence::{join_dual_fisheye, list_frames, split_dual_fisheye, stitch_sequence};

/// One of the two stitching boundaries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Seam {
    /// Longitude -90°.
    Left,
    /// Longitude +90°.
    Right,
}

/// Geometry of the two overlap bands in the output panorama.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeamLayout {
    pub width: usize,
    pub height: usize,
    pub overlap_deg: f64,
}

impl SeamLayout {
    pub fn new(width: usize, overlap_deg: f64) -> Result<Self> {
        crate::raster::check_equirect_dims(width, width / 2)?;
        let layout = SeamLayout {
            width,
            height: width / 2,
            overlap_deg,
        };
        if !(overlap_deg > 0.0) || layout.band_width_px() < 8.0 {
            return Err(StitchError::InvalidInput(format!(
                "overlap band of {overlap_deg}° is {:.1} px wide at width {width}; need at least 8",
                layout.band_width_px()
            )));
        }
        Ok(layout)
    }

    pub fn for_fov(width: usize, fov_deg: f64) -> Result<Self> {
        Self::new(width, fov_deg - 180.0)
    }

    pub fn band_width_px(&self) -> f64 {
        self.overlap_deg / 360.0 * self.width as f64
    }

    pub fn seam_column(&self, seam: Seam) -> f64 {
        match seam {
            Seam::Left => self.width as f64 * 0.25,
            Seam::Right => self.width as f64 * 0.75,
        }
    }

    #[inline]
    fn abs_longitude_deg(&self, x: usize) -> f64 {
        (x as f64 / self.width as f64 * 360.0 - 180.0).abs()
    }

    /// The band a column belongs to, if any.
    pub fn band_of(&self, x: usize) -> Option<Seam> {
        let lon = x as f64 / self.width as f64 * 360.0 - 180.0;
        if (lon.abs() - 90.0).abs() <= self.overlap_deg / 2.0 {
            Some(if lon < 0.0 { Seam::Left } else { Seam::Right })
        } else {
            None
        }
    }

    /// Columns of one band, in ascending order.
    pub fn band_columns(&self, seam: Seam) -> Vec<usize> {
        (0..self.width).filter(|&x| self.band_of(x) == Some(seam)).collect()
    }

    /// Blend weight of the right image at a column: 1 toward its center,
    /// 0 toward the left lens, linear across each band.
    #[inline]
    pub fn right_weight(&self, x: usize, ramp: bool) -> f32 {
        let a = self.abs_longitude_deg(x);
        if ramp {
            ((90.0 + self.overlap_deg / 2.0 - a) / self.overlap_deg).clamp(0.0, 1.0) as f32
        } else if a < 90.0 {
            1.0
        } else {
            0.0
        }
    }
}

/// Ramp blend (or hard seam when `ramp` is off). Where only one image is
/// valid it passes through; pixels covered by neither are a coverage error.
pub fn blend(
    left: &EquirectImage,
    right: &EquirectImage,
    layout: &SeamLayout,
    ramp: bool,
) -> Result<EquirectImage> {
    if !left.same_shape(right) || left.width() != layout.width || left.height() != layout.height {
        return Err(StitchError::DimensionMismatch(
            "blend inputs must share the layout's dimensions".into(),
        ));
    }
    let (w, h, c) = (layout.width, layout.height, left.channels());
    let weights: Vec<f32> = (0..w).map(|x| layout.right_weight(x, ramp)).collect();
    let mut out = Raster::new(w, h, c);
    // Per row: leftmost and rightmost column covered by neither image.
    let gaps: Vec<Option<(usize, usize)>> = out
        .pixels
        .par_chunks_mut(w * c)
        .enumerate()
        .map(|(y, row)| {
            let mut gap: Option<(usize, usize)> = None;
            for x in 0..w {
                let i = y * w + x;
                let wr = match (left.valid[i], right.valid[i]) {
                    (true, true) => weights[x],
                    (false, true) => 1.0,
                    (true, false) => 0.0,
                    (false, false) => {
                        let g = gap.get_or_insert((x, x));
                        g.1 = x;
                        continue;
                    }
                };
                let l = left.raster.pixel(x, y);
                let r = right.raster.pixel(x, y);
                let o = &mut row[x * c..(x + 1) * c];
                for k in 0..c {
                    o[k] = wr * r[k] + (1.0 - wr) * l[k];
                }
            }
            gap
        })
        .collect();
    let hole = gaps
        .iter()
        .enumerate()
        .filter_map(|(y, g)| g.map(|(a, b)| (a, y, b, y)))
        .reduce(|p, q| (p.0.min(q.0), p.1.min(q.1), p.2.max(q.2), p.3.max(q.3)));
    if let Some((x0, y0, x1, y1)) = hole {
        return Err(StitchError::CoverageHole { x0, y0, x1, y1 });
    }
    EquirectImage::from_raster(out)
}

/// Everything that parameterizes a stitch besides the calibration itself.
#[derive(Clone, Debug, PartialEq)]
pub struct StitchConfig {
    pub pano_width: usize,
    pub variant: MlsVariant,
    pub alpha: f64,
    pub grid_spacing: u32,
    pub thresholds: GateThresholds,
    /// When off, every fresh estimate is applied regardless of match quality.
    pub gate: bool,
    pub refine: bool,
    pub blend: bool,
    pub matching: MatchConfig,
}

impl StitchConfig {
    pub fn for_calibration(calib: &CalibrationFile) -> Self {
        StitchConfig {
            pano_width: calib.pano_width,
            alpha: calib.alpha,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        crate::raster::check_equirect_dims(self.pano_width, self.pano_width / 2)?;
        let t = &self.thresholds;
        let ok = self.alpha > 0.0
            && self.grid_spacing >= 1
            && t.ncc_thresh.is_finite()
            && t.dy_margin >= 0.0
            && t.dx_drift >= 0.0
            && t.dx_floor > 0.0
            && self.matching.template_size > 0
            && self.matching.rows.iter().all(|r| (0.0..=1.0).contains(r));
        if ok {
            Ok(())
        } else {
            Err(StitchError::InvalidInput(format!("invalid stitch configuration: {self:?}")))
        }
    }
}

impl Default for StitchConfig {
    fn default() -> Self {
        StitchConfig {
            pano_width: 2048,
            variant: MlsVariant::Rigid,
            alpha: DEFAULT_ALPHA,
            grid_spacing: DEFAULT_GRID_SPACING,
            thresholds: GateThresholds::default(),
            gate: true,
            refine: true,
            blend: true,
            matching: MatchConfig::default(),
        }
    }
}

/// Precomputes the backward grid from the calibration's control points, or
/// an identity grid when there are none.
pub fn build_grid(calib: &CalibrationFile, config: &StitchConfig) -> Result<DeformationGrid> {
    let w = config.pano_width as u32;
    if calib.control_points.is_empty() {
        return DeformationGrid::identity(w, w / 2, config.grid_spacing);
    }
    let cps = calib.control_point_set_with_alpha(config.alpha)?;
    build_backward_grid(&cps, w, w / 2, config.grid_spacing, config.variant)
}

/// Per-frame record for the diagnostics file.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameDiagnostics {
    pub index: u64,
    pub matches: Option<BoundaryMatchSet>,
    pub decision: FrameDecision,
}

impl fmt::Display for FrameDiagnostics {
    /// `index, scores, displacements, warpEn, reason`, tab separated.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (scores, disps) = match &self.matches {
            None => ("-".to_string(), "-".to_string()),
            Some(set) => (
                set.matches
                    .iter()
                    .map(|m| match m.result {
                        Some(r) => format!("{:.6}", r.score),
                        None => "-inf".into(),
                    })
                    .collect::<Vec<_>>()
                    .join(","),
                set.matches
                    .iter()
                    .map(|m| match m.result {
                        Some(r) => format!("{}:{}", r.dx, r.dy),
                        None => "nan".into(),
                    })
                    .collect::<Vec<_>>()
                    .join(","),
            ),
        };
        write!(
            f,
            "{}\t{}\t{}\t{}\t{}",
            self.index,
            scores,
            disps,
            u8::from(self.decision.warp_enabled()),
            self.decision.reason
        )
    }
}

/// Result of stitching one fisheye pair.
#[derive(Clone, Debug)]
pub struct FrameOutput {
    pub panorama: EquirectImage,
    /// Left lens contribution as it entered the blend.
    pub left: EquirectImage,
    /// Right lens contribution after deformation and refinement.
    pub right: EquirectImage,
    pub matches: Option<BoundaryMatchSet>,
    pub fit: Option<AffineFit>,
    pub decision: FrameDecision,
    pub state: TemporalState,
}

/// A calibrated stitcher with its unwarp tables and deformation grid built.
#[derive(Clone, Debug)]
pub struct Stitcher {
    calib: CalibrationFile,
    config: StitchConfig,
    layout: SeamLayout,
    left_map: UnwarpMap,
    right_map: UnwarpMap,
    grid: DeformationGrid,
}

impl Stitcher {
    pub fn new(calib: CalibrationFile, grid: DeformationGrid, config: StitchConfig) -> Result<Self> {
        calib.validate()?;
        config.validate()?;
        let w = config.pano_width;
        if grid.width as usize != w || grid.height as usize != w / 2 {
            return Err(StitchError::DimensionMismatch(format!(
                "grid is {}x{}, output is {}x{}",
                grid.width,
                grid.height,
                w,
                w / 2
            )));
        }
        let layout = SeamLayout::for_fov(w, calib.right.fov_deg)?;
        Ok(Stitcher {
            left_map: UnwarpMap::build(&calib.left, w)?,
            right_map: UnwarpMap::build(&calib.right, w)?,
            calib,
            config,
            layout,
            grid,
        })
    }

    pub fn layout(&self) -> &SeamLayout {
        &self.layout
    }

    pub fn config(&self) -> &StitchConfig {
        &self.config
    }

    pub fn calibration(&self) -> &CalibrationFile {
        &self.calib
    }

    pub fn grid(&self) -> &DeformationGrid {
        &self.grid
    }

    /// Falloff compensation and unwarp of both lenses, with the MLS grid
    /// applied to the right image.
    pub fn prepare(
        &self,
        left: &FisheyeImage,
        right: &FisheyeImage,
    ) -> Result<(EquirectImage, EquirectImage)> {
        if left.channels != right.channels {
            return Err(StitchError::DimensionMismatch(
                "fisheye images differ in channel count".into(),
            ));
        }
        let l = self.left_map.apply(&compensate_falloff(left, &self.calib.left)?);
        let r = self.right_map.apply(&compensate_falloff(right, &self.calib.right)?);
        let r = apply_grid(&r, &self.grid)?;
        Ok((l, r))
    }

    /// Full single-frame flow: prepare, refine under the temporal gate, blend.
    pub fn stitch_frame(
        &self,
        left: &FisheyeImage,
        right: &FisheyeImage,
        state: &TemporalState,
    ) -> Result<FrameOutput> {
        let (l, r) = self.prepare(left, right)?;
        self.finish_frame(l, r, state)
    }

    /// Refinement, gating and blending on already prepared contributions.
    pub fn finish_frame(
        &self,
        left: EquirectImage,
        right: EquirectImage,
        state: &TemporalState,
    ) -> Result<FrameOutput> {
        let mut matches = None;
        let mut fit = None;
        let (decision, state) = if self.config.refine {
            let set = collect_boundary_matches(&left, &right, &self.layout, &self.config.matching)?;
            let sl = BoundaryScore::aggregate(&set, Seam::Left);
            let sr = BoundaryScore::aggregate(&set, Seam::Right);
            let t = &self.config.thresholds;
            let wanted = if self.config.gate {
                is_good(&sl, state.prev_dx.map(|d| d[0]), t)
                    && is_good(&sr, state.prev_dx.map(|d| d[1]), t)
            } else {
                true
            };
            if wanted && set.is_complete() {
                fit = estimate_affine(&set.pairs())
                    .ok()
                    .filter(|f| f.transform.is_invertible());
            }
            let fresh = fit.map(|f| f.transform);
            matches = Some(set);
            if self.config.gate {
                decide_frame(&sl, &sr, fresh, state, t)
            } else {
                (decide_frame_ungated(fresh), *state)
            }
        } else {
            (
                FrameDecision {
                    affine: None,
                    reason: DecisionReason::Disabled,
                },
                *state,
            )
        };
        let right = match decision.affine {
            Some(a) => warp_affine(&right, &a)?,
            None => right,
        };
        let panorama = blend(&left, &right, &self.layout, self.config.blend)?;
        Ok(FrameOutput {
            panorama,
            left,
            right,
            matches,
            fit,
            decision,
            state,
        })
    }
}

/// One-shot stitch of a fisheye pair. Builds the unwarp tables on every
/// call; use [`Stitcher`] to amortize them across frames.
pub fn stitch_frame(
    left: &FisheyeImage,
    right: &FisheyeImage,
    calib: &CalibrationFile,
    config: &StitchConfig,
    grid: &DeformationGrid,
    state: &TemporalState,
) -> Result<(EquirectImage, TemporalState)> {
    let stitcher = Stitcher::new(calib.clone(), grid.clone(), config.clone())?;
    let out = stitcher.stitch_frame(left, right, state)?;
    Ok((out.panorama, out.state))
}
