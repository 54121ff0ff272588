//! Ground truth for verification: procedural panoramas, projection through
//! perturbed fisheye lenses, analytic control points and seam metrics.

use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::calibration::CalibrationFile;
use crate::error::{Result, StitchError};
use crate::lens_model::{equirect_to_ray, ray_to_equirect, LensCalibration, LensRole};
use crate::mls_deform::{ControlPointSet, Point2, DEFAULT_ALPHA};
use crate::pipeline::{join_dual_fisheye, Seam, SeamLayout};
use crate::raster::{EquirectImage, FisheyeImage, Raster};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SceneKind {
    Checker,
    Gradient,
    Noise,
    Composite,
}

impl FromStr for SceneKind {
    type Err = StitchError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "checker" => Ok(SceneKind::Checker),
            "gradient" => Ok(SceneKind::Gradient),
            "noise" => Ok(SceneKind::Noise),
            "composite" => Ok(SceneKind::Composite),
            other => Err(StitchError::InvalidInput(format!("unknown scene {other:?}"))),
        }
    }
}

const CHECKER_COLS: usize = 16;
const CHECKER_ROWS: usize = 8;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice(seed: u64, octave: u64, ix: u64, iy: u64) -> f64 {
    let h = splitmix(seed ^ splitmix(octave ^ splitmix(ix ^ splitmix(iy))));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Smooth value noise, periodic in longitude, with lattice cells of
/// `width / cells_around` pixels.
fn value_noise(x: f64, y: f64, width: usize, cells_around: u64, seed: u64) -> f64 {
    let scale = cells_around as f64 / width as f64;
    let gx = x * scale;
    let gy = y * scale;
    let ix = gx.floor();
    let iy = gy.floor();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let (tx, ty) = (smooth(gx - ix), smooth(gy - iy));
    let wrap = |i: f64| (i as i64).rem_euclid(cells_around as i64) as u64;
    let (x0, x1) = (wrap(ix), wrap(ix + 1.0));
    let (y0, y1) = (iy as u64, iy as u64 + 1);
    let v = |a, b| lattice(seed, cells_around, a, b);
    let top = v(x0, y0) * (1.0 - tx) + v(x1, y0) * tx;
    let bottom = v(x0, y1) * (1.0 - tx) + v(x1, y1) * tx;
    top * (1.0 - ty) + bottom * ty
}

fn scene_value(kind: SceneKind, x: usize, y: usize, width: usize, seed: u64) -> f64 {
    let height = width / 2;
    let checker = || ((x * CHECKER_COLS / width + y * CHECKER_ROWS / height) % 2) as f64;
    let gradient = || x as f64 / (width - 1) as f64;
    let noise = || {
        let (fx, fy) = (x as f64, y as f64);
        0.5 * value_noise(fx, fy, width, 64, seed)
            + 0.3 * value_noise(fx, fy, width, 128, seed)
            + 0.2 * value_noise(fx, fy, width, 256, seed)
    };
    match kind {
        SceneKind::Checker => checker(),
        SceneKind::Gradient => gradient(),
        SceneKind::Noise => noise(),
        SceneKind::Composite => 0.4 * checker() + 0.45 * noise() + 0.15 * gradient(),
    }
}

/// Deterministic procedural panorama. Channels beyond the first use shifted seeds.
pub fn render_panorama(
    kind: SceneKind,
    width: usize,
    channels: usize,
    seed: u64,
) -> Result<EquirectImage> {
    let mut img = EquirectImage::empty(width, channels)?;
    if channels != 1 && channels != 3 {
        return Err(StitchError::InvalidInput(format!("{channels} channels")));
    }
    img.raster
        .pixels
        .par_chunks_mut(width * channels)
        .enumerate()
        .for_each(|(y, row)| {
            for x in 0..width {
                for c in 0..channels {
                    row[x * channels + c] =
                        scene_value(kind, x, y, width, seed.wrapping_add(c as u64)) as f32;
                }
            }
        });
    img.valid.fill(true);
    Ok(img)
}

/// Misalignment of the physical right lens relative to its nominal model.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Perturbation {
    /// Yaw (about up), pitch (about lens x), roll (about the optical axis), degrees.
    pub rotation_deg: [f64; 3],
    /// Relative error of the image-circle radius.
    pub radial_gain_delta: f64,
    /// Optical-center offset in fisheye pixels.
    pub decenter: [f64; 2],
}

impl Perturbation {
    pub fn rotation(yaw: f64, pitch: f64, roll: f64) -> Self {
        Perturbation {
            rotation_deg: [yaw, pitch, roll],
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.rotation_deg.iter().all(|a| a.abs() <= 5.0)
            && self.radial_gain_delta.abs() <= 0.05
            && self.decenter[0].hypot(self.decenter[1]) <= 10.0;
        if ok {
            Ok(())
        } else {
            Err(StitchError::InvalidInput(format!(
                "perturbation {self:?} exceeds caps (5°, 0.05, 10 px)"
            )))
        }
    }

    fn rotation_matrix(&self) -> Matrix3<f64> {
        let [yaw, pitch, roll] = self.rotation_deg.map(f64::to_radians);
        let (sy, cy) = yaw.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        let (sr, cr) = roll.sin_cos();
        let ry = Matrix3::new(cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy);
        let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cp, -sp, 0.0, sp, cp);
        let rz = Matrix3::new(cr, -sr, 0.0, sr, cr, 0.0, 0.0, 0.0, 1.0);
        ry * rx * rz
    }
}

/// `rot=yaw,pitch,roll,gain=g,decenter=x,y` with any subset of keys in any
/// order; values after a key run until the next `key=`.
impl FromStr for Perturbation {
    type Err = StitchError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |msg: String| StitchError::InvalidInput(format!("perturbation {s:?}: {msg}"));
        let mut fields: Vec<(&str, Vec<f64>)> = Vec::new();
        for token in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            let value = match token.split_once('=') {
                Some((key, v)) => {
                    fields.push((key.trim(), Vec::new()));
                    v
                }
                None => token,
            };
            let Some((_, values)) = fields.last_mut() else {
                return Err(bad("expected key=value".into()));
            };
            values.push(value.trim().parse().map_err(|_| bad(format!("bad number {value:?}")))?);
        }
        let mut p = Perturbation::default();
        for (key, v) in fields {
            match (key, v.as_slice()) {
                ("rot", &[y, pi, r]) => p.rotation_deg = [y, pi, r],
                ("gain", &[g]) => p.radial_gain_delta = g,
                ("decenter", &[x, y]) => p.decenter = [x, y],
                _ => return Err(bad(format!("{key} with {} values", v.len()))),
            }
        }
        p.validate()?;
        Ok(p)
    }
}

const PHYSICAL_FOV_MARGIN_DEG: f64 = 10.0;

/// A lens as it physically is: nominal calibration plus a perturbation.
#[derive(Clone, Debug)]
pub struct PhysicalLens {
    intrinsics: LensCalibration,
    world_to_lens: Matrix3<f64>,
}

impl PhysicalLens {
    pub fn new(calib: &LensCalibration, pert: &Perturbation) -> Result<Self> {
        pert.validate()?;
        // Real optics keep imaging past the calibrated field edge; widen the
        // physical limit at unchanged angular scale so a shrunken or shifted
        // image circle still fills the nominal one.
        let mut intrinsics = calib.clone();
        let fov = calib.fov_deg + PHYSICAL_FOV_MARGIN_DEG;
        intrinsics.radius *= (1.0 + pert.radial_gain_delta) * fov / calib.fov_deg;
        intrinsics.fov_deg = fov;
        intrinsics.center_x += pert.decenter[0];
        intrinsics.center_y += pert.decenter[1];
        Ok(PhysicalLens {
            intrinsics,
            world_to_lens: pert.rotation_matrix().transpose() * calib.world_to_lens(),
        })
    }

    pub fn project(&self, dir: &Vector3<f64>) -> Option<(f64, f64)> {
        self.intrinsics.project_local(&(self.world_to_lens * dir))
    }

    pub fn unproject(&self, x: f64, y: f64) -> Option<Vector3<f64>> {
        self.intrinsics
            .unproject_local(x, y)
            .map(|d| self.world_to_lens.transpose() * d)
    }
}

/// Renders what a (possibly perturbed) fisheye lens would capture of `pano`
/// onto a square sensor of `size` pixels.
pub fn project_to_fisheye(
    pano: &EquirectImage,
    calib: &LensCalibration,
    pert: &Perturbation,
    size: usize,
) -> Result<FisheyeImage> {
    let lens = PhysicalLens::new(calib, pert)?;
    let (w, h, c) = (pano.width(), pano.height(), pano.channels());
    let mut out = Raster::new(size, size, c);
    out.pixels
        .par_chunks_mut(size * c)
        .enumerate()
        .for_each(|(y, row)| {
            for x in 0..size {
                if let Some(d) = lens.unproject(x as f64, y as f64) {
                    let (px, py) = ray_to_equirect(&d, w, h);
                    let py = py.clamp(0.0, (h - 1) as f64);
                    let px_out = &mut row[x * c..(x + 1) * c];
                    if !pano.sample(px, py, px_out) {
                        px_out.fill(0.0);
                    }
                }
            }
        });
    Ok(out)
}

/// Nominal lens pair for a panorama width: both lenses at matched angular
/// resolution on square sensors.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthRig {
    pub left: LensCalibration,
    pub right: LensCalibration,
    pub fisheye_size: usize,
    pub pano_width: usize,
}

impl SynthRig {
    pub fn new(pano_width: usize) -> Self {
        let fov_deg = 195.0f64;
        let radius = fov_deg.to_radians() / 2.0 * pano_width as f64 / std::f64::consts::TAU;
        let size = (((2.0 * radius).ceil() as usize + 8) / 2) * 2;
        let c = (size as f64 - 1.0) / 2.0;
        SynthRig {
            left: LensCalibration::new(c, c, radius, LensRole::Left),
            right: LensCalibration::new(c, c, radius, LensRole::Right),
            fisheye_size: size,
            pano_width,
        }
    }

    pub fn calibration(&self, cps: Option<&ControlPointSet>) -> CalibrationFile {
        CalibrationFile {
            left: self.left.clone(),
            right: self.right.clone(),
            pano_width: self.pano_width,
            alpha: cps.map_or(DEFAULT_ALPHA, |c| c.alpha()),
            control_points: cps.map(|c| c.to_rows()).unwrap_or_default(),
        }
    }
}

/// Default latitude span of generated control points, as fractions of height.
pub const CONTROL_ROW_SPAN: (f64, f64) = (0.1, 0.9);

/// Control points along both seams, computed from the lens models alone.
/// `q_i` is a seam pixel in the left unwarp; `p_i` is where the same scene
/// point lands in the right unwarp made with the nominal calibration.
/// Rows are spread evenly over [`CONTROL_ROW_SPAN`].
pub fn gen_control_points(
    rig: &SynthRig,
    pert: &Perturbation,
    n_per_band: usize,
    alpha: f64,
) -> Result<ControlPointSet> {
    if n_per_band < 2 {
        return Err(StitchError::InvalidInput("need at least 2 control points per band".into()));
    }
    let (lo, hi) = CONTROL_ROW_SPAN;
    let rows: Vec<f64> = (0..n_per_band)
        .map(|k| lo + (hi - lo) * k as f64 / (n_per_band - 1) as f64)
        .collect();
    gen_control_points_at(rig, pert, &rows, &[0.0], alpha)
}

/// As [`gen_control_points`] with explicit rows, given as fractions of
/// height, and columns, given as longitude offsets in degrees from each seam
/// (positive points away from the right lens's axis).
pub fn gen_control_points_at(
    rig: &SynthRig,
    pert: &Perturbation,
    rows: &[f64],
    col_offsets_deg: &[f64],
    alpha: f64,
) -> Result<ControlPointSet> {
    let w = rig.pano_width;
    let h = w / 2;
    let layout = SeamLayout::for_fov(w, rig.right.fov_deg)?;
    let physical = PhysicalLens::new(&rig.right, pert)?;
    let mut pairs = Vec::with_capacity(2 * rows.len() * col_offsets_deg.len());
    for seam in [Seam::Left, Seam::Right] {
        for (&frac, &off) in rows.iter().flat_map(|r| col_offsets_deg.iter().map(move |c| (r, c))) {
            let outward = if seam == Seam::Right { 1.0 } else { -1.0 };
            let qx = layout.seam_column(seam) + outward * off / 360.0 * w as f64;
            let qy = h as f64 * frac;
            let d = equirect_to_ray(qx, qy, w, h);
            let p = physical
                .project(&d)
                .and_then(|(fx, fy)| rig.right.unproject_local(fx, fy))
                .map(|local| rig.right.world_to_lens().transpose() * local)
                .ok_or_else(|| {
                    StitchError::InvalidInput(format!(
                        "seam point ({qx}, {qy}) leaves the right lens's field of view"
                    ))
                })?;
            let (mut px, py) = ray_to_equirect(&p, w, h);
            px += ((qx - px) / w as f64).round() * w as f64;
            pairs.push((Point2::new(px, py), Point2::new(qx, qy)));
        }
    }
    ControlPointSet::new(pairs, alpha)
}

/// Dense lattice of control points over both bands. Lattice points the
/// perturbed right lens cannot see are skipped.
pub fn gen_control_lattice(
    rig: &SynthRig,
    pert: &Perturbation,
    rows: &[f64],
    col_offsets_deg: &[f64],
    alpha: f64,
) -> Result<ControlPointSet> {
    let mut pairs = Vec::with_capacity(2 * rows.len() * col_offsets_deg.len());
    for &r in rows {
        for &c in col_offsets_deg {
            if let Ok(set) = gen_control_points_at(rig, pert, &[r], &[c], alpha) {
                pairs.extend_from_slice(set.pairs());
            }
        }
    }
    ControlPointSet::new(pairs, alpha)
}

/// A complete synthetic capture.
#[derive(Clone, Debug)]
pub struct SynthScene {
    pub pano: EquirectImage,
    pub left: FisheyeImage,
    pub right: FisheyeImage,
    pub rig: SynthRig,
    pub control_points: ControlPointSet,
}

impl SynthScene {
    pub fn calibration(&self) -> CalibrationFile {
        self.rig.calibration(Some(&self.control_points))
    }
}

/// Rows of the dense calibration lattice, as fractions of height.
pub const LATTICE_ROWS: usize = 64;
pub const LATTICE_ROW_SPAN: (f64, f64) = (0.01, 0.99);
/// Lattice columns, degrees from each seam (positive away from the right lens).
pub const LATTICE_COLS_DEG: [f64; 5] = [-6.0, -3.0, 0.0, 3.0, 6.0];
/// Weight exponent written into synthesized calibrations. The lattice is
/// dense enough that more local weights track the field near the poles.
pub const LATTICE_ALPHA: f64 = 2.0;

/// The calibration-target lattice used by [`synthesize`].
pub fn dense_control_points(rig: &SynthRig, pert: &Perturbation) -> Result<ControlPointSet> {
    let (lo, hi) = LATTICE_ROW_SPAN;
    let rows: Vec<f64> = (0..LATTICE_ROWS)
        .map(|k| lo + (hi - lo) * k as f64 / (LATTICE_ROWS - 1) as f64)
        .collect();
    gen_control_lattice(rig, pert, &rows, &LATTICE_COLS_DEG, LATTICE_ALPHA)
}

/// Renders a scene, photographs it with a nominal left lens and a perturbed
/// right lens, and calibrates the pair with [`dense_control_points`].
pub fn synthesize(
    kind: SceneKind,
    pano_width: usize,
    channels: usize,
    pert: &Perturbation,
    seed: u64,
) -> Result<SynthScene> {
    let rig = SynthRig::new(pano_width);
    // Both seams must stay inside the right lens's calibrated field.
    gen_control_points(&rig, pert, 2, DEFAULT_ALPHA)?;
    let pano = render_panorama(kind, pano_width, channels, seed)?;
    let left = project_to_fisheye(&pano, &rig.left, &Perturbation::default(), rig.fisheye_size)?;
    let right = project_to_fisheye(&pano, &rig.right, pert, rig.fisheye_size)?;
    let control_points = dense_control_points(&rig, pert)?;
    Ok(SynthScene {
        pano,
        left,
        right,
        rig,
        control_points,
    })
}

/// Adds noise in `[-amplitude, amplitude]` to every pixel at or beyond
/// `min_theta_deg` off the optical axis, clamped to `[0, 1]`. The noise is
/// bilinear over a lattice of `cell_px` pixels, so a sub-pixel resample
/// leaves its energy nearly intact.
pub fn corrupt_rim(
    img: &mut FisheyeImage,
    calib: &LensCalibration,
    min_theta_deg: f64,
    amplitude: f32,
    cell_px: f64,
    seed: u64,
) {
    let rho_min = calib.radius * min_theta_deg.to_radians() / calib.half_fov();
    let (w, c) = (img.width, img.channels);
    img.pixels
        .par_chunks_mut(w * c)
        .enumerate()
        .for_each(|(y, row)| {
            let gy = y as f64 / cell_px;
            let (iy, ty) = (gy.floor() as u64, gy.fract());
            for x in 0..w {
                let rho = (x as f64 - calib.center_x).hypot(y as f64 - calib.center_y);
                if rho < rho_min {
                    continue;
                }
                let gx = x as f64 / cell_px;
                let (ix, tx) = (gx.floor() as u64, gx.fract());
                for k in 0..c {
                    let v = |a, b| lattice(seed, k as u64, a, b);
                    let top = v(ix, iy) * (1.0 - tx) + v(ix + 1, iy) * tx;
                    let bottom = v(ix, iy + 1) * (1.0 - tx) + v(ix + 1, iy + 1) * tx;
                    let n = (2.0 * (top * (1.0 - ty) + bottom * ty) - 1.0) as f32 * amplitude;
                    let p = &mut row[x * c + k];
                    *p = (*p + n).clamp(0.0, 1.0);
                }
            }
        });
}

/// Rim corruption applied by [`static_sequence`]: noise from this angle
/// outward, covering both overlap bands.
pub const CORRUPT_MIN_THETA_DEG: f64 = 80.0;
pub const CORRUPT_AMPLITUDE: f32 = 0.5;
pub const CORRUPT_CELL_PX: f64 = 4.0;

/// Side-by-side dual-fisheye frames of a static scene. Frames listed in
/// `corrupt` get noise over both lens rims.
pub fn static_sequence(
    left: &FisheyeImage,
    right: &FisheyeImage,
    rig: &SynthRig,
    frames: usize,
    corrupt: &[usize],
) -> Result<Vec<Raster>> {
    (0..frames)
        .map(|i| {
            if corrupt.contains(&i) {
                let (mut l, mut r) = (left.clone(), right.clone());
                corrupt_rim(&mut l, &rig.left, CORRUPT_MIN_THETA_DEG, CORRUPT_AMPLITUDE, CORRUPT_CELL_PX, 2 * i as u64);
                corrupt_rim(&mut r, &rig.right, CORRUPT_MIN_THETA_DEG, CORRUPT_AMPLITUDE, CORRUPT_CELL_PX, 2 * i as u64 + 1);
                join_dual_fisheye(&l, &r)
            } else {
                join_dual_fisheye(left, right)
            }
        })
        .collect()
}

/// Copies `img` with the content of one seam's neighborhood translated by
/// `(dx, dy)`, mimicking a near object that the lens alignment cannot fix.
/// Columns within `half_width_deg` of the seam move.
pub fn inject_band_shift(
    img: &EquirectImage,
    layout: &SeamLayout,
    seam: Seam,
    shift: (f64, f64),
    half_width_deg: f64,
) -> EquirectImage {
    let seam_x = layout.seam_column(seam);
    let half = half_width_deg / 360.0 * layout.width as f64;
    img.gather(|x, y| {
        if (x as f64 - seam_x).abs() <= half {
            Some((x as f64 - shift.0, y as f64 - shift.1))
        } else {
            Some((x as f64, y as f64))
        }
    })
}

/// Discontinuity between two contributions over the overlap bands.
#[derive(Clone, Debug, PartialEq)]
pub struct SeamReport {
    pub rms_gap: f64,
    pub max_gap: f64,
    /// RMS per image row; NaN for rows without a jointly valid band pixel.
    pub row_profile: Vec<f64>,
}

/// RMS and max of `|left - right|` over band pixels where both are valid.
pub fn seam_error(left: &EquirectImage, right: &EquirectImage, layout: &SeamLayout) -> Result<SeamReport> {
    if !left.same_shape(right) || left.width() != layout.width {
        return Err(StitchError::DimensionMismatch("seam_error inputs differ in shape".into()));
    }
    let cols: Vec<usize> = (0..layout.width).filter(|&x| layout.band_of(x).is_some()).collect();
    let c = left.channels();
    let rows: Vec<(f64, f64, usize)> = (0..layout.height)
        .into_par_iter()
        .map(|y| {
            let (mut ss, mut mx, mut n) = (0.0, 0.0f64, 0usize);
            for &x in &cols {
                if left.is_valid(x, y) && right.is_valid(x, y) {
                    let (a, b) = (left.raster.pixel(x, y), right.raster.pixel(x, y));
                    for k in 0..c {
                        let d = (a[k] - b[k]).abs() as f64;
                        ss += d * d;
                        mx = mx.max(d);
                        n += 1;
                    }
                }
            }
            (ss, mx, n)
        })
        .collect();
    let total: usize = rows.iter().map(|r| r.2).sum();
    if total == 0 {
        return Err(StitchError::ReportUndefined("no jointly valid overlap pixels".into()));
    }
    let ss: f64 = rows.iter().map(|r| r.0).sum();
    Ok(SeamReport {
        rms_gap: (ss / total as f64).sqrt(),
        max_gap: rows.iter().map(|r| r.1).fold(0.0, f64::max),
        row_profile: rows
            .iter()
            .map(|&(s, _, n)| if n > 0 { (s / n as f64).sqrt() } else { f64::NAN })
            .collect(),
    })
}

/// Mean absolute difference between two frames over the overlap bands.
pub fn overlap_frame_difference(a: &EquirectImage, b: &EquirectImage, layout: &SeamLayout) -> f64 {
    let cols: Vec<usize> = (0..layout.width).filter(|&x| layout.band_of(x).is_some()).collect();
    let (mut sum, mut n) = (0.0, 0usize);
    for y in 0..layout.height {
        for &x in &cols {
            if a.is_valid(x, y) && b.is_valid(x, y) {
                for (p, q) in a.raster.pixel(x, y).iter().zip(b.raster.pixel(x, y)) {
                    sum += (p - q).abs() as f64;
                    n += 1;
                }
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Average of [`overlap_frame_difference`] over consecutive frames.
pub fn jitter_metric(frames: &[EquirectImage], layout: &SeamLayout) -> f64 {
    if frames.len() < 2 {
        return 0.0;
    }
    frames
        .windows(2)
        .map(|w| overlap_frame_difference(&w[0], &w[1], layout))
        .sum::<f64>()
        / (frames.len() - 1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lens_model::unwarp_fisheye;

    #[test]
    fn checker_cells_alternate() {
        let p = render_panorama(SceneKind::Checker, 256, 1, 0).unwrap();
        let cell = 256 / CHECKER_COLS;
        let v = |x: usize, y: usize| p.raster.pixel(x, y)[0];
        assert_eq!((v(0, 0) - v(cell, 0)).abs(), 1.0);
        assert_eq!((v(0, 0) - v(0, cell)).abs(), 1.0);
        assert_eq!(v(0, 0), v(cell, cell));
    }

    #[test]
    fn gradient_is_monotone() {
        let p = render_panorama(SceneKind::Gradient, 512, 1, 0).unwrap();
        for y in [0, 100, 255] {
            for x in 1..512 {
                assert!(p.raster.pixel(x, y)[0] > p.raster.pixel(x - 1, y)[0]);
            }
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        for kind in [SceneKind::Noise, SceneKind::Composite] {
            let a = render_panorama(kind, 256, 3, 42).unwrap();
            let b = render_panorama(kind, 256, 3, 42).unwrap();
            assert_eq!(a, b);
            assert_ne!(a, render_panorama(kind, 256, 3, 43).unwrap());
        }
    }

    #[test]
    fn zero_perturbation_round_trip() {
        let w = 1024;
        let scene = synthesize(SceneKind::Noise, w, 1, &Perturbation::default(), 1).unwrap();
        for (fish, calib) in [(&scene.left, &scene.rig.left), (&scene.right, &scene.rig.right)] {
            let eq = unwarp_fisheye(fish, calib, w).unwrap();
            let (mut ss, mut n) = (0.0, 0.0);
            // Mid latitudes: near the poles both resampling steps squeeze.
            for y in w / 8..3 * w / 8 {
                for x in 0..w {
                    if eq.is_valid(x, y) {
                        let d = (eq.raster.pixel(x, y)[0] - scene.pano.raster.pixel(x, y)[0]) as f64;
                        ss += d * d;
                        n += 1.0;
                    }
                }
            }
            assert!((ss / n).sqrt() < 0.03, "rms {}", (ss / n).sqrt());
        }
    }

    #[test]
    fn zero_perturbation_control_points_coincide() {
        let rig = SynthRig::new(2048);
        let cps = gen_control_points(&rig, &Perturbation::default(), 6, 1.0).unwrap();
        assert_eq!(cps.len(), 12);
        for (p, q) in cps.pairs() {
            assert!((*p - *q).norm() < 1e-9);
        }
    }

    #[test]
    fn yaw_shifts_control_points_uniformly() {
        let w = 2048;
        let rig = SynthRig::new(w);
        let cps = gen_control_points(&rig, &Perturbation::rotation(1.0, 0.0, 0.0), 8, 1.0).unwrap();
        let shift = 1.0 / 360.0 * w as f64;
        for (p, q) in cps.pairs() {
            let d = *q - *p;
            assert!((d.x - shift).abs() < 0.1 && d.y.abs() < 0.1, "{d:?}");
        }
    }

    #[test]
    fn yaw_shifts_unwarped_content() {
        // Oracle: a lens yawed by +1° records the scene 1° to the left.
        let w = 1440;
        let rig = SynthRig::new(w);
        let pano = render_panorama(SceneKind::Gradient, w, 1, 0).unwrap();
        let fish = project_to_fisheye(&pano, &rig.right, &Perturbation::rotation(1.0, 0.0, 0.0), rig.fisheye_size).unwrap();
        let eq = unwarp_fisheye(&fish, &rig.right, w).unwrap();
        let y = w / 4;
        let slope = 1.0 / (w - 1) as f64;
        for x in [600, 720, 800] {
            let moved = eq.raster.pixel(x, y)[0] as f64;
            let expected = (x as f64 + 4.0) * slope;
            assert!((moved - expected).abs() < 0.2 * slope, "x {x}: {moved} vs {expected}");
        }
    }

    #[test]
    fn decenter_displaces_seams_nonuniformly() {
        let w = 2048;
        let rig = SynthRig::new(w);
        let pert = Perturbation {
            decenter: [3.0, 0.0],
            ..Default::default()
        };
        let cps = gen_control_points(&rig, &pert, 9, 1.0).unwrap();
        let right_seam: Vec<Point2> = cps.pairs()[9..].iter().map(|(p, q)| *q - *p).collect();
        // At the equator the horizontal decenter is radial: about 3 px of
        // longitude at matched resolution (sign: content moves with the center).
        let equator = right_seam[4];
        assert!((equator.x.abs() - 3.0).abs() < 0.5, "{equator:?}");
        assert!((right_seam[0] - equator).norm() > 0.3);
    }

    #[test]
    fn perturbation_parses() {
        let p: Perturbation = "rot=1,-0.5,2,gain=0.01,decenter=3,-4".parse().unwrap();
        assert_eq!(p.rotation_deg, [1.0, -0.5, 2.0]);
        assert_eq!(p.radial_gain_delta, 0.01);
        assert_eq!(p.decenter, [3.0, -4.0]);
        assert_eq!("decenter=1,1".parse::<Perturbation>().unwrap().rotation_deg, [0.0; 3]);
        assert_eq!("".parse::<Perturbation>().unwrap(), Perturbation::default());
        for bad in ["rot=1,2", "gain=x", "1,2", "spin=3", "rot=6,0,0"] {
            assert!(bad.parse::<Perturbation>().is_err(), "{bad}");
        }
    }

    #[test]
    fn perturbation_caps() {
        assert!(Perturbation::rotation(5.1, 0.0, 0.0).validate().is_err());
        assert!(Perturbation { radial_gain_delta: 0.06, ..Default::default() }.validate().is_err());
        assert!(Perturbation { decenter: [8.0, 8.0], ..Default::default() }.validate().is_err());
        assert!(Perturbation::rotation(5.0, -5.0, 5.0).validate().is_ok());
    }

    #[test]
    fn seam_error_on_shifted_gradient() {
        let w = 1024;
        let layout = SeamLayout::new(w, 15.0).unwrap();
        let pano = render_panorama(SceneKind::Gradient, w, 1, 0).unwrap();
        assert_eq!(seam_error(&pano, &pano, &layout).unwrap().rms_gap, 0.0);
        let shifted = pano.gather(|x, y| Some((x as f64 - 2.0, y as f64)));
        let report = seam_error(&pano, &shifted, &layout).unwrap();
        let expected = 2.0 / (w - 1) as f64;
        assert!((report.rms_gap - expected).abs() < 1e-5, "{} vs {expected}", report.rms_gap);
        let empty = EquirectImage::empty(w, 1).unwrap();
        assert!(matches!(seam_error(&empty, &pano, &layout), Err(StitchError::ReportUndefined(_))));
    }
}
