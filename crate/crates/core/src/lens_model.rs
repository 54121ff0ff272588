//! Equidistant fisheye lens model, light falloff compensation and the
//! fisheye → equirectangular unwarp.
//!
//! World frame: `+z` looks at longitude 0, `+y` is up, `+x` is longitude +90°.
//! The right lens looks along `+z` and lands in the middle of the panorama;
//! the left lens looks along `-z` and is split across the left and right edges.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, StitchError};
use crate::raster::{EquirectImage, FisheyeImage, Raster};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LensRole {
    Left,
    Right,
}

fn default_fov() -> f64 {
    195.0
}

fn default_falloff() -> Vec<f64> {
    vec![1.0]
}

/// Intrinsics of one fisheye lens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LensCalibration {
    /// Optical center in fisheye pixels.
    pub center_x: f64,
    pub center_y: f64,
    /// Image-circle radius in pixels, reached at `fov_deg / 2` off axis.
    pub radius: f64,
    #[serde(default = "default_fov")]
    pub fov_deg: f64,
    /// Falloff polynomial `P(r) = c0 + c1 r + c2 r² + ...` over normalized radius.
    #[serde(default = "default_falloff")]
    pub falloff_coeffs: Vec<f64>,
    pub role: LensRole,
}

impl LensCalibration {
    pub fn new(center_x: f64, center_y: f64, radius: f64, role: LensRole) -> Self {
        LensCalibration {
            center_x,
            center_y,
            radius,
            fov_deg: default_fov(),
            falloff_coeffs: default_falloff(),
            role,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(StitchError::CalibrationInvalid(msg));
        if !(self.center_x.is_finite() && self.center_y.is_finite()) {
            return bad("optical center is not finite".into());
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return bad(format!("radius must be positive, got {}", self.radius));
        }
        if !(self.fov_deg > 180.0 && self.fov_deg <= 220.0) {
            return bad(format!("fov_deg must be in (180, 220], got {}", self.fov_deg));
        }
        self.check_falloff()
    }

    /// Samples the falloff polynomial densely on `[0, 1]`.
    pub fn check_falloff(&self) -> Result<()> {
        if self.falloff_coeffs.is_empty() {
            return Err(StitchError::CalibrationInvalid(
                "falloff polynomial has no coefficients".into(),
            ));
        }
        const STEPS: usize = 4096;
        for i in 0..=STEPS {
            let r = i as f64 / STEPS as f64;
            let p = self.falloff(r);
            if !(p > 0.0 && p.is_finite()) {
                return Err(StitchError::CalibrationInvalid(format!(
                    "falloff polynomial is {p} at r = {r}"
                )));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn half_fov(&self) -> f64 {
        self.fov_deg.to_radians() / 2.0
    }

    /// Evaluates the falloff polynomial (Horner).
    #[inline]
    pub fn falloff(&self, r: f64) -> f64 {
        self.falloff_coeffs
            .iter()
            .rev()
            .fold(0.0, |acc, &c| acc * r + c)
    }

    /// Rotation taking world directions into this lens's nominal frame.
    pub fn world_to_lens(&self) -> Matrix3<f64> {
        match self.role {
            LensRole::Right => Matrix3::identity(),
            LensRole::Left => Matrix3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0),
        }
    }

    /// Projects a direction given in lens coordinates. `None` beyond the field of view.
    #[inline]
    pub fn project_local(&self, d: &Vector3<f64>) -> Option<(f64, f64)> {
        let theta = d.z.clamp(-1.0, 1.0).acos();
        if theta > self.half_fov() {
            return None;
        }
        let rho = self.radius * theta / self.half_fov();
        let s = d.x.hypot(d.y);
        if s < 1e-15 {
            return Some((self.center_x, self.center_y));
        }
        Some((
            self.center_x + rho * d.x / s,
            self.center_y - rho * d.y / s,
        ))
    }

    /// Inverse of [`project_local`](Self::project_local). `None` outside the image circle.
    pub fn unproject_local(&self, x: f64, y: f64) -> Option<Vector3<f64>> {
        let dx = x - self.center_x;
        let dy = self.center_y - y;
        let rho = dx.hypot(dy);
        if rho > self.radius {
            return None;
        }
        let theta = rho / self.radius * self.half_fov();
        if rho < 1e-15 {
            return Some(Vector3::z());
        }
        let st = theta.sin();
        Some(Vector3::new(st * dx / rho, st * dy / rho, theta.cos()))
    }
}

/// Unit direction for an equirectangular pixel coordinate.
#[inline]
pub fn equirect_to_ray(px: f64, py: f64, width: usize, height: usize) -> Vector3<f64> {
    let (lon, lat) = pixel_to_lonlat(px, py, width, height);
    lonlat_to_ray(lon, lat)
}

/// Longitude and latitude in radians for a pixel coordinate.
#[inline]
pub fn pixel_to_lonlat(px: f64, py: f64, width: usize, height: usize) -> (f64, f64) {
    (
        px / width as f64 * 2.0 * PI - PI,
        FRAC_PI_2 - py / height as f64 * PI,
    )
}

#[inline]
pub fn lonlat_to_ray(lon: f64, lat: f64) -> Vector3<f64> {
    let (sl, cl) = lon.sin_cos();
    let (sp, cp) = lat.sin_cos();
    Vector3::new(cp * sl, sp, cp * cl)
}

#[inline]
pub fn ray_to_lonlat(d: &Vector3<f64>) -> (f64, f64) {
    (d.x.atan2(d.z), d.y.clamp(-1.0, 1.0).asin())
}

/// Pixel coordinate of a direction; `px` is in `[0, width)`.
#[inline]
pub fn ray_to_equirect(d: &Vector3<f64>, width: usize, height: usize) -> (f64, f64) {
    let (lon, lat) = ray_to_lonlat(d);
    let mut px = (lon + PI) / (2.0 * PI) * width as f64;
    if px >= width as f64 {
        px -= width as f64;
    }
    (px, (FRAC_PI_2 - lat) / PI * height as f64)
}

/// Fisheye pixel seen along a world direction, or `None` outside the field of view.
pub fn ray_to_fisheye(dir: &Vector3<f64>, calib: &LensCalibration) -> Option<(f64, f64)> {
    calib.project_local(&(calib.world_to_lens() * dir))
}

/// Multiplies each pixel by `1 / P(r)` and clamps to `[0, 1]`.
pub fn compensate_falloff(img: &FisheyeImage, calib: &LensCalibration) -> Result<FisheyeImage> {
    calib.check_falloff()?;
    check_center(img, calib)?;
    if calib.falloff_coeffs.iter().skip(1).all(|&c| c == 0.0) && calib.falloff_coeffs[0] == 1.0 {
        return Ok(img.clone());
    }
    let c = img.channels;
    let w = img.width;
    let mut out = img.clone();
    out.pixels
        .par_chunks_mut(w * c)
        .enumerate()
        .for_each(|(y, row)| {
            let dy = y as f64 - calib.center_y;
            for x in 0..w {
                let r = ((x as f64 - calib.center_x).hypot(dy) / calib.radius).min(1.0);
                let gain = (1.0 / calib.falloff(r)) as f32;
                for v in &mut row[x * c..(x + 1) * c] {
                    *v = (*v * gain).clamp(0.0, 1.0);
                }
            }
        });
    Ok(out)
}

/// Least-squares fit of a falloff polynomial of the given degree to a
/// flat-field capture, normalized so that `P(0) = 1`.
pub fn fit_falloff(flat: &FisheyeImage, calib: &LensCalibration, degree: usize) -> Result<Vec<f64>> {
    check_center(flat, calib)?;
    let mut rows = Vec::new();
    let mut values = Vec::new();
    for y in 0..flat.height {
        for x in 0..flat.width {
            let r = (x as f64 - calib.center_x).hypot(y as f64 - calib.center_y) / calib.radius;
            if r <= 1.0 {
                rows.push(r);
                values.push(flat.luma(x, y) as f64);
            }
        }
    }
    if rows.len() <= degree {
        return Err(StitchError::InvalidInput(
            "not enough flat-field samples inside the image circle".into(),
        ));
    }
    let a = DMatrix::from_fn(rows.len(), degree + 1, |i, j| rows[i].powi(j as i32));
    let b = DVector::from_vec(values);
    let coeffs = a
        .svd(true, true)
        .solve(&b, 1e-12)
        .map_err(|e| StitchError::InvalidInput(e.to_string()))?;
    let c0 = coeffs[0];
    if !(c0 > 0.0) {
        return Err(StitchError::InvalidInput("flat field is dark at the center".into()));
    }
    Ok(coeffs.iter().map(|c| c / c0).collect())
}

fn check_center(img: &FisheyeImage, calib: &LensCalibration) -> Result<()> {
    let inside = calib.center_x >= 0.0
        && calib.center_y >= 0.0
        && calib.center_x < img.width as f64
        && calib.center_y < img.height as f64;
    if inside {
        Ok(())
    } else {
        Err(StitchError::DimensionMismatch(format!(
            "optical center ({}, {}) outside {}x{} fisheye image",
            calib.center_x, calib.center_y, img.width, img.height
        )))
    }
}

/// Precomputed unwarp lookup: the fisheye coordinate behind every panorama pixel.
#[derive(Clone, Debug)]
pub struct UnwarpMap {
    pub width: usize,
    pub height: usize,
    /// `[x, y]` per output pixel, NaN where the lens does not see the direction.
    coords: Vec<[f32; 2]>,
}

impl UnwarpMap {
    pub fn build(calib: &LensCalibration, out_width: usize) -> Result<Self> {
        crate::raster::check_equirect_dims(out_width, out_width / 2)?;
        calib.validate()?;
        let width = out_width;
        let height = out_width / 2;
        let rot = calib.world_to_lens();
        let mut coords = vec![[f32::NAN; 2]; width * height];
        coords
            .par_chunks_mut(width)
            .enumerate()
            .for_each(|(y, row)| {
                for (x, slot) in row.iter_mut().enumerate() {
                    let d = rot * equirect_to_ray(x as f64, y as f64, width, height);
                    if let Some((fx, fy)) = calib.project_local(&d) {
                        *slot = [fx as f32, fy as f32];
                    }
                }
            });
        Ok(UnwarpMap {
            width,
            height,
            coords,
        })
    }

    pub fn apply(&self, img: &FisheyeImage) -> EquirectImage {
        let (w, c) = (self.width, img.channels);
        let mut raster = Raster::new(w, self.height, c);
        let mut valid = vec![false; w * self.height];
        raster
            .pixels
            .par_chunks_mut(w * c)
            .zip(valid.par_chunks_mut(w))
            .zip(self.coords.par_chunks(w))
            .for_each(|((row, mask), coords)| {
                for x in 0..w {
                    let [fx, fy] = coords[x];
                    if fx.is_nan() {
                        continue;
                    }
                    let out = &mut row[x * c..(x + 1) * c];
                    mask[x] = img.sample(fx as f64, fy as f64, out);
                    if !mask[x] {
                        out.fill(0.0);
                    }
                }
            });
        EquirectImage { raster, valid }
    }
}

/// Resamples one fisheye image onto the equirectangular layout.
pub fn unwarp_fisheye(
    img: &FisheyeImage,
    calib: &LensCalibration,
    out_width: usize,
) -> Result<EquirectImage> {
    check_center(img, calib)?;
    Ok(UnwarpMap::build(calib, out_width)?.apply(img))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn right_lens(radius: f64) -> LensCalibration {
        LensCalibration::new(radius + 1.0, radius + 1.0, radius, LensRole::Right)
    }

    #[test]
    fn equirect_layout_reference_pixels() {
        let (w, h) = (360, 180);
        let (lon, lat) = ray_to_lonlat(&equirect_to_ray(180.0, 90.0, w, h));
        assert!(lon.abs() < 1e-12 && lat.abs() < 1e-12);
        let (lon, lat) = ray_to_lonlat(&equirect_to_ray(0.0, 90.0, w, h));
        assert!((lon.abs() - PI).abs() < 1e-12 && lat.abs() < 1e-12);
    }

    #[test]
    fn equirect_ray_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (w, h) = (4096, 2048);
        for _ in 0..10_000 {
            let px = rng.random_range(0.0..w as f64);
            let py = rng.random_range(0.5..h as f64 - 0.5);
            let d = equirect_to_ray(px, py, w, h);
            assert!((d.norm() - 1.0).abs() < 1e-12);
            let (lon, lat) = ray_to_lonlat(&d);
            let (lon0, lat0) = pixel_to_lonlat(px, py, w, h);
            let dlon = (lon - lon0 + PI).rem_euclid(2.0 * PI) - PI;
            assert!(dlon.abs() < 1e-9, "lon {lon} vs {lon0}");
            assert!((lat - lat0).abs() < 1e-9);
        }
    }

    #[test]
    fn equidistant_projection_reference_points() {
        let c = right_lens(500.0);
        let (x, y) = ray_to_fisheye(&Vector3::z(), &c).unwrap();
        assert_eq!((x, y), (c.center_x, c.center_y));

        let half = c.half_fov();
        let at = |theta: f64| {
            let d = Vector3::new(theta.sin(), 0.0, theta.cos());
            let (x, y) = ray_to_fisheye(&d, &c).unwrap();
            (x - c.center_x).hypot(y - c.center_y)
        };
        assert!((at(half) - 500.0).abs() < 1e-9);
        assert!((at(half / 2.0) - 250.0).abs() < 1e-9);
        assert!(ray_to_fisheye(&Vector3::new((half + 1e-3).sin(), 0.0, (half + 1e-3).cos()), &c).is_none());
    }

    #[test]
    fn projection_is_monotone_in_theta() {
        let c = right_lens(300.0);
        let mut last = -1.0;
        for i in 0..=1000 {
            let theta = c.half_fov() * i as f64 / 1000.0;
            let d = Vector3::new(theta.sin() * 0.6, theta.sin() * 0.8, theta.cos());
            let (x, y) = c.project_local(&d).unwrap();
            let rho = (x - c.center_x).hypot(y - c.center_y);
            assert!(rho > last);
            last = rho;
        }
    }

    #[test]
    fn unproject_inverts_project() {
        let c = right_lens(400.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let x = rng.random_range(10.0..790.0);
            let y = rng.random_range(10.0..790.0);
            if let Some(d) = c.unproject_local(x, y) {
                let (bx, by) = c.project_local(&d).unwrap();
                assert!((bx - x).abs() < 1e-9 && (by - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn left_lens_looks_backwards() {
        let c = LensCalibration::new(100.0, 100.0, 90.0, LensRole::Left);
        let (x, y) = ray_to_fisheye(&-Vector3::z(), &c).unwrap();
        assert_eq!((x, y), (100.0, 100.0));
        assert!(ray_to_fisheye(&Vector3::z(), &c).is_none());
        // Longitude +90° sits on the left lens's image-left side, the right lens's image-right side.
        let (xl, _) = ray_to_fisheye(&Vector3::x(), &c).unwrap();
        let (xr, _) = ray_to_fisheye(&Vector3::x(), &right_lens(90.0)).unwrap();
        assert!(xl < 100.0 && xr > 91.0);
    }

    #[test]
    fn validation_rejects_bad_values() {
        let mut c = right_lens(100.0);
        assert!(c.validate().is_ok());
        c.fov_deg = 180.0;
        assert!(matches!(c.validate(), Err(StitchError::CalibrationInvalid(_))));
        c.fov_deg = 195.0;
        c.radius = 0.0;
        assert!(c.validate().is_err());
        c.radius = 100.0;
        c.falloff_coeffs = vec![1.0, 0.0, -1.0];
        assert!(c.validate().is_err());
        c.falloff_coeffs = vec![];
        assert!(c.validate().is_err());
    }

    #[test]
    fn unit_falloff_is_bitwise_identity() {
        let c = right_lens(20.0);
        let mut img = Raster::new(42, 42, 3);
        for (i, v) in img.pixels.iter_mut().enumerate() {
            *v = ((i * 7919) % 1000) as f32 / 999.0;
        }
        assert_eq!(compensate_falloff(&img, &c).unwrap(), img);
    }

    #[test]
    fn falloff_gain_at_rim() {
        let mut c = LensCalibration::new(0.0, 0.0, 10.0, LensRole::Right);
        c.falloff_coeffs = vec![1.0, 0.0, -0.5];
        let img = Raster::filled(11, 1, 1, 0.5);
        let out = compensate_falloff(&img, &c).unwrap();
        assert!((out.pixels[10] - 1.0).abs() < 1e-6);
        assert!((out.pixels[0] - 0.5).abs() < 1e-7);
    }

    #[test]
    fn nonpositive_falloff_is_rejected() {
        let mut c = right_lens(5.0);
        c.falloff_coeffs = vec![0.5, -1.0];
        let img = Raster::filled(12, 12, 1, 0.5);
        assert!(matches!(
            compensate_falloff(&img, &c),
            Err(StitchError::CalibrationInvalid(_))
        ));
    }

    #[test]
    fn fitted_vignette_profile_flattens_field() {
        // Oracle: apply a known vignette to a flat field, then fit and invert it.
        let c = right_lens(100.0);
        let size = 203;
        let level = 0.7f32;
        let vignette = |r: f64| 1.0 - 0.35 * r * r + 0.05 * r.powi(4);
        let mut flat = Raster::new(size, size, 1);
        for y in 0..size {
            for x in 0..size {
                let r = ((x as f64 - c.center_x).hypot(y as f64 - c.center_y) / c.radius).min(1.0);
                flat.pixel_mut(x, y)[0] = level * vignette(r) as f32;
            }
        }
        let mut fitted = c.clone();
        fitted.falloff_coeffs = fit_falloff(&flat, &c, 4).unwrap();
        let out = compensate_falloff(&flat, &fitted).unwrap();
        let mut sum = 0.0;
        let mut n = 0.0;
        for y in 0..size {
            for x in 0..size {
                if (x as f64 - c.center_x).hypot(y as f64 - c.center_y) <= c.radius {
                    let e = (out.pixel(x, y)[0] - level) as f64 / level as f64;
                    sum += e * e;
                    n += 1.0;
                }
            }
        }
        assert!((sum / n).sqrt() < 0.01);
    }

    #[test]
    fn constant_fisheye_unwarps_to_constant() {
        let c = right_lens(100.0);
        let img = Raster::filled(203, 203, 1, 0.25);
        let eq = unwarp_fisheye(&img, &c, 360).unwrap();
        let mut n = 0;
        for (i, &ok) in eq.valid.iter().enumerate() {
            if ok {
                assert!((eq.raster.pixels[i] - 0.25).abs() < 1e-6);
                n += 1;
            } else {
                assert_eq!(eq.raster.pixels[i], 0.0);
            }
        }
        assert!(n > 0);
    }

    #[test]
    fn equator_coverage_matches_field_of_view() {
        let w = 3600;
        let size = 1200;
        let r = 580.0;
        let img = Raster::filled(size, size, 1, 1.0);
        let right = LensCalibration::new(599.5, 599.5, r, LensRole::Right);
        let left = LensCalibration { role: LensRole::Left, ..right.clone() };
        let er = unwarp_fisheye(&img, &right, w).unwrap();
        let el = unwarp_fisheye(&img, &left, w).unwrap();
        let y = w / 4;
        let count = |e: &EquirectImage| (0..w).filter(|&x| e.is_valid(x, y)).count() as f64;
        let expected = 195.0 / 360.0 * w as f64;
        assert!((count(&er) - expected).abs() <= 2.0);
        assert!((count(&el) - expected).abs() <= 2.0);
        let both = (0..w).filter(|&x| er.is_valid(x, y) && el.is_valid(x, y)).count() as f64;
        assert!((both - 2.0 * 15.0 / 360.0 * w as f64).abs() <= 4.0);
        assert!((0..w).all(|x| er.is_valid(x, y) || el.is_valid(x, y)));
        // Right lens centered at longitude 0, left lens split across the edges.
        assert!(er.is_valid(w / 2, y) && !el.is_valid(w / 2, y));
        assert!(el.is_valid(0, y) && el.is_valid(w - 1, y) && !er.is_valid(0, y));
    }
}
