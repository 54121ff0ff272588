//! Floating-point image buffers, bilinear sampling and 8-bit file I/O.
//!
//! Intensities live in `[0, 1]` as `f32`, interleaved by channel. Pixel `i`
//! sits at continuous coordinate `i` (no half-pixel offset), which matches the
//! equirectangular layout where column `W/2` is longitude zero.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};
use rayon::prelude::*;

use crate::error::{Result, StitchError};

/// Plain interleaved intensity buffer. Also used directly as the fisheye image.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<f32>,
}

/// A frame straight off one fisheye lens.
pub type FisheyeImage = Raster;

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Raster {
            width,
            height,
            channels,
            pixels: vec![0.0; width * height * channels],
        }
    }

    pub fn from_pixels(
        width: usize,
        height: usize,
        channels: usize,
        pixels: Vec<f32>,
    ) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(StitchError::InvalidInput(format!(
                "{channels} channels (expected 1 or 3)"
            )));
        }
        if pixels.len() != width * height * channels {
            return Err(StitchError::DimensionMismatch(format!(
                "buffer of {} values for {width}x{height}x{channels}",
                pixels.len()
            )));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(StitchError::InvalidInput("non-finite pixel value".into()));
        }
        Ok(Raster {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        Raster {
            width,
            height,
            channels,
            pixels: vec![value; width * height * channels],
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        (y * self.width + x) * self.channels
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = self.index(x, y);
        &self.pixels[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let i = self.index(x, y);
        let c = self.channels;
        &mut self.pixels[i..i + c]
    }

    /// Channel-averaged intensity at an integer pixel.
    #[inline]
    pub fn luma(&self, x: usize, y: usize) -> f32 {
        let p = self.pixel(x, y);
        p.iter().sum::<f32>() / self.channels as f32
    }

    /// Bilinear sample; returns `false` when the footprint leaves the image.
    #[inline]
    pub fn sample(&self, x: f64, y: f64, out: &mut [f32]) -> bool {
        if !(x >= 0.0 && y >= 0.0) {
            return false;
        }
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let fx = (x - x0 as f64) as f32;
        let fy = (y - y0 as f64) as f32;
        let x1 = if fx > 0.0 { x0 + 1 } else { x0 };
        let y1 = if fy > 0.0 { y0 + 1 } else { y0 };
        if x1 >= self.width || y1 >= self.height {
            return false;
        }
        bilinear_blend(
            self.pixel(x0, y0),
            self.pixel(x1, y0),
            self.pixel(x0, y1),
            self.pixel(x1, y1),
            fx,
            fy,
            out,
        );
        true
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?;
        Ok(Self::from_dynamic(img))
    }

    pub fn from_dynamic(img: DynamicImage) -> Self {
        let gray = matches!(
            img,
            DynamicImage::ImageLuma8(_)
                | DynamicImage::ImageLumaA8(_)
                | DynamicImage::ImageLuma16(_)
                | DynamicImage::ImageLumaA16(_)
        );
        if gray {
            let g = img.to_luma8();
            let (w, h) = g.dimensions();
            Raster {
                width: w as usize,
                height: h as usize,
                channels: 1,
                pixels: g.into_raw().into_iter().map(from_u8).collect(),
            }
        } else {
            let rgb = img.to_rgb8();
            let (w, h) = rgb.dimensions();
            Raster {
                width: w as usize,
                height: h as usize,
                channels: 3,
                pixels: rgb.into_raw().into_iter().map(from_u8).collect(),
            }
        }
    }

    /// Writes an 8-bit PNG or binary PPM/PGM, chosen by file extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        let format = match path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref()
        {
            Some("png") => ImageFormat::Png,
            Some("ppm") | Some("pgm") | Some("pnm") => ImageFormat::Pnm,
            _ => return Err(StitchError::UnsupportedFormat(path.to_path_buf())),
        };
        let bytes: Vec<u8> = self.pixels.iter().map(|&v| to_u8(v)).collect();
        let (w, h) = (self.width as u32, self.height as u32);
        let dynamic = if self.channels == 1 {
            DynamicImage::ImageLuma8(
                GrayImage::from_raw(w, h, bytes).expect("buffer length checked by construction"),
            )
        } else {
            DynamicImage::ImageRgb8(
                RgbImage::from_raw(w, h, bytes).expect("buffer length checked by construction"),
            )
        };
        dynamic.save_with_format(path, format)?;
        Ok(())
    }

    /// Quantizes to 8 bits and back, exactly as a save/load round trip would.
    pub fn quantized(&self) -> Self {
        Raster {
            pixels: self.pixels.iter().map(|&v| from_u8(to_u8(v))).collect(),
            ..self.clone()
        }
    }
}

#[inline]
pub(crate) fn bilinear_blend(
    p00: &[f32],
    p10: &[f32],
    p01: &[f32],
    p11: &[f32],
    fx: f32,
    fy: f32,
    out: &mut [f32],
) {
    let w00 = (1.0 - fx) * (1.0 - fy);
    let w10 = fx * (1.0 - fy);
    let w01 = (1.0 - fx) * fy;
    let w11 = fx * fy;
    for c in 0..out.len() {
        out[c] = w00 * p00[c] + w10 * p10[c] + w01 * p01[c] + w11 * p11[c];
    }
}

/// Round-half-up conversion to 8 bits.
#[inline]
pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

#[inline]
pub fn from_u8(v: u8) -> f32 {
    v as f32 / 255.0
}

/// Equirectangular panorama (2:1) with a per-pixel coverage mask.
#[derive(Clone, Debug, PartialEq)]
pub struct EquirectImage {
    pub raster: Raster,
    pub valid: Vec<bool>,
}

impl EquirectImage {
    /// An all-invalid (black) panorama.
    pub fn empty(width: usize, channels: usize) -> Result<Self> {
        check_equirect_dims(width, width / 2)?;
        let height = width / 2;
        Ok(EquirectImage {
            raster: Raster::new(width, height, channels),
            valid: vec![false; width * height],
        })
    }

    /// Wraps a fully covered raster.
    pub fn from_raster(raster: Raster) -> Result<Self> {
        check_equirect_dims(raster.width, raster.height)?;
        let n = raster.width * raster.height;
        Ok(EquirectImage {
            raster,
            valid: vec![true; n],
        })
    }

    pub fn from_parts(raster: Raster, valid: Vec<bool>) -> Result<Self> {
        check_equirect_dims(raster.width, raster.height)?;
        if valid.len() != raster.width * raster.height {
            return Err(StitchError::DimensionMismatch("mask length".into()));
        }
        let mut img = EquirectImage { raster, valid };
        img.zero_invalid();
        Ok(img)
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.raster.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.raster.height
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.raster.channels
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.raster.width + x]
    }

    pub fn zero_invalid(&mut self) {
        let c = self.raster.channels;
        for (px, &ok) in self.raster.pixels.chunks_mut(c).zip(&self.valid) {
            if !ok {
                px.fill(0.0);
            }
        }
    }

    pub fn same_shape(&self, other: &EquirectImage) -> bool {
        self.width() == other.width()
            && self.height() == other.height()
            && self.channels() == other.channels()
    }

    /// Bilinear sample on the sphere: longitude wraps, and rows past a pole
    /// continue on the opposite meridian. Invalid when any contributing
    /// neighbor is masked out or the footprint crosses more than one pole.
    #[inline]
    pub fn sample(&self, x: f64, y: f64, out: &mut [f32]) -> bool {
        let w = self.raster.width as i64;
        let h = self.raster.height as i64;
        if !(y > -(h as f64) + 1.0 && y < (2 * h) as f64 - 1.0) || !x.is_finite() {
            return false;
        }
        let yf = y.floor();
        let fy = (y - yf) as f32;
        let xf = x.floor();
        let fx = (x - xf) as f32;
        let (xi, yi) = (xf as i64, yf as i64);
        let c = self.raster.channels;
        let px = |i: usize| &self.raster.pixels[i * c..(i + 1) * c];
        if xi >= 0 && yi >= 0 && xi + 1 < w && yi + 1 < h {
            let i00 = (yi * w + xi) as usize;
            let (i10, i01) = (i00 + 1, i00 + w as usize);
            let i11 = i01 + 1;
            let v = &self.valid;
            let ok = v[i00]
                && (fx == 0.0 || v[i10])
                && (fy == 0.0 || (v[i01] && (fx == 0.0 || v[i11])));
            if ok {
                bilinear_blend(px(i00), px(i10), px(i01), px(i11), fx, fy, out);
            }
            return ok;
        }
        // Pixel i sits at coordinate i; the north pole is row 0 and the south
        // pole the missing row h.
        let fold = |col: i64, row: i64| -> usize {
            let (col, row) = if row < 0 {
                (col + w / 2, -row)
            } else if row > h {
                (col + w / 2, 2 * h - row)
            } else {
                (col, row.min(h - 1))
            };
            (row * w + col.rem_euclid(w)) as usize
        };
        // Zero-weight neighbors are not fetched, so they cannot invalidate.
        let dx = i64::from(fx > 0.0);
        let dy = i64::from(fy > 0.0);
        let i00 = fold(xi, yi);
        let i10 = fold(xi + dx, yi);
        let i01 = fold(xi, yi + dy);
        let i11 = fold(xi + dx, yi + dy);
        if !(self.valid[i00] && self.valid[i10] && self.valid[i01] && self.valid[i11]) {
            return false;
        }
        let c = self.raster.channels;
        let px = |i: usize| &self.raster.pixels[i * c..(i + 1) * c];
        bilinear_blend(px(i00), px(i10), px(i01), px(i11), fx, fy, out);
        true
    }

    /// Builds a new panorama by gathering from `self` at source coordinates
    /// produced per output pixel. `None` marks the output pixel invalid.
    pub fn gather<F>(&self, source: F) -> EquirectImage
    where
        F: Fn(usize, usize) -> Option<(f64, f64)> + Sync,
    {
        let w = self.width();
        let h = self.height();
        let c = self.channels();
        let mut raster = Raster::new(w, h, c);
        let mut valid = vec![false; w * h];
        raster
            .pixels
            .par_chunks_mut(w * c)
            .zip(valid.par_chunks_mut(w))
            .enumerate()
            .for_each(|(y, (row, mask))| {
                for x in 0..w {
                    if let Some((sx, sy)) = source(x, y) {
                        mask[x] = self.sample(sx, sy, &mut row[x * c..(x + 1) * c]);
                    }
                }
            });
        EquirectImage { raster, valid }
    }

    /// Row-wise [`gather`](Self::gather): `fill(y, coords)` writes the source
    /// coordinate of every pixel in row `y`. Non-finite coordinates mark the
    /// output pixel invalid.
    pub fn gather_rows<F>(&self, fill: F) -> EquirectImage
    where
        F: Fn(usize, &mut [(f64, f64)]) + Sync,
    {
        let w = self.width();
        let h = self.height();
        let c = self.channels();
        let mut raster = Raster::new(w, h, c);
        let mut valid = vec![false; w * h];
        raster
            .pixels
            .par_chunks_mut(w * c)
            .zip(valid.par_chunks_mut(w))
            .enumerate()
            .for_each_init(
                || vec![(0.0, 0.0); w],
                |coords, (y, (row, mask))| {
                    fill(y, coords);
                    for (x, &(sx, sy)) in coords.iter().enumerate() {
                        mask[x] = self.sample(sx, sy, &mut row[x * c..(x + 1) * c]);
                    }
                },
            );
        EquirectImage { raster, valid }
    }
}

pub(crate) fn check_equirect_dims(width: usize, height: usize) -> Result<()> {
    if width == 0 || width % 2 != 0 || height != width / 2 {
        return Err(StitchError::DimensionMismatch(format!(
            "equirectangular image must be 2:1 with even width, got {width}x{height}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_midpoint_and_edges() {
        let r = Raster::from_pixels(2, 2, 1, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let mut out = [0.0f32];
        assert!(r.sample(0.5, 0.5, &mut out));
        assert!((out[0] - 0.5).abs() < 1e-7);
        assert!(r.sample(1.0, 1.0, &mut out));
        assert_eq!(out[0], 1.0);
        assert!(!r.sample(1.5, 0.0, &mut out));
        assert!(!r.sample(-0.1, 0.0, &mut out));
    }

    #[test]
    fn equirect_sample_wraps_longitude() {
        let mut r = Raster::new(4, 2, 1);
        r.pixel_mut(3, 0)[0] = 1.0;
        let img = EquirectImage::from_raster(r).unwrap();
        let mut out = [0.0f32];
        assert!(img.sample(3.5, 0.0, &mut out));
        assert!((out[0] - 0.5).abs() < 1e-7);
        assert!(img.sample(-1.0, 0.0, &mut out));
        assert_eq!(out[0], 1.0);
    }

    #[test]
    fn equirect_sample_crosses_poles() {
        let mut r = Raster::new(8, 4, 1);
        r.pixel_mut(5, 1)[0] = 1.0;
        r.pixel_mut(6, 2)[0] = 2.0;
        let img = EquirectImage::from_raster(r).unwrap();
        let mut out = [0.0f32];
        assert!(img.sample(1.0, -1.0, &mut out));
        assert_eq!(out[0], 1.0);
        assert!(img.sample(2.0, 6.0, &mut out));
        assert_eq!(out[0], 2.0);
        assert!(img.sample(1.0, -0.5, &mut out));
        assert_eq!(out[0], 0.5);
        assert!(!img.sample(0.0, -3.5, &mut out));
    }

    #[test]
    fn masked_neighbor_invalidates_sample() {
        let r = Raster::filled(4, 2, 1, 0.5);
        let mut valid = vec![true; 8];
        valid[1] = false;
        let img = EquirectImage::from_parts(r, valid).unwrap();
        let mut out = [0.0f32];
        assert!(!img.sample(0.5, 0.0, &mut out));
        assert!(img.sample(2.0, 0.5, &mut out));
    }

    #[test]
    fn rejects_bad_dims() {
        assert!(EquirectImage::empty(7, 1).is_err());
        assert!(EquirectImage::from_raster(Raster::new(8, 5, 1)).is_err());
        assert!(Raster::from_pixels(2, 2, 2, vec![0.0; 8]).is_err());
        assert!(Raster::from_pixels(2, 2, 1, vec![0.0; 3]).is_err());
    }

    #[test]
    fn u8_round_half_up() {
        assert_eq!(to_u8(0.0), 0);
        assert_eq!(to_u8(1.0), 255);
        assert_eq!(to_u8(0.5), 128);
        assert_eq!(to_u8(2.0), 255);
        assert_eq!(to_u8(from_u8(77)), 77);
    }

    #[test]
    fn png_and_ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = Raster::new(5, 3, 3);
        for (i, v) in r.pixels.iter_mut().enumerate() {
            *v = (i % 17) as f32 / 16.0;
        }
        for name in ["a.png", "a.ppm"] {
            let p = dir.path().join(name);
            r.save(&p).unwrap();
            let back = Raster::load(&p).unwrap();
            assert_eq!(back, r.quantized());
        }
        assert!(r.save(&dir.path().join("a.bmp")).is_err());
    }
}
