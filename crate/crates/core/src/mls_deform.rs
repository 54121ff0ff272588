//! Moving-least-squares image deformation (affine, similarity and rigid
//! variants) and precomputed backward deformation grids.
//!
//! For an evaluation point `v` every control point gets the weight
//! `w_i = 1 / |p_i - v|^(2α)`. With the weighted centroids `p*`, `q*` and the
//! centered points `p̂_i = p_i - p*`, `q̂_i = q_i - q*`, each variant fits the
//! best transform of its class and applies it to `v - p*`.

use std::fmt;
use std::io::{Read, Write};
use std::ops::{Add, Mul, Neg, Sub};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, StitchError};
use crate::raster::EquirectImage;

/// Snap radius around a control point (pixels).
pub const EPS_CONTROL_POINT: f64 = 1e-6;
/// Smallest admissible rigid direction vector, relative to its
/// triangle-inequality bound.
pub const EPS_RIGID: f64 = 1e-12;
pub const DEFAULT_ALPHA: f64 = 1.0;
pub const DEFAULT_GRID_SPACING: u32 = 8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }

    #[inline]
    pub fn dot(self, o: Point2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// z-component of the 3D cross product.
    #[inline]
    pub fn cross(self, o: Point2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    #[inline]
    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    /// Rotation by +90°: `(x, y) -> (-y, x)`.
    #[inline]
    pub fn perp(self) -> Point2 {
        Point2::new(-self.y, self.x)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Point2 {
    type Output = Point2;
    #[inline]
    fn add(self, o: Point2) -> Point2 {
        Point2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Point2 {
    type Output = Point2;
    #[inline]
    fn sub(self, o: Point2) -> Point2 {
        Point2::new(self.x - o.x, self.y - o.y)
    }
}

impl Neg for Point2 {
    type Output = Point2;
    #[inline]
    fn neg(self) -> Point2 {
        Point2::new(-self.x, -self.y)
    }
}

impl Mul<Point2> for f64 {
    type Output = Point2;
    #[inline]
    fn mul(self, p: Point2) -> Point2 {
        Point2::new(self * p.x, self * p.y)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MlsVariant {
    Affine,
    Similarity,
    #[default]
    Rigid,
}

impl FromStr for MlsVariant {
    type Err = StitchError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "affine" => Ok(MlsVariant::Affine),
            "similarity" => Ok(MlsVariant::Similarity),
            "rigid" => Ok(MlsVariant::Rigid),
            other => Err(StitchError::InvalidInput(format!("unknown MLS variant {other:?}"))),
        }
    }
}

impl fmt::Display for MlsVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MlsVariant::Affine => "affine",
            MlsVariant::Similarity => "similarity",
            MlsVariant::Rigid => "rigid",
        })
    }
}

/// Paired control points: the deformation carries each `p` onto its `q`.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlPointSet {
    pairs: Vec<(Point2, Point2)>,
    alpha: f64,
}

impl ControlPointSet {
    pub fn new(pairs: Vec<(Point2, Point2)>, alpha: f64) -> Result<Self> {
        let bad = |m: String| Err(StitchError::CalibrationInvalid(m));
        if pairs.is_empty() {
            return bad("control point set is empty".into());
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return bad(format!("alpha must be positive, got {alpha}"));
        }
        if pairs.iter().any(|(p, q)| !p.is_finite() || !q.is_finite()) {
            return bad("non-finite control point".into());
        }
        for (i, (a, _)) in pairs.iter().enumerate() {
            for (b, _) in &pairs[i + 1..] {
                if (*a - *b).norm() < EPS_CONTROL_POINT {
                    return bad(format!("duplicate control point at ({}, {})", a.x, a.y));
                }
            }
        }
        Ok(ControlPointSet { pairs, alpha })
    }

    /// Builds a set from `[px, py, qx, qy]` rows as stored in calibration files.
    pub fn from_rows(rows: &[[f64; 4]], alpha: f64) -> Result<Self> {
        Self::new(
            rows.iter()
                .map(|r| (Point2::new(r[0], r[1]), Point2::new(r[2], r[3])))
                .collect(),
            alpha,
        )
    }

    pub fn to_rows(&self) -> Vec<[f64; 4]> {
        self.pairs.iter().map(|(p, q)| [p.x, p.y, q.x, q.y]).collect()
    }

    pub fn pairs(&self) -> &[(Point2, Point2)] {
        &self.pairs
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Exchanges the roles of `p` and `q`, approximating the inverse map.
    pub fn swapped(&self) -> Result<Self> {
        Self::new(self.pairs.iter().map(|&(p, q)| (q, p)).collect(), self.alpha)
    }

    /// Weighted centroids `(p*, q*)` and normalized weights at `v`.
    pub fn centroids(&self, v: Point2) -> (Point2, Point2, Vec<f64>) {
        let mut w: Vec<f64> = self
            .pairs
            .iter()
            .map(|(p, _)| {
                let d2 = (*p - v).norm_sq();
                if self.alpha == 1.0 {
                    1.0 / d2
                } else if self.alpha.fract() == 0.0 && self.alpha <= 8.0 {
                    1.0 / d2.powi(self.alpha as i32)
                } else {
                    1.0 / d2.powf(self.alpha)
                }
            })
            .collect();
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= total);
        let mut ps = Point2::default();
        let mut qs = Point2::default();
        for (wi, (p, q)) in w.iter().zip(&self.pairs) {
            ps = ps + *wi * *p;
            qs = qs + *wi * *q;
        }
        (ps, qs, w)
    }
}

/// Evaluates the MLS deformation `f(v)`.
pub fn mls_point(v: Point2, cps: &ControlPointSet, variant: MlsVariant) -> Result<Point2> {
    if !v.is_finite() {
        return Err(StitchError::InvalidInput("evaluation point is not finite".into()));
    }
    if let Some(&(_, q)) = cps
        .pairs
        .iter()
        .find(|(p, _)| (*p - v).norm() < EPS_CONTROL_POINT)
    {
        return Ok(q);
    }
    let (p_star, q_star, w) = cps.centroids(v);
    let b = v - p_star;
    let hats = || {
        cps.pairs
            .iter()
            .zip(&w)
            .map(move |(&(p, q), &wi)| (wi, p - p_star, q - q_star))
    };

    match variant {
        MlsVariant::Affine => {
            // Normal equations: (Σ w p̂ᵀp̂) M = Σ w p̂ᵀq̂ with row vectors.
            let (mut a11, mut a12, mut a22) = (0.0, 0.0, 0.0);
            let (mut b11, mut b12, mut b21, mut b22) = (0.0, 0.0, 0.0, 0.0);
            for (wi, ph, qh) in hats() {
                a11 += wi * ph.x * ph.x;
                a12 += wi * ph.x * ph.y;
                a22 += wi * ph.y * ph.y;
                b11 += wi * ph.x * qh.x;
                b12 += wi * ph.x * qh.y;
                b21 += wi * ph.y * qh.x;
                b22 += wi * ph.y * qh.y;
            }
            let det = a11 * a22 - a12 * a12;
            let scale = 0.5 * (a11 + a22);
            if !(det > 1e-12 * scale * scale) || scale == 0.0 {
                return Err(StitchError::DeformationDegenerate(
                    "affine normal matrix is singular (collinear control points)".into(),
                ));
            }
            // Row vector b times inverse normal matrix, then times the cross term.
            let t = Point2::new((b.x * a22 - b.y * a12) / det, (b.y * a11 - b.x * a12) / det);
            Ok(Point2::new(t.x * b11 + t.y * b21, t.x * b12 + t.y * b22) + q_star)
        }
        MlsVariant::Similarity | MlsVariant::Rigid => {
            // Σ q̂_i A_i with A_i = w_i [p̂_i; -p̂_i⊥][b; -b⊥]ᵀ, expanded in dot/cross form.
            let mut mu_s = 0.0;
            let mut u = Point2::default();
            // Upper bound of |u| by the triangle inequality, over |b|.
            let mut u_bound = 0.0;
            for (wi, ph, qh) in hats() {
                mu_s += wi * ph.norm_sq();
                u_bound += wi * ph.norm() * qh.norm();
                let dot = ph.dot(b);
                let cross = ph.cross(b);
                u = u + wi * Point2::new(qh.x * dot - qh.y * cross, qh.x * cross + qh.y * dot);
            }
            if mu_s == 0.0 {
                // Every p_i coincides with p*: the fit reduces to a translation.
                return Ok(b + q_star);
            }
            if variant == MlsVariant::Similarity {
                return Ok((1.0 / mu_s) * u + q_star);
            }
            let len_b = b.norm();
            if len_b == 0.0 {
                return Ok(q_star);
            }
            let len_u = u.norm();
            if !(len_u > 0.0) || len_u < EPS_RIGID * len_b * u_bound {
                return Err(StitchError::DeformationDegenerate(format!(
                    "rigid direction vector vanished at ({}, {})",
                    v.x, v.y
                )));
            }
            Ok((len_b / len_u) * u + q_star)
        }
    }
}

/// Precomputed backward map: for every output pixel, where to read the source.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationGrid {
    pub width: u32,
    pub height: u32,
    pub spacing: u32,
    nodes: Vec<[f32; 2]>,
}

impl DeformationGrid {
    pub fn node_dims(width: u32, height: u32, spacing: u32) -> (usize, usize) {
        (
            width.div_ceil(spacing) as usize + 1,
            height.div_ceil(spacing) as usize + 1,
        )
    }

    /// Grid whose nodes map each position onto itself.
    pub fn identity(width: u32, height: u32, spacing: u32) -> Result<Self> {
        Self::from_fn(width, height, spacing, |p| Ok(p))
    }

    fn from_fn<F>(width: u32, height: u32, spacing: u32, f: F) -> Result<Self>
    where
        F: Fn(Point2) -> Result<Point2> + Sync,
    {
        if spacing < 1 || width == 0 || height == 0 {
            return Err(StitchError::InvalidInput(format!(
                "grid {width}x{height} with spacing {spacing}"
            )));
        }
        let (cols, rows) = Self::node_dims(width, height, spacing);
        let s = spacing as f64;
        let rows_out: Result<Vec<Vec<[f32; 2]>>> = (0..rows)
            .into_par_iter()
            .map(|j| {
                (0..cols)
                    .map(|i| {
                        let src = f(Point2::new(i as f64 * s, j as f64 * s))?;
                        Ok([src.x as f32, src.y as f32])
                    })
                    .collect()
            })
            .collect();
        let nodes: Vec<[f32; 2]> = rows_out?.into_iter().flatten().collect();
        if nodes.iter().any(|n| !(n[0].is_finite() && n[1].is_finite())) {
            return Err(StitchError::DeformationDegenerate("non-finite grid node".into()));
        }
        Ok(DeformationGrid {
            width,
            height,
            spacing,
            nodes,
        })
    }

    pub fn nodes(&self) -> &[[f32; 2]] {
        &self.nodes
    }

    pub fn node(&self, i: usize, j: usize) -> Point2 {
        let (cols, _) = Self::node_dims(self.width, self.height, self.spacing);
        let n = self.nodes[j * cols + i];
        Point2::new(n[0] as f64, n[1] as f64)
    }

    /// Bilinear interpolation of the node field at an output position.
    #[inline]
    pub fn lookup(&self, x: f64, y: f64) -> Point2 {
        let dims = Self::node_dims(self.width, self.height, self.spacing);
        self.interpolate(dims.0, self.cell_x(dims, x), self.cell_y(dims, y))
    }

    #[inline]
    fn cell_x(&self, (cols, _): (usize, usize), x: f64) -> (usize, f64) {
        let gx = (x / self.spacing as f64).clamp(0.0, (cols - 1) as f64);
        let i0 = (gx.floor() as usize).min(cols - 2);
        (i0, gx - i0 as f64)
    }

    #[inline]
    fn cell_y(&self, (_, rows): (usize, usize), y: f64) -> (usize, f64) {
        let gy = (y / self.spacing as f64).clamp(0.0, (rows - 1) as f64);
        let j0 = (gy.floor() as usize).min(rows - 2);
        (j0, gy - j0 as f64)
    }

    #[inline]
    fn interpolate(&self, cols: usize, (i0, fx): (usize, f64), (j0, fy): (usize, f64)) -> Point2 {
        let n = |i: usize, j: usize| {
            let v = self.nodes[j * cols + i];
            (v[0] as f64, v[1] as f64)
        };
        let (a, b, c, d) = (n(i0, j0), n(i0 + 1, j0), n(i0, j0 + 1), n(i0 + 1, j0 + 1));
        let w00 = (1.0 - fx) * (1.0 - fy);
        let w10 = fx * (1.0 - fy);
        let w01 = (1.0 - fx) * fy;
        let w11 = fx * fy;
        Point2::new(
            w00 * a.0 + w10 * b.0 + w01 * c.0 + w11 * d.0,
            w00 * a.1 + w10 * b.1 + w01 * c.1 + w11 * d.1,
        )
    }

    /// Little-endian binary form: `width, height, spacing` as `u32`, then
    /// `x, y` as `f32` per node, row-major.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let mut buf = Vec::with_capacity(12 + self.nodes.len() * 8);
        for v in [self.width, self.height, self.spacing] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for n in &self.nodes {
            buf.extend_from_slice(&n[0].to_le_bytes());
            buf.extend_from_slice(&n[1].to_le_bytes());
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        if bytes.len() < 12 {
            return Err(StitchError::InvalidInput("grid file shorter than its header".into()));
        }
        let u = |k: usize| u32::from_le_bytes(bytes[4 * k..4 * k + 4].try_into().unwrap());
        let (width, height, spacing) = (u(0), u(1), u(2));
        if spacing == 0 || width == 0 || height == 0 {
            return Err(StitchError::InvalidInput("grid header has a zero field".into()));
        }
        let (cols, rows) = Self::node_dims(width, height, spacing);
        let body = &bytes[12..];
        if body.len() != cols * rows * 8 {
            return Err(StitchError::InvalidInput(format!(
                "grid body has {} bytes, expected {}",
                body.len(),
                cols * rows * 8
            )));
        }
        let nodes: Vec<[f32; 2]> = body
            .chunks_exact(8)
            .map(|c| {
                [
                    f32::from_le_bytes(c[0..4].try_into().unwrap()),
                    f32::from_le_bytes(c[4..8].try_into().unwrap()),
                ]
            })
            .collect();
        if nodes.iter().any(|n| !(n[0].is_finite() && n[1].is_finite())) {
            return Err(StitchError::InvalidInput("non-finite grid node".into()));
        }
        Ok(DeformationGrid {
            width,
            height,
            spacing,
            nodes,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Samples the MLS map of the swapped control points at every grid node, so
/// that each node stores the source position for a gather warp.
pub fn build_backward_grid(
    cps: &ControlPointSet,
    width: u32,
    height: u32,
    spacing: u32,
    variant: MlsVariant,
) -> Result<DeformationGrid> {
    let inverse = cps.swapped()?;
    DeformationGrid::from_fn(width, height, spacing, |u| mls_point(u, &inverse, variant))
}

/// Warps an equirectangular image through a backward grid.
pub fn apply_grid(img: &EquirectImage, grid: &DeformationGrid) -> Result<EquirectImage> {
    if grid.width as usize != img.width() || grid.height as usize != img.height() {
        return Err(StitchError::DimensionMismatch(format!(
            "grid {}x{} vs image {}x{}",
            grid.width,
            grid.height,
            img.width(),
            img.height()
        )));
    }
    let dims = DeformationGrid::node_dims(grid.width, grid.height, grid.spacing);
    let cols = dims.0;
    let cells_x: Vec<(usize, f64)> = (0..img.width()).map(|x| grid.cell_x(dims, x as f64)).collect();
    Ok(img.gather_rows(|y, coords| {
        // Blend the two node rows once, then interpolate along x.
        let (j0, fy) = grid.cell_y(dims, y as f64);
        let (top, bottom) = (&grid.nodes[j0 * cols..], &grid.nodes[(j0 + 1) * cols..]);
        let row: Vec<(f64, f64)> = (0..cols)
            .map(|i| {
                let (a, b) = (top[i], bottom[i]);
                (
                    (1.0 - fy) * a[0] as f64 + fy * b[0] as f64,
                    (1.0 - fy) * a[1] as f64 + fy * b[1] as f64,
                )
            })
            .collect();
        for (slot, &(i0, fx)) in coords.iter_mut().zip(&cells_x) {
            let (a, b) = (row[i0], row[i0 + 1]);
            *slot = ((1.0 - fx) * a.0 + fx * b.0, (1.0 - fx) * a.1 + fx * b.1);
        }
    }))
}
