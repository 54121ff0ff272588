//! Scene-adaptive refinement: NCC template matching along both stitching
//! boundaries, least-squares affine estimation, and affine warping.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rayon::prelude::*;

use crate::error::{Result, StitchError};
use crate::mls_deform::Point2;
use crate::pipeline::{Seam, SeamLayout};
use crate::raster::EquirectImage;

/// Scores within this distance of the best are ties, resolved toward the
/// search-window center.
const TIE_EPS: f64 = 1e-9;
/// Windows whose intensity variance falls below this are treated as flat.
const MIN_VARIANCE: f64 = 1e-10;

/// Peak of a normalized cross-correlation search.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchResult {
    pub score: f64,
    pub dx: i32,
    pub dy: i32,
}

/// Single-channel patch with an optional validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub valid: Option<Vec<bool>>,
}

impl Patch {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), width * height);
        Patch {
            width,
            height,
            values,
            valid: None,
        }
    }

    /// Channel-averaged patch cut from a panorama, with longitude wrap-around.
    /// Rows outside the image are marked invalid.
    pub fn from_equirect(img: &EquirectImage, x0: i64, y0: i64, width: usize, height: usize) -> Self {
        let w = img.width() as i64;
        let h = img.height() as i64;
        let mut values = vec![0.0; width * height];
        let mut valid = vec![false; width * height];
        for j in 0..height {
            let y = y0 + j as i64;
            if y < 0 || y >= h {
                continue;
            }
            for i in 0..width {
                let x = (x0 + i as i64).rem_euclid(w) as usize;
                let k = j * width + i;
                valid[k] = img.is_valid(x, y as usize);
                values[k] = img.raster.luma(x, y as usize) as f64;
            }
        }
        Patch {
            width,
            height,
            values,
            valid: Some(valid),
        }
    }

    fn all_valid(&self) -> bool {
        self.valid.as_ref().is_none_or(|v| v.iter().all(|&b| b))
    }

    #[inline]
    fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid.as_ref().is_none_or(|v| v[y * self.width + x])
    }
}

/// Exhaustive integer-pixel NCC search. The returned displacement is the
/// offset of the best window's top-left corner inside `search`.
pub fn ncc_match(template: &Patch, search: &Patch) -> Result<MatchResult> {
    let (tw, th) = (template.width, template.height);
    if tw == 0 || th == 0 || tw > search.width || th > search.height {
        return Err(StitchError::InvalidInput(format!(
            "template {tw}x{th} does not fit search region {}x{}",
            search.width, search.height
        )));
    }
    if !template.all_valid() {
        return Err(StitchError::MatchUndefined("template has uncovered pixels".into()));
    }
    let n = (tw * th) as f64;
    let t_mean = template.values.iter().sum::<f64>() / n;
    let t: Vec<f64> = template.values.iter().map(|v| v - t_mean).collect();
    let t_ss: f64 = t.iter().map(|v| v * v).sum();
    if t_ss / n < MIN_VARIANCE {
        return Err(StitchError::MatchUndefined("template has zero variance".into()));
    }

    let nx = search.width - tw + 1;
    let ny = search.height - th + 1;
    let cx = (nx - 1) as f64 / 2.0;
    let cy = (ny - 1) as f64 / 2.0;
    let mut best: Option<(f64, f64, usize, usize)> = None;
    for oy in 0..ny {
        'window: for ox in 0..nx {
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            let mut cross = 0.0;
            for j in 0..th {
                let row = (oy + j) * search.width + ox;
                for i in 0..tw {
                    if !search.is_valid(ox + i, oy + j) {
                        continue 'window;
                    }
                    let s = search.values[row + i];
                    sum += s;
                    sum_sq += s * s;
                    cross += s * t[j * tw + i];
                }
            }
            let s_ss = sum_sq - sum * sum / n;
            if s_ss / n < MIN_VARIANCE {
                continue;
            }
            let score = (cross / (t_ss * s_ss).sqrt()).clamp(-1.0, 1.0);
            let dist = (ox as f64 - cx).powi(2) + (oy as f64 - cy).powi(2);
            let better = match best {
                None => true,
                Some((bs, bd, _, _)) => score > bs + TIE_EPS || (score >= bs - TIE_EPS && dist < bd),
            };
            if better {
                best = Some((score, dist, ox, oy));
            }
        }
    }
    best.map(|(score, _, ox, oy)| MatchResult {
        score,
        dx: ox as i32,
        dy: oy as i32,
    })
    .ok_or_else(|| StitchError::MatchUndefined("no textured window in the search region".into()))
}

/// Template placement and search range for boundary matching.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchConfig {
    /// Square template side in pixels.
    pub template_size: usize,
    /// Template centers as fractions of the panorama height.
    pub rows: Vec<f64>,
    pub search_dx: usize,
    pub search_dy: usize,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            template_size: 32,
            rows: vec![0.3, 0.45, 0.55, 0.7],
            search_dx: 16,
            search_dy: 12,
        }
    }
}

/// One template match on one stitching boundary.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundaryMatch {
    pub seam: Seam,
    /// Template center in the right image.
    pub center: Point2,
    /// `None` when the match is undefined (flat or uncovered template).
    pub result: Option<MatchResult>,
}

impl BoundaryMatch {
    /// Peak score, `-inf` for an undefined match.
    pub fn score(&self) -> f64 {
        self.result.map_or(f64::NEG_INFINITY, |r| r.score)
    }

    pub fn displacement(&self) -> Option<(i32, i32)> {
        self.result.map(|r| (r.dx, r.dy))
    }
}

/// All boundary matches of one frame, in fixed order: left seam top to
/// bottom, then right seam top to bottom.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryMatchSet {
    pub matches: Vec<BoundaryMatch>,
}

impl BoundaryMatchSet {
    /// `(right-image point, left-image point)` for every defined match.
    pub fn pairs(&self) -> Vec<(Point2, Point2)> {
        self.matches
            .iter()
            .filter_map(|m| {
                m.result
                    .map(|r| (m.center, m.center + Point2::new(r.dx as f64, r.dy as f64)))
            })
            .collect()
    }

    pub fn is_complete(&self) -> bool {
        self.matches.iter().all(|m| m.result.is_some())
    }

    pub fn on_seam(&self, seam: Seam) -> impl Iterator<Item = &BoundaryMatch> {
        self.matches.iter().filter(move |m| m.seam == seam)
    }
}

/// Matches templates from the right image into the left image along both
/// overlap bands.
pub fn collect_boundary_matches(
    left: &EquirectImage,
    right: &EquirectImage,
    layout: &SeamLayout,
    cfg: &MatchConfig,
) -> Result<BoundaryMatchSet> {
    if !left.same_shape(right) || left.width() != layout.width || left.height() != layout.height {
        return Err(StitchError::DimensionMismatch(
            "boundary matching needs two images with the layout's dimensions".into(),
        ));
    }
    if layout.band_width_px() < 1.0 {
        return Err(StitchError::InvalidInput("empty overlap band".into()));
    }
    let ts = cfg.template_size;
    let half = (ts as f64 - 1.0) / 2.0;
    let jobs: Vec<(Seam, f64)> = [Seam::Left, Seam::Right]
        .into_iter()
        .flat_map(|s| cfg.rows.iter().map(move |&r| (s, r)))
        .collect();
    let matches = jobs
        .par_iter()
        .map(|&(seam, frac)| {
            let cx = layout.seam_column(seam);
            let cy = frac * layout.height as f64;
            let tx = (cx - half).round() as i64;
            let ty = (cy - half).round() as i64;
            let center = Point2::new(tx as f64 + half, ty as f64 + half);
            let template = Patch::from_equirect(right, tx, ty, ts, ts);
            let search = Patch::from_equirect(
                left,
                tx - cfg.search_dx as i64,
                ty - cfg.search_dy as i64,
                ts + 2 * cfg.search_dx,
                ts + 2 * cfg.search_dy,
            );
            let result = match ncc_match(&template, &search) {
                Ok(m) => Some(MatchResult {
                    score: m.score,
                    dx: m.dx - cfg.search_dx as i32,
                    dy: m.dy - cfg.search_dy as i32,
                }),
                Err(StitchError::MatchUndefined(_)) => None,
                Err(e) => return Err(e),
            };
            Ok(BoundaryMatch {
                seam,
                center,
                result,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BoundaryMatchSet { matches })
}

/// 2D affine map stored as a 3×3 matrix with last row `(0, 0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineTransform {
    m: Matrix3<f64>,
}

impl AffineTransform {
    pub fn identity() -> Self {
        AffineTransform {
            m: Matrix3::identity(),
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self::from_rows([[1.0, 0.0, tx], [0.0, 1.0, ty]])
    }

    /// From the two free rows `[a, b, c]`, `[d, e, f]`.
    pub fn from_rows(rows: [[f64; 3]; 2]) -> Self {
        AffineTransform {
            m: Matrix3::new(
                rows[0][0], rows[0][1], rows[0][2], rows[1][0], rows[1][1], rows[1][2], 0.0, 0.0, 1.0,
            ),
        }
    }

    pub fn rows(&self) -> [[f64; 3]; 2] {
        [
            [self.m[(0, 0)], self.m[(0, 1)], self.m[(0, 2)]],
            [self.m[(1, 0)], self.m[(1, 1)], self.m[(1, 2)]],
        ]
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn det(&self) -> f64 {
        self.m[(0, 0)] * self.m[(1, 1)] - self.m[(0, 1)] * self.m[(1, 0)]
    }

    pub fn is_invertible(&self) -> bool {
        self.det().abs() > 1e-9 && self.m.iter().all(|v| v.is_finite())
    }

    pub fn inverse(&self) -> Result<Self> {
        if !self.is_invertible() {
            return Err(StitchError::NonInvertible(self.det()));
        }
        let [[a, b, c], [d, e, f]] = self.rows();
        let det = self.det();
        let (ia, ib, id, ie) = (e / det, -b / det, -d / det, a / det);
        Ok(Self::from_rows([
            [ia, ib, -(ia * c + ib * f)],
            [id, ie, -(id * c + ie * f)],
        ]))
    }

    #[inline]
    pub fn apply(&self, p: Point2) -> Point2 {
        let v = self.m * Vector3::new(p.x, p.y, 1.0);
        Point2::new(v.x, v.y)
    }

    pub fn compose(&self, then: &AffineTransform) -> AffineTransform {
        AffineTransform { m: then.m * self.m }
    }
}

/// Least-squares affine with its residual RMS over the input pairs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineFit {
    pub transform: AffineTransform,
    pub residual_rms: f64,
}

/// Fits `target ≈ T · source` in the least-squares sense.
pub fn estimate_affine(pairs: &[(Point2, Point2)]) -> Result<AffineFit> {
    if pairs.len() < 3 {
        return Err(StitchError::EstimationDegenerate(format!(
            "{} correspondences, need at least 3",
            pairs.len()
        )));
    }
    if pairs.iter().any(|(s, t)| !s.is_finite() || !t.is_finite()) {
        return Err(StitchError::EstimationDegenerate("non-finite correspondence".into()));
    }
    // Center and scale the sources for conditioning.
    let n = pairs.len() as f64;
    let centroid = (1.0 / n) * pairs.iter().fold(Point2::default(), |a, (s, _)| a + *s);
    let scale = (pairs.iter().map(|(s, _)| (*s - centroid).norm_sq()).sum::<f64>() / n).sqrt();
    if scale == 0.0 {
        return Err(StitchError::EstimationDegenerate("all source points coincide".into()));
    }
    let design = DMatrix::from_fn(pairs.len(), 3, |i, j| {
        let s = (1.0 / scale) * (pairs[i].0 - centroid);
        [s.x, s.y, 1.0][j]
    });
    let svd = design.clone().svd(true, true);
    let sv = &svd.singular_values;
    let (smax, smin) = (sv.max(), sv.min());
    if !(smin > 1e-9 * smax) {
        return Err(StitchError::EstimationDegenerate(
            "source points are collinear".into(),
        ));
    }
    let solve = |b: DVector<f64>| {
        svd.solve(&b, 0.0)
            .map_err(|e| StitchError::EstimationDegenerate(e.to_string()))
    };
    let rx = solve(DVector::from_iterator(pairs.len(), pairs.iter().map(|(_, t)| t.x)))?;
    let ry = solve(DVector::from_iterator(pairs.len(), pairs.iter().map(|(_, t)| t.y)))?;
    let denorm = |r: &DVector<f64>| {
        let (a, b) = (r[0] / scale, r[1] / scale);
        [a, b, r[2] - a * centroid.x - b * centroid.y]
    };
    let transform = AffineTransform::from_rows([denorm(&rx), denorm(&ry)]);
    let ss: f64 = pairs
        .iter()
        .map(|(s, t)| (transform.apply(*s) - *t).norm_sq())
        .sum();
    Ok(AffineFit {
        transform,
        residual_rms: (ss / n).sqrt(),
    })
}

/// Backward warp: output pixel `u` reads the input at `T⁻¹ u`.
pub fn warp_affine(img: &EquirectImage, transform: &AffineTransform) -> Result<EquirectImage> {
    let inv = transform.inverse()?;
    Ok(img.gather(|x, y| {
        let s = inv.apply(Point2::new(x as f64, y as f64));
        Some((s.x, s.y))
    }))
}
