//! Jitter control for video: gates the per-frame refinement affine by match
//! quality and falls back to the previous frame's matrix on a transient miss.

use std::fmt;

use crate::pipeline::Seam;
use crate::refine_align::{AffineTransform, BoundaryMatchSet};

/// Match-quality thresholds for one stitching boundary.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateThresholds {
    /// Minimum peak NCC (exclusive).
    pub ncc_thresh: f64,
    /// Allowed vertical displacement, inclusive, in pixels.
    pub dy_margin: f64,
    /// Allowed relative change of the horizontal displacement.
    pub dx_drift: f64,
    /// Lower bound on the drift reference so the rule stays defined at zero.
    pub dx_floor: f64,
}

impl Default for GateThresholds {
    fn default() -> Self {
        GateThresholds {
            ncc_thresh: 0.85,
            dy_margin: 10.0,
            dx_drift: 0.10,
            dx_floor: 1.0,
        }
    }
}

/// Aggregated match quality of one boundary.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundaryScore {
    pub score: f64,
    pub dx: f64,
    pub dy: f64,
}

impl BoundaryScore {
    /// Minimum score, mean `dx`, and the `dy` of largest magnitude (sign kept)
    /// over the seam's matches. Undefined matches force the score to `-inf`.
    pub fn aggregate(set: &BoundaryMatchSet, seam: Seam) -> Self {
        let mut score = f64::INFINITY;
        let mut dx_sum = 0.0;
        let mut n = 0usize;
        let mut dy = 0.0f64;
        for m in set.on_seam(seam) {
            score = score.min(m.score());
            if let Some((mx, my)) = m.displacement() {
                dx_sum += mx as f64;
                n += 1;
                if (my as f64).abs() > dy.abs() {
                    dy = my as f64;
                }
            }
        }
        if score == f64::INFINITY {
            score = f64::NEG_INFINITY;
        }
        BoundaryScore {
            score,
            dx: if n > 0 { dx_sum / n as f64 } else { 0.0 },
            dy,
        }
    }
}

/// The three per-boundary acceptance rules.
pub fn is_good(b: &BoundaryScore, prev_dx: Option<f64>, t: &GateThresholds) -> bool {
    if !(b.score > t.ncc_thresh) || !(b.dy.abs() <= t.dy_margin) {
        return false;
    }
    match prev_dx {
        None => true,
        Some(prev) => (b.dx - prev).abs() <= t.dx_drift * prev.abs().max(t.dx_floor),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DecisionReason {
    FreshEstimate,
    ReusedPrevious,
    Disabled,
}

impl fmt::Display for DecisionReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecisionReason::FreshEstimate => "FreshEstimate",
            DecisionReason::ReusedPrevious => "ReusedPrevious",
            DecisionReason::Disabled => "Disabled",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameDecision {
    pub affine: Option<AffineTransform>,
    pub reason: DecisionReason,
}

impl FrameDecision {
    pub fn warp_enabled(&self) -> bool {
        self.affine.is_some()
    }

    fn disabled() -> Self {
        FrameDecision {
            affine: None,
            reason: DecisionReason::Disabled,
        }
    }
}

/// What the gate remembers between frames. Indexed `[left seam, right seam]`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TemporalState {
    pub prev_affine: Option<AffineTransform>,
    pub prev_scores_good: bool,
    pub prev_dx: Option<[f64; 2]>,
}

/// One step of the jitter-control state machine.
///
/// Both boundaries good: warp with `fresh` and remember it. Otherwise reuse
/// the stored matrix if the previous frame was good, else leave the frame
/// unwarped. Only fresh estimates mark a frame good or refresh `prev_dx`.
pub fn decide_frame(
    left: &BoundaryScore,
    right: &BoundaryScore,
    fresh: Option<AffineTransform>,
    state: &TemporalState,
    t: &GateThresholds,
) -> (FrameDecision, TemporalState) {
    let good_left = is_good(left, state.prev_dx.map(|d| d[0]), t);
    let good_right = is_good(right, state.prev_dx.map(|d| d[1]), t);
    if good_left && good_right {
        if let Some(a) = fresh {
            return (
                FrameDecision {
                    affine: Some(a),
                    reason: DecisionReason::FreshEstimate,
                },
                TemporalState {
                    prev_affine: Some(a),
                    prev_scores_good: true,
                    prev_dx: Some([left.dx, right.dx]),
                },
            );
        }
    }
    let next = TemporalState {
        prev_scores_good: false,
        ..*state
    };
    match state.prev_affine {
        Some(prev) if state.prev_scores_good => (
            FrameDecision {
                affine: Some(prev),
                reason: DecisionReason::ReusedPrevious,
            },
            next,
        ),
        _ => (FrameDecision::disabled(), next),
    }
}

/// Gate bypass used for comparison runs: warp with whatever was estimated.
pub fn decide_frame_ungated(fresh: Option<AffineTransform>) -> FrameDecision {
    match fresh {
        Some(a) => FrameDecision {
            affine: Some(a),
            reason: DecisionReason::FreshEstimate,
        },
        None => FrameDecision::disabled(),
    }
}
