//! Whole-pipeline behavior on oracle scenes.

use dfstitch::mls_deform::DeformationGrid;
use dfstitch::pipeline::{build_grid, stitch_sequence, StitchConfig, Stitcher};
use dfstitch::raster::{EquirectImage, Raster};
use dfstitch::synthetic_oracle::{
    project_to_fisheye, seam_error, static_sequence, synthesize, Perturbation, SceneKind, SynthRig,
};
use dfstitch::temporal::{DecisionReason, TemporalState};

fn stitcher_for(calib: dfstitch::calibration::CalibrationFile, identity: bool, refine: bool) -> Stitcher {
    let mut cfg = StitchConfig::for_calibration(&calib);
    cfg.refine = refine;
    let grid = if identity {
        let w = calib.pano_width as u32;
        DeformationGrid::identity(w, w / 2, cfg.grid_spacing).unwrap()
    } else {
        build_grid(&calib, &cfg).unwrap()
    };
    Stitcher::new(calib, grid, cfg).unwrap()
}

fn rms(a: &EquirectImage, b: &EquirectImage, rows: std::ops::Range<usize>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for y in rows {
        for x in 0..a.width() {
            for (p, q) in a.raster.pixel(x, y).iter().zip(b.raster.pixel(x, y)) {
                sum += ((p - q) as f64).powi(2);
                n += 1;
            }
        }
    }
    (sum / n as f64).sqrt()
}

#[test]
fn unperturbed_rig_reproduces_the_scene() {
    let scene = synthesize(SceneKind::Composite, 1024, 1, &Perturbation::default(), 3).unwrap();
    let s = stitcher_for(scene.calibration(), true, true);
    let out = s.stitch_frame(&scene.left, &scene.right, &TemporalState::default()).unwrap();
    assert_eq!(out.decision.reason, DecisionReason::FreshEstimate);
    let h = out.panorama.height();
    let full = rms(&out.panorama, &scene.pano, 0..h);
    let mid = rms(&out.panorama, &scene.pano, h / 4..3 * h / 4);
    eprintln!("unperturbed: rms full {full:.4}, mid latitudes {mid:.4}");
    assert!(mid < 0.02, "{mid}");
}

#[test]
fn mls_grid_alone_closes_most_of_the_seam() {
    let perts = [
        Perturbation::rotation(2.0, -1.0, 1.5),
        Perturbation { rotation_deg: [-3.0, 2.0, -2.0], radial_gain_delta: 0.03, decenter: [4.0, -3.0] },
        Perturbation { rotation_deg: [1.0, 3.5, 0.5], radial_gain_delta: -0.04, decenter: [-6.0, 2.0] },
    ];
    for (i, pert) in perts.iter().enumerate() {
        let scene = synthesize(SceneKind::Checker, 2048, 1, pert, i as u64).unwrap();
        let state = TemporalState::default();
        let raw = stitcher_for(scene.calibration(), true, false);
        let mls = stitcher_for(scene.calibration(), false, false);
        let before = raw.stitch_frame(&scene.left, &scene.right, &state).unwrap();
        let after = mls.stitch_frame(&scene.left, &scene.right, &state).unwrap();
        let before = seam_error(&before.left, &before.right, raw.layout()).unwrap().rms_gap;
        let after = seam_error(&after.left, &after.right, mls.layout()).unwrap().rms_gap;
        eprintln!("mls only, scene {i}: {before:.4} -> {after:.4} ({:.3})", after / before);
        assert!(after <= 0.30 * before, "scene {i}: {before} -> {after}");
    }
}

#[test]
fn textureless_scene_disables_refinement() {
    let rig = SynthRig::new(1024);
    let flat = EquirectImage::from_raster(Raster::filled(1024, 512, 1, 0.5)).unwrap();
    let none = Perturbation::default();
    let left = project_to_fisheye(&flat, &rig.left, &none, rig.fisheye_size).unwrap();
    let right = project_to_fisheye(&flat, &rig.right, &none, rig.fisheye_size).unwrap();
    let s = stitcher_for(rig.calibration(None), true, true);
    let out = s.stitch_frame(&left, &right, &TemporalState::default()).unwrap();
    assert_eq!(out.decision.reason, DecisionReason::Disabled);
    assert!(out.decision.affine.is_none());
    let p = &out.panorama.raster;
    assert!(p.pixels.iter().all(|v| (v - 0.5).abs() < 1e-5));
}

fn run_sequence(frames: usize, corrupt: &[usize]) -> Vec<DecisionReason> {
    let scene = synthesize(SceneKind::Composite, 1024, 1, &Perturbation::rotation(1.0, 0.0, 0.5), 4).unwrap();
    let seq = static_sequence(&scene.left, &scene.right, &scene.rig, frames, corrupt).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in");
    std::fs::create_dir(&input).unwrap();
    for (i, f) in seq.iter().enumerate() {
        f.save(&input.join(format!("frame_{:06}.png", i + 1))).unwrap();
    }
    let s = stitcher_for(scene.calibration(), false, true);
    let diags = stitch_sequence(&input, &tmp.path().join("out"), &s, None).unwrap();
    let written = std::fs::read_to_string(tmp.path().join("out/diagnostics.txt")).unwrap();
    assert_eq!(written.lines().count(), frames);
    assert!(written.starts_with("1\t"));
    diags.into_iter().map(|d| d.decision.reason).collect()
}

#[test]
fn clean_sequence_is_all_fresh() {
    assert_eq!(run_sequence(3, &[]), [DecisionReason::FreshEstimate; 3]);
}

#[test]
fn corrupted_third_frame_reuses_previous_matrix() {
    use DecisionReason::*;
    assert_eq!(
        run_sequence(5, &[2]),
        [FreshEstimate, FreshEstimate, ReusedPrevious, FreshEstimate, FreshEstimate]
    );
}

#[test]
fn back_to_back_corruption_disables_the_second_frame() {
    use DecisionReason::*;
    assert_eq!(
        run_sequence(5, &[1, 2]),
        [FreshEstimate, ReusedPrevious, Disabled, FreshEstimate, FreshEstimate]
    );
}
