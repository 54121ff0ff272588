use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{FrameDiagnostics, Stitcher};
use crate::error::{Result, StitchError};
use crate::raster::{FisheyeImage, Raster};
use crate::temporal::TemporalState;

const FRAME_EXTENSIONS: [&str; 4] = ["png", "ppm", "pgm", "pnm"];

/// Splits a side-by-side dual-fisheye frame into its left and right halves.
pub fn split_dual_fisheye(frame: &Raster) -> Result<(FisheyeImage, FisheyeImage)> {
    if frame.width % 2 != 0 {
        return Err(StitchError::DimensionMismatch(format!(
            "dual-fisheye frame width {} is odd",
            frame.width
        )));
    }
    let half = frame.width / 2;
    let c = frame.channels;
    let mut left = Raster::new(half, frame.height, c);
    let mut right = Raster::new(half, frame.height, c);
    for (y, row) in frame.pixels.chunks(frame.width * c).enumerate() {
        let (l, r) = row.split_at(half * c);
        left.pixels[y * half * c..(y + 1) * half * c].copy_from_slice(l);
        right.pixels[y * half * c..(y + 1) * half * c].copy_from_slice(r);
    }
    Ok((left, right))
}

/// Places two equally sized fisheye images side by side.
pub fn join_dual_fisheye(left: &FisheyeImage, right: &FisheyeImage) -> Result<Raster> {
    if left.width != right.width || left.height != right.height || left.channels != right.channels
    {
        return Err(StitchError::DimensionMismatch(
            "dual-fisheye halves differ in shape".into(),
        ));
    }
    let (w, c) = (left.width, left.channels);
    let mut out = Raster::new(2 * w, left.height, c);
    for y in 0..left.height {
        let dst = &mut out.pixels[y * 2 * w * c..(y + 1) * 2 * w * c];
        dst[..w * c].copy_from_slice(&left.pixels[y * w * c..(y + 1) * w * c]);
        dst[w * c..].copy_from_slice(&right.pixels[y * w * c..(y + 1) * w * c]);
    }
    Ok(out)
}

fn parse_frame_name(path: &Path) -> Option<u64> {
    let ext = path.extension()?.to_str()?.to_ascii_lowercase();
    if !FRAME_EXTENSIONS.contains(&ext.as_str()) {
        return None;
    }
    let digits = path.file_stem()?.to_str()?.strip_prefix("frame_")?;
    if digits.len() < 6 || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

/// Frames named `frame_NNNNNN.<ext>` in ascending order. Fails on the first
/// missing index between the lowest and highest present.
pub fn list_frames(dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let mut frames = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if let Some(idx) = parse_frame_name(&path) {
            if let Some(prev) = frames.insert(idx, path.clone()) {
                return Err(StitchError::InvalidInput(format!(
                    "frame {idx} present twice: {} and {}",
                    prev.display(),
                    path.display()
                )));
            }
        }
    }
    let Some(&first) = frames.keys().next() else {
        return Err(StitchError::InvalidInput(format!(
            "no frame_NNNNNN images in {}",
            dir.display()
        )));
    };
    for (expected, &idx) in (first..).zip(frames.keys()) {
        if idx != expected {
            return Err(StitchError::SequenceGap(expected));
        }
    }
    Ok(frames.into_iter().collect())
}

/// Stitches every side-by-side dual-fisheye frame of `input_dir` in index
/// order, threading the temporal state through. Writes `frame_NNNNNN.png`
/// panoramas and one diagnostics line per frame.
pub fn stitch_sequence(
    input_dir: &Path,
    output_dir: &Path,
    stitcher: &Stitcher,
    diagnostics_path: Option<&Path>,
) -> Result<Vec<FrameDiagnostics>> {
    let frames = list_frames(input_dir)?;
    std::fs::create_dir_all(output_dir)?;
    let diag_path = diagnostics_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| output_dir.join("diagnostics.txt"));
    let mut diag_file = BufWriter::new(File::create(&diag_path)?);
    let mut state = TemporalState::default();
    let mut diagnostics = Vec::with_capacity(frames.len());
    for (index, path) in frames {
        let (left, right) = split_dual_fisheye(&Raster::load(&path)?)?;
        let out = stitcher.stitch_frame(&left, &right, &state)?;
        state = out.state;
        out.panorama
            .raster
            .save(&output_dir.join(format!("frame_{index:06}.png")))?;
        let d = FrameDiagnostics {
            index,
            matches: out.matches,
            decision: out.decision,
        };
        writeln!(diag_file, "{d}")?;
        diagnostics.push(d);
    }
    diag_file.flush()?;
    Ok(diagnostics)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_names() {
        assert_eq!(parse_frame_name(Path::new("frame_000012.png")), Some(12));
        assert_eq!(parse_frame_name(Path::new("frame_1234567.PPM")), Some(1234567));
        assert_eq!(parse_frame_name(Path::new("frame_12.png")), None);
        assert_eq!(parse_frame_name(Path::new("frame_000012.jpg")), None);
        assert_eq!(parse_frame_name(Path::new("shot_000012.png")), None);
    }

    #[test]
    fn gap_is_reported_by_index() {
        let dir = tempfile::tempdir().unwrap();
        let img = Raster::new(4, 2, 1);
        for i in [3, 4, 6] {
            img.save(&dir.path().join(format!("frame_{i:06}.png"))).unwrap();
        }
        assert!(matches!(list_frames(dir.path()), Err(StitchError::SequenceGap(5))));
        img.save(&dir.path().join("frame_000005.ppm")).unwrap();
        let idx: Vec<u64> = list_frames(dir.path()).unwrap().into_iter().map(|f| f.0).collect();
        assert_eq!(idx, vec![3, 4, 5, 6]);
        img.save(&dir.path().join("frame_000005.png")).unwrap();
        assert!(list_frames(dir.path()).is_err());
    }

    #[test]
    fn split_inverts_join() {
        let mut l = Raster::new(3, 2, 3);
        let mut r = Raster::new(3, 2, 3);
        l.pixels.iter_mut().enumerate().for_each(|(i, v)| *v = i as f32);
        r.pixels.iter_mut().enumerate().for_each(|(i, v)| *v = -(i as f32));
        let joined = join_dual_fisheye(&l, &r).unwrap();
        assert_eq!(joined.width, 6);
        assert_eq!(split_dual_fisheye(&joined).unwrap(), (l, r));
    }
}
