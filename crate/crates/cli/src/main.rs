use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dfstitch::calibration::CalibrationFile;
use dfstitch::lens_model::{compensate_falloff, unwarp_fisheye};
use dfstitch::mls_deform::{DeformationGrid, MlsVariant};
use dfstitch::pipeline::{
    build_grid, stitch_sequence, FrameDiagnostics, SeamLayout, StitchConfig, Stitcher,
};
use dfstitch::raster::{EquirectImage, Raster};
use dfstitch::synthetic_oracle::{seam_error, static_sequence, synthesize, Perturbation, SceneKind};
use dfstitch::temporal::TemporalState;
use dfstitch::Result;

#[derive(Parser)]
#[command(name = "dfstitch", version, about = "Dual-fisheye 360x180 panorama and video stitcher")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Lens {
    Left,
    Right,
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    Rigid,
    Similarity,
    Affine,
}

impl From<Variant> for MlsVariant {
    fn from(v: Variant) -> Self {
        match v {
            Variant::Rigid => MlsVariant::Rigid,
            Variant::Similarity => MlsVariant::Similarity,
            Variant::Affine => MlsVariant::Affine,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Falloff-compensate and unwarp one fisheye image to equirectangular.
    Unwarp {
        fisheye: PathBuf,
        calib: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, value_enum, default_value = "right")]
        lens: Lens,
        /// Panorama width; defaults to the calibration's.
        #[arg(long)]
        width: Option<usize>,
    },
    /// Precompute the backward MLS deformation grid from calibration control points.
    BuildGrid {
        calib: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value_t = 8)]
        spacing: u32,
        /// Weight exponent; defaults to the calibration's.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, value_enum, default_value = "rigid")]
        variant: Variant,
    },
    /// Stitch one left/right fisheye pair.
    Stitch {
        left: PathBuf,
        right: PathBuf,
        calib: PathBuf,
        grid: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long)]
        no_refine: bool,
        #[arg(long)]
        no_blend: bool,
        /// Write the frame's diagnostics line here.
        #[arg(long)]
        diag: Option<PathBuf>,
    },
    /// Stitch a directory of side-by-side dual-fisheye frames (frame_NNNNNN.png).
    StitchVideo {
        input_dir: PathBuf,
        output_dir: PathBuf,
        calib: PathBuf,
        grid: PathBuf,
        #[arg(long, default_value_t = 0.85)]
        ncc_thresh: f64,
        #[arg(long, default_value_t = 10.0)]
        dy_margin: f64,
        #[arg(long, default_value_t = 0.10)]
        dx_drift: f64,
        #[arg(long, default_value_t = 1.0)]
        dx_floor: f64,
        /// Apply every fresh estimate without the temporal gate.
        #[arg(long)]
        no_gate: bool,
        #[arg(long)]
        no_refine: bool,
        #[arg(long)]
        no_blend: bool,
        /// Diagnostics file; defaults to OUTPUT_DIR/diagnostics.txt.
        #[arg(long)]
        diag: Option<PathBuf>,
    },
    /// Render a synthetic scene through a perturbed rig.
    Synth {
        #[arg(long, default_value = "checker")]
        scene: String,
        /// e.g. rot=1,0,0,gain=0.01,decenter=2,-1
        #[arg(long, default_value = "")]
        pert: String,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 2048)]
        width: usize,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write this many side-by-side frames under OUT_DIR/frames.
        #[arg(long, default_value_t = 0)]
        frames: usize,
        /// Frame indices whose lens rims get noise, e.g. 7,14.
        #[arg(long, value_delimiter = ',')]
        corrupt: Vec<usize>,
    },
    /// Seam-band difference between a stitched panorama and ground truth.
    Eval {
        stitched: PathBuf,
        truth: PathBuf,
        #[arg(long, default_value_t = 195.0)]
        fov: f64,
    },
}

fn config(calib: &CalibrationFile, grid: &DeformationGrid) -> StitchConfig {
    let mut cfg = StitchConfig::for_calibration(calib);
    cfg.grid_spacing = grid.spacing;
    cfg
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Unwarp { fisheye, calib, output, lens, width } => {
            let cal = CalibrationFile::load(&calib)?;
            let lens = match lens {
                Lens::Left => &cal.left,
                Lens::Right => &cal.right,
            };
            let img = compensate_falloff(&Raster::load(&fisheye)?, lens)?;
            let pano = unwarp_fisheye(&img, lens, width.unwrap_or(cal.pano_width))?;
            pano.raster.save(&output)
        }
        Command::BuildGrid { calib, output, spacing, alpha, variant } => {
            let cal = CalibrationFile::load(&calib)?;
            let mut cfg = StitchConfig::for_calibration(&cal);
            cfg.grid_spacing = spacing;
            cfg.variant = variant.into();
            if let Some(a) = alpha {
                cfg.alpha = a;
            }
            build_grid(&cal, &cfg)?.save(&output)
        }
        Command::Stitch { left, right, calib, grid, output, no_refine, no_blend, diag } => {
            let cal = CalibrationFile::load(&calib)?;
            let grid = DeformationGrid::load(&grid)?;
            let mut cfg = config(&cal, &grid);
            cfg.refine = !no_refine;
            cfg.blend = !no_blend;
            let stitcher = Stitcher::new(cal, grid, cfg)?;
            let out = stitcher.stitch_frame(
                &Raster::load(&left)?,
                &Raster::load(&right)?,
                &TemporalState::default(),
            )?;
            out.panorama.raster.save(&output)?;
            if let Some(path) = diag {
                let d = FrameDiagnostics { index: 0, matches: out.matches, decision: out.decision };
                writeln!(File::create(path)?, "{d}")?;
            }
            Ok(())
        }
        Command::StitchVideo {
            input_dir,
            output_dir,
            calib,
            grid,
            ncc_thresh,
            dy_margin,
            dx_drift,
            dx_floor,
            no_gate,
            no_refine,
            no_blend,
            diag,
        } => {
            let cal = CalibrationFile::load(&calib)?;
            let grid = DeformationGrid::load(&grid)?;
            let mut cfg = config(&cal, &grid);
            cfg.thresholds.ncc_thresh = ncc_thresh;
            cfg.thresholds.dy_margin = dy_margin;
            cfg.thresholds.dx_drift = dx_drift;
            cfg.thresholds.dx_floor = dx_floor;
            cfg.gate = !no_gate;
            cfg.refine = !no_refine;
            cfg.blend = !no_blend;
            let stitcher = Stitcher::new(cal, grid, cfg)?;
            let diags = stitch_sequence(&input_dir, &output_dir, &stitcher, diag.as_deref())?;
            eprintln!("stitched {} frames into {}", diags.len(), output_dir.display());
            Ok(())
        }
        Command::Synth { scene, pert, out_dir, width, channels, seed, frames, corrupt } => {
            let kind: SceneKind = scene.parse()?;
            let pert: Perturbation = pert.parse()?;
            let scene = synthesize(kind, width, channels, &pert, seed)?;
            std::fs::create_dir_all(&out_dir)?;
            scene.pano.raster.save(&out_dir.join("pano.png"))?;
            scene.left.save(&out_dir.join("left.png"))?;
            scene.right.save(&out_dir.join("right.png"))?;
            scene.calibration().save(&out_dir.join("calib.json"))?;
            if frames > 0 {
                let dir = out_dir.join("frames");
                std::fs::create_dir_all(&dir)?;
                let seq = static_sequence(&scene.left, &scene.right, &scene.rig, frames, &corrupt)?;
                for (i, f) in seq.iter().enumerate() {
                    f.save(&dir.join(format!("frame_{i:06}.png")))?;
                }
            }
            Ok(())
        }
        Command::Eval { stitched, truth, fov } => {
            let a = load_panorama(&stitched)?;
            let b = load_panorama(&truth)?;
            let layout = SeamLayout::for_fov(a.width(), fov)?;
            let report = seam_error(&a, &b, &layout)?;
            println!("rms_gap\tmax_gap");
            println!("{:.6}\t{:.6}", report.rms_gap, report.max_gap);
            Ok(())
        }
    }
}

fn load_panorama(path: &Path) -> Result<EquirectImage> {
    EquirectImage::from_raster(Raster::load(path)?)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Usage errors share the generic failure code; 2 means calibration.
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dfstitch: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
