//! Dual-fisheye 360°×180° panorama and video stitching.
//!
//! The pipeline compensates light falloff, unwarps both fisheye frames to the
//! equirectangular layout, deforms the right (center) image through a
//! precomputed rigid moving-least-squares grid, refines the alignment per frame
//! with normalized cross-correlation and a least-squares affine, gates that
//! refinement for temporal coherence, and ramp-blends the two overlap bands.

pub mod calibration;
pub mod error;
pub mod lens_model;
pub mod mls_deform;
pub mod pipeline;
pub mod raster;
pub mod refine_align;
pub mod synthetic_oracle;
pub mod temporal;

pub use error::{Result, StitchError};
