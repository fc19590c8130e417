//! Dual-view volumetric segmentation core.
//!
//! Everything here is pure computation over in-memory volumes: preprocessing,
//! Fourier-domain high-frequency view synthesis, the two segmentation networks
//! and their per-voxel critic, the training objective, evaluation metrics and
//! phantom generation. File formats, configuration and the command line live in
//! the `dualview` crate.
#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod error;
pub mod fft;
pub mod frequency;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod preprocess;
pub mod synth;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{ConfidenceMap, Geometry, LabelMask, OneHotMask, ProbabilityMap, Shape3, Volume};

/// Number of segmentation classes: background, left and right structure.
pub const NUM_CLASSES: usize = 3;
/// Label value of the left structure.
pub const LEFT_LABEL: u8 = 1;
/// Label value of the right structure.
pub const RIGHT_LABEL: u8 = 2;
