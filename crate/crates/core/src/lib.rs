//! Semantic segmentation from ultra-low-resolution RGB.
//!
//! A super-resolution generator lifts a tiny input to full resolution, a
//! segmentation network labels the result, and two training-only critics shape
//! the reconstruction: a segmentation-aware discriminator over
//! (image, label-map) pairs and a frozen feature extractor. The crate also
//! carries the evaluation metrics and a grid-world navigation simulator that
//! consumes segmentation maps.

pub mod afe;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod datakit;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod navsim;
pub mod sad;
pub mod segnet;
pub mod srgen;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
pub use types::{ImageTensor, LabelMap, IGNORE_INDEX};

/// Version stamped into every artifact this crate writes.
pub const FORMAT_VERSION: u32 = 1;
