//! Dual-stream ensemble CNN toolkit for two-class volumetric classification.
//!
//! * [`tensor`]: tensors, reverse-mode autodiff, cross-entropy, Adam, weight files
//! * [`zoo`]: micro-scale constituent networks and their defining blocks
//! * [`ensemble`]: model blocks and the two-stream core architecture
//! * [`volume`]: intensity normalization, artifact clipping, FWHM smoothing, slicing, I/O
//! * [`data`]: balance checks, split protocol, synthetic task generators
//! * [`experiment`]: configuration, training, proxy pretraining, grids, result tables

pub mod data;
pub mod ensemble;
pub mod error;
pub mod experiment;
pub mod seed;
pub mod tensor;
pub mod volume;
pub mod zoo;

pub use error::{Error, Result};
