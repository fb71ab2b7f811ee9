//! Infrared gas-leak lab: synthetic plume video, a differentiable voxel shift
//! operator, a toy spatio-temporal detector and its evaluation suite.

pub mod bbox;
pub mod checks;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod detector;
pub mod dispersion;
pub mod error;
pub mod eval;
pub mod image;
pub mod radiometry;
pub mod rng;
pub mod tensor;
pub mod vsf;

pub use error::{Error, Result};
