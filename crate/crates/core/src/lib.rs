//! Label types, synthetic data, pseudo labels, patch masking and the
//! composite loss of a scribble-supervised segmentation pipeline.

pub mod cpl;
pub mod domain;
pub mod error;
pub mod losses;
pub mod mcm;
pub mod mgrd;
pub mod rng;
pub mod scribble;
pub mod synth;

pub use error::{CoreError, Result};
