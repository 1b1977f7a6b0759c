//! Single-stage salient instance segmentation built around RoI masking.

pub mod ablate;
pub mod config;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod nn;
pub mod raster;
pub mod roimask;
pub mod segbranch;
pub mod tensor;

pub use error::{Error, Result};
