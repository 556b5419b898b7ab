//! Composable semantic segmentation toolkit: encoder/decoder model zoo,
//! class-index dataset pipeline, pixel-wise training, confusion-matrix IoU
//! evaluation, and overlay rendering.

pub mod backend;
#[cfg(not(target_arch = "wasm32"))]
pub mod cli;
pub mod dataio;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod models;
pub mod persistence;
pub mod training;

pub use error::{Error, Result};
