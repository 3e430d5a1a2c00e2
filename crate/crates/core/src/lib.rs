//! Instance-aware image colorization.
//!
//! A full-image network and an instance network share one encoder-decoder
//! architecture. At selected layers, instance features are resized into their
//! boxes and blended into the full-image features with per-pixel softmax
//! weights predicted by small convolutional heads.

pub mod ablation;
pub mod backbone;
pub mod colorspace;
pub mod config;
pub mod dataset;
pub mod detection;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod inference;
pub mod ops;
pub mod params;
pub mod pipeline;
pub mod training;

pub use error::{Error, Result};
