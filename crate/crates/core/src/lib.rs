//! Hybrid CNN/ViT visual place recognition at desk scale.
//!
//! A toy vision transformer with frequency-spatial adapters and a small
//! convolutional stream are fused by a learned gate, pooled into a global
//! descriptor and trained with mined triplets on a synthetic place world.

pub mod cnn;
pub mod config;
pub mod dfm;
pub mod error;
pub mod fsa;
pub mod gradsuite;
pub mod head;
pub mod heatmap;
pub mod io;
pub mod manifest;
pub mod model;
pub mod params;
pub mod retrieval;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
