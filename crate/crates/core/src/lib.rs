//! Convolution-free referring image segmentation: transformer encoders for
//! image and text, a class-seed fusion encoder, and a coarse-to-fine decoder,
//! all trained through a small reverse-mode autodiff engine.

pub mod checkpoint;
pub mod checks;
pub mod cli;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod par;
pub mod params;
pub mod tensor;
pub mod render;
pub mod train;
pub mod transformer;

pub use error::{Error, Result};
