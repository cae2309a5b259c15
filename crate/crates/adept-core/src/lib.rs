//! Human-centric pretraining at desk scale.
//!
//! The crate trains a small vision transformer on synthetic stick-figure
//! images with two coupled objectives: momentum contrastive learning between
//! augmented views, and denoising of perturbed annotations (frequency-domain
//! texture maps and 2-D keypoints). Everything runs on plain f64 CPU math
//! with a built-in reverse-mode autodiff engine, so runs are bit-for-bit
//! reproducible from a seed.

pub mod checkpoint;
pub mod config;
pub mod contrastive;
pub mod dct;
pub mod denoise;
pub mod encoders;
pub mod gradcheck;
pub mod imageio;
pub mod nn;
pub mod pipeline;
pub mod seeds;
pub mod synthdata;
pub mod tensor;

pub use tensor::{Tensor, TensorError};
