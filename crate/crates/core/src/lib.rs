//! Text-conditioned traffic generation.
//!
//! Road graphs and their grid layout, a synthetic scenario simulator that
//! produces text-traffic pairs, a small text encoder, and a denoising
//! diffusion model whose denoiser mixes a graph convolution into a UNet.

pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod nn;
pub mod road;
pub mod scenario;
pub mod text;
pub mod train;

pub use error::{Error, Result};
