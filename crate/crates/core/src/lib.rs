//! Sequential region-wise diffusion sampling with iterative partial refinement.

pub mod denoiser;
pub mod error;
pub mod experiment;
pub mod refine;
pub mod sampler;
pub mod scalar;
pub mod schedule;
pub mod tasks;

pub use error::{Error, Result};

/// Single-precision model used by the command-line tools and checkpoints.
pub type Model = denoiser::DenoiserModel<f32>;
pub type Sample = schedule::RegionSample<f32>;
pub type Codebook = tasks::glyph::GlyphCodebook<f32>;
