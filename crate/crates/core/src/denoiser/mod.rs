//! Mixed-noise conditional denoiser: network, training and verification.

pub mod checkpoint;
pub mod gradcheck;
pub mod model;
pub mod train;

pub use checkpoint::Checkpoint;
pub use gradcheck::{check_gradient_entries, gradient_check, GradCheckReport};
pub use model::{DenoiserModel, ModelConfig, OutputParam, Workspace, LEVEL_FEATURES};
pub use train::{sample_noise_config, sample_noise_config_with, train, LossWeighting, NoiseFamily, TrainConfig, TrainReport};
