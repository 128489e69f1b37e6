//! Conditional DDPM: schedule, forward noising, noise-prediction loss,
//! ancestral sampler with classifier-free guidance, and the denoiser.

mod loss;
mod model;
mod sampler;
mod schedule;
mod train;

pub use loss::{denoise_loss, denoise_loss_with, noise_prediction_loss, NoiseDraw};
pub use model::{patchify, AttentionMaps, AttentionProbe, DenoiserConfig, DenoiserModel};
pub use sampler::{
    ancestral_sample, generate, guided_eps, sample_batch, sampling_timesteps, SamplerConfig,
};
pub use schedule::NoiseSchedule;
pub use train::{cosine_lr, train_denoiser, TrainConfig};
