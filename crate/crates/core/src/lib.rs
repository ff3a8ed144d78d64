//! Latent-diffusion image super-resolution at desk scale.
//!
//! The pipeline has two trained parts. Stage 1 is a conditional
//! denoising UNet operating on autoencoder latents, enlarged by a
//! sampling/space mixture of experts: one full UNet copy per contiguous
//! block of timesteps, plus multi-expert FFN layers that are averaged
//! into a single FFN for inference. Stage 2 is a VQ autoencoder decoder
//! conditioned on the low-resolution input and finished by an adaptive
//! frequency-filtering refinement network, trained with a
//! frequency-domain loss on top of L1.

#![forbid(unsafe_code)]

pub mod autoencoder;
pub mod config;
pub mod cost;
pub mod data;
pub mod denoiser;
pub mod manifest;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod schedule;
pub mod train;

/// Errors surfaced by the pipeline crates.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] latentsr_tensor::TensorError),
    #[error("schedule: {0}")]
    Schedule(String),
    #[error("config: {0}")]
    Config(String),
    #[error("model: {0}")]
    Model(String),
    #[error("data: {0}")]
    Data(String),
    #[error("archive: {0}")]
    Archive(String),
    #[error("training aborted: {0}")]
    Training(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
