//! Video surface-normal estimation with a small latent video diffusion model.

pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod evalkit;
pub mod gradcheck;
pub mod inference;
pub mod nn;
pub mod ntf;
pub mod pipeline;
pub mod sfr;
pub mod synthdata;
pub mod tensors;
pub mod trainer;
pub mod vae;

pub use error::{Error, Result};
