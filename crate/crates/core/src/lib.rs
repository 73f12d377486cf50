//! Identity/appearance-disentangled fingerprint generation.
//!
//! The crate covers the whole pipeline: a disentangled latent space with
//! paired training batches, the low-frequency appearance distance, contrastive
//! identity/appearance losses, a small style-based GAN trained with them,
//! recognition backbones trained with a large-margin cosine loss, synthetic
//! dataset generation, and the evaluation statistics used to judge all of it.

pub mod appearance;
pub mod autograd;
pub mod contrastive;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod generator;
pub mod latent;
pub mod nn;
pub mod par;
pub mod recognition;
pub mod tensor;

pub use error::{Error, Result};
