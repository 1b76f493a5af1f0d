//! Continuous-token generative recommendation.
//!
//! Users and items are mapped to continuous tokens by a σ-VAE tokenizer; a
//! small causal sequence model predicts semantic labels and emits a
//! conditioning vector; a conditional diffusion head with dispersive
//! regularisation and classifier-free guidance generates a preference
//! vector; hybrid cosine scoring ranks the full catalog.

pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod quantized;
pub mod retrieval;
pub mod rng;
pub mod svd;
pub mod synth;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
