//! Action tokenizers with a Lipschitz-constrained vector-quantized encoder,
//! the baseline tokenizers they are compared against, latent-trajectory
//! smoothness metrics, and a small in-context imitation learning harness.

pub mod autodiff;
pub mod cli;
pub mod error;
pub mod icil;
pub mod nn;
pub mod plot;
pub mod quantize;
pub mod rng;
pub mod smoothness;
pub mod synth;
pub mod tokenizer;

pub use error::{Error, Result};
