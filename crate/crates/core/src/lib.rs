//! Token-domain speech denoising on a miniature residual-vector-quantized
//! audio codec.
//!
//! The pipeline encodes noisy speech into `K` groups of acoustic tokens,
//! predicts the first two groups of the clean tokens with a Conformer token
//! denoiser, refines the summed embedding of all groups with a second
//! Conformer stack, and decodes the result with the codec decoder.

pub mod error;
pub mod config;
pub mod codec;
pub mod denoiser;
pub mod dsp;
pub mod nn;
pub mod pipeline;

pub use error::{Error, Result};
