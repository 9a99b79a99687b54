//! Convolutional waveform codec with a residual vector quantizer.

pub mod config;
pub mod model;
pub mod rvq;
pub mod stft_loss;
pub mod tokens;
pub mod train;

pub use config::CodecConfig;
pub use model::CodecModel;
pub use rvq::{commitment_loss, lookup_sum, rvq_quantize, Codebooks, Quantized, StageStats};
pub use stft_loss::MultiResolutionStft;
pub use tokens::TokenMatrix;
pub use train::{stage_mse, train_codec, CodecLossRow, CodecTrainConfig, CodecTrainReport};
