//! Token denoiser (noisy tokens → first clean token groups) and embedding
//! refiner (enhanced groups + noisy embedding → summed clean embedding).

pub mod loss;
pub mod model;

pub use loss::{er_loss, teacher_force, token_ce_loss};
pub use model::{denoise_tokens, refine, refiner_input, DenoiserConfig, DenoiserModel, TokenProbabilities};
