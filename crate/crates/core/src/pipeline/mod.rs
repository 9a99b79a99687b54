//! Joint training, evaluation, FLOPs accounting and the group-count ablation.

mod ablation;
mod eval;
pub mod flops;
mod metrics;
mod train;

pub use ablation::{ablate_groups, AblationData, AblationReport, AblationRow};
pub use eval::{enhance, enhance_tokens, evaluate, Aggregate, ClipMetrics, EvalReport};
pub use flops::{flops_estimate, Component, FlopsBreakdown, FlopsPart};
pub use metrics::{si_snr, token_accuracy, SI_SNR_CAP_DB};
pub use train::{
    joint_loss_gradients, joint_loss_value, tokenize_pairs, total_loss, train_denoiser, validation_losses, LossRow, TokenPair, TrainConfig, TrainReport,
    ValidationLosses,
};
