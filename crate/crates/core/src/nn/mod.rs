//! Dense f64 tensors, a reverse-mode tape, layers, Conformer blocks and Adam.

pub mod checkpoint;
pub mod conformer;
pub mod kernels;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;


pub use checkpoint::{Checkpoint, Record};
pub use conformer::{conformer_block_forward, ConformerBlock, ConformerConfig, ConformerStack};
pub use layers::{forward_linear, softmax_rows, Conv1d, ConvTranspose1d, DepthwiseConv1d, LayerNorm, Linear};
pub use optim::{adam_step, clip_grad_norm, warmup_lr, OptimizerState};
pub use params::{ParamId, ParamStore};
pub use tape::{CustomOp, Tape, Var};
pub use tensor::Tensor;
