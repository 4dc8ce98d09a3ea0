//! Losses, the AdamW optimizer, and the training loop.

mod adamw;
mod fit;
mod loss;

pub use adamw::{AdamW, AdamWConfig};
pub use fit::{fit, stack_batch, train_step, Batch, BatchSampler, FitConfig, LogRecord, TrainSample};
pub use loss::{bce_loss, total_loss, LossConfig, LossVars, BCE_CLAMP};

/// Learning rate used with the paper-scale preset.
pub const PAPER_LR: f64 = 5e-6;
/// Learning rate used with the toy preset when training from scratch.
pub const TOY_LR: f64 = 1e-3;
