//! Joint translation + causal-LM optimization with Adam, checkpointing and
//! a tab-separated metric log.

mod adam;
mod checkpoint;
mod log;
mod loss;
mod trainer;

pub use adam::{adam_step, check_finite, clip_grad_norm, AdamState, Moments, OptimizerConfig};
pub use checkpoint::{
    config_fingerprint, load_checkpoint, read_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION,
};
pub use log::{MetricLog, MetricRow, LOG_HEADER};
pub use loss::{
    compute_losses, evaluate_losses, teacher_forced_accuracy, translation_loss, LossBreakdown, Losses, TaskBatches,
};
pub use trainer::{MixingMode, StreamCursor, TrainConfig, TrainData, Trainer};
