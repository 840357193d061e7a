//! Optimization: AdamW, schedule, clipping, the training loop and checkpoints.

mod checkpoint;
mod optim;
mod trainer;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, load_checkpoint_bytes, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use optim::{adamw_step, clip_global_norm, lr_at, AdamWParams, OptimizerState, ADAM_EPS};
pub use trainer::{
    latest_checkpoint, record_pair_loss, train, train_from, PairRecord, StepMetrics, TrainConfig,
    TrainOutcome,
};
