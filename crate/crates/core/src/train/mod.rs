//! Optimization, persistence and evaluation.

mod adamw;
mod checkpoint;
mod config;
pub mod eval;
mod metrics;
mod trainer;

pub use adamw::{adamw_step, AdamW, AdamWHyper};
pub use checkpoint::{BlockEntry, BlockKind, Checkpoint, RngSnapshot, CHECKPOINT_VERSION, MAGIC};
pub use config::{AdamWConfig, Seeds, TrainConfig};
pub use eval::{evaluate, fidelity_gap, EvalConfig, EvalReport};
pub use metrics::{read_log, MetricLog, MetricRecord};
pub use trainer::{
    build_losses, epoch_checkpoint_name, frame_of, steps_per_epoch, train, EpochSummary, Trainer, FINAL_CHECKPOINT,
    METRICS_FILE,
};
