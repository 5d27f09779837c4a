//! Optimizer, learning-rate schedule, checkpoints, the training loop and the
//! variant-comparison harness.

mod ablate;
mod adam;
mod checkpoint;
mod config;
mod schedule;
mod trainer;

pub use ablate::{run_ablation, AblationRow, AblationSummary};
pub use adam::{adam_update, Adam, AdamParams};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, TrainState, FORMAT_VERSION, MAGIC};
pub use config::{LrMode, RunConfig, TrainConfig};
pub use schedule::lr_at_epoch;
pub use trainer::{batch_hash, enhance_image, Batch, IterRecord, TrainData, TrainSummary, Trainer, ValRecord};
