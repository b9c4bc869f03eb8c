//! Training loop, sliding-window inference, checkpoints and configuration.

pub mod checkpoint;
pub mod config;
pub mod predict;
pub mod train;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use config::{ClassWeighting, TrainConfig};
pub use predict::{classify, predict_volume, predict_with_checkpoint, PredictOptions, Resources, THREADS_ENV};
pub use train::{build_resources, history_csv, lr_csv, lr_schedule, train_model, train_on, Dataset, EpochRecord, TrainOutput};
