//! Joint training of the extractor and generator, plus checkpoint I/O.

mod checkpoint;
mod config;
mod trainer;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::TrainConfig;
pub use trainer::{write_loss_header, write_loss_row, RunOptions, StepLosses, Trainer, LOSS_LOG_HEADER};
