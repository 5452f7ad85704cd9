//! Independent and joint training, optimizer and checkpoints.

mod checkpoint;
mod config;
mod cycle;
mod data;
mod optim;
mod passes;
mod run;
mod stage1;

pub use checkpoint::{
    load_checkpoint, read_meta, save_checkpoint, Checkpoint, CheckpointMeta, LoadOptions, ModelSpec, CHECKPOINT_FORMAT,
};
pub use config::{DataSource, LrSchedule, ModelShape, SourceKind, TrainConfig};
pub use cycle::cycle_image_loss;
pub use data::{load_sources, stream_seed, Source};
pub use optim::{Adam, AdamConfig};
pub use passes::{token_prediction, token_prediction_backward, token_target, x_condition, x_condition_backward, Ctx, Pass};
pub use run::{run_hash, LogLine, Member, Trainer};
