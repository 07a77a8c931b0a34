//! Optimization, checkpointing and the training loop.

pub mod checkpoint;
pub mod optim;
pub mod trainer;

pub use checkpoint::{
    load_checkpoint, load_model, restore_optimizer, restore_params, save_checkpoint, Checkpoint, CheckpointManifest,
};
pub use optim::{adam_step, lr_schedule, AdamConfig, AdamState};
pub use trainer::{assemble, epoch_instances, fit, FitOutput, FitReport, Instance, StepRecord, TrainConfig};
