//! Experiment configuration, stage runners, and run manifests behind the CLI.
mod config;
mod data;
mod manifest;
mod stages;

pub use config::{CostConfig, EvalConfig, ExperimentConfig, Paths, Schedule, Stage, Task, SEED_ENV};
pub use data::{clip_spec, generate, labels, load_dir, training_clips, validation_clips, write_dataset, Clip, LABELS_FILE, MOTION_FILE, VAL_SEED_OFFSET};
pub use manifest::{git_describe, RunManifest, RunRecorder, MANIFEST_FILE};
pub use stages::{pretrain_checkpoint, run, PRETRAIN_COLUMNS, TRAIN_COLUMNS};
