//! Experiment orchestration: configuration, training regimes, evaluation,
//! checkpointing and report emission.

pub mod checkpoint;
mod config;
mod report;
mod train;

pub use config::{sha256_hex, ExperimentConfig, HarnessError, Mode};
pub use report::{scores_csv, EpochRow, TrainReport};
pub use train::{
    evaluate, paired_csv, run_eval, run_teacher_as_gt_ablation, run_teacher_as_gt_ablation_with,
    run_train, run_train_with, train_rl, train_xe, DataContext, TrainOutcome, GRAD_CLIP_NORM,
};
