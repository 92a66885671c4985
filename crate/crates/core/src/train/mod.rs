//! Optimization loop, schedule, run records and model selection.

pub mod adam;
pub mod check;
pub mod config;
pub mod records;
pub mod run;
pub mod schedule;

pub use adam::{Adam, AdamConfig};
pub use check::{model_gradcheck, random_pairs};
pub use config::TrainConfig;
pub use records::{format_sig6, select_best, selection_rate, topk_selection, EpochRow, RunRecord};
pub use run::{
    accumulate_gradients, checkpoint_path, resume, run_experiment, ExperimentData, TrainState, Trainer, BPE_FILE,
    LOSS_LOG,
};
pub use schedule::lr_at;
