//! Synthetic tasks, a small encoder classifier, the training loop and
//! its metrics.

pub mod metrics;
pub mod model;
pub mod optim;
pub mod run;
pub mod task;
pub mod train;

pub use metrics::{accuracy, confidences, ece, DEFAULT_ECE_BINS};
pub use model::{build_model, Model, ModelConfig, Param};
pub use optim::{scheduled_lr, AdamW, OptimConfig};
pub use run::{run, EpochRow, EvalConfig, RunConfig, RunRecord, CSV_HEADER};
pub use task::{Batch, Dataset, SyntheticTask, TaskKind};
pub use train::{
    evaluate_dataset, evaluate_objective, grad_variance_probe, probe_gradients, train_step, train_step_consistency,
    train_step_single, DropState, Draws, EvalStats, Evaluation, StepStats,
};
