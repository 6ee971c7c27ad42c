//! Optimization loop, learning-rate schedules, checkpoints, metrics and
//! training-cost accounting.

mod checkpoint;
mod flops;
mod metrics;
mod optim;
mod sched;
mod trainer;

pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use flops::{forward_flops, FlopLedger};
pub use metrics::{classification_metrics, evaluate, evaluate_ensemble, predict, Metrics};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use sched::{Monitor, Scheduler, SchedulerConfig};
pub use trainer::{
    fine_tune, frozen, init_student_from_checkpoint, init_student_from_teacher, train_student, train_teacher,
    EpochRecord, StepRecord, TrainConfig, TrainOutcome,
};

#[cfg(test)]
mod tests;
