//! Training harness: plans, the optimization loop, prediction export and comparison grids.

pub mod grid;
pub mod plan;
pub mod predict;
pub mod trainer;

pub use plan::{TrainPhase, TrainPlan, SEED_ENV};
pub use trainer::{checkpoint_path, train, RunRecord, StepLog, TrainState, Trainer, RUN_RECORD, STEP_LOG};
