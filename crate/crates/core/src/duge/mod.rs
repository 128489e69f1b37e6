//! Continual unlearning: negative-attention targets, memory-bank prior
//! preservation, weight anchoring, the scheduled total objective, the
//! decremental controller and the naive fine-tuning baseline.

mod attention;
mod decremental;
mod memory;
mod naive;
mod objective;
mod plan;
mod step;

pub use attention::{negative_attention, single_block, unlearning_loss, unlearning_loss_value};
pub use decremental::{run_decremental, DecrementalReport, DecrementalRun, Method};
pub use memory::{build_memory, generate_exemplars, MemoryBank};
pub use naive::{choose_replacement, naive_unlearn};
pub use objective::{
    check_manifests, prior_loss, weight_penalty, weight_penalty_value, LambdaSchedule,
};
pub use plan::{DecrementalPlan, Objective, Replacement, Scheduler, Trainable};
pub use step::{
    unlearn_step, unlearn_step_weighted, IterationLog, StepLog, UnlearnStepState, NORM_FLOOR,
};
