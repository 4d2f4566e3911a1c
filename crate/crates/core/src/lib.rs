//! Deterministic building blocks for class-incremental learning (CIL)
//! experiments at desk scale.
//!
//! The crate covers the full pipeline:
//!
//! - [`tensor`], [`layers`], [`model`], [`loss`], [`optim`]: a minimal
//!   neural-network core (MLP and a 4-stage conv net) with hand-written
//!   backward rules, SGD with momentum, parameter freezing, and schedules.
//! - [`gradcheck`]: finite-difference verification of every backward rule.
//! - [`tasks`]: multitask plans (class subsets) for base-model training.
//! - [`trainer`]: hard-parameter-sharing base training with early stopping.
//! - [`exemplar`]: fixed-budget balanced exemplar memory (random/herding).
//! - [`engine`]: incremental steps with composable CE/KD losses and
//!   two-phase fine-tuning, plus the experiment driver.
//! - [`metrics`], [`data`]: evaluation and dataset plumbing.
//!
//! Everything is seeded: same config + same seed => bit-identical models
//! and reports (wall-clock fields excluded).

// Indexed loops over channels/columns read better than iterator chains in
// the numeric kernels, and layer caches are naturally tuple-heavy.
#![allow(clippy::needless_range_loop)]
#![allow(clippy::type_complexity)]

pub mod data;
pub mod engine;
pub mod error;
pub mod exemplar;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod tasks;
pub mod tensor;
pub mod trainer;

pub use data::{
    load_dataset, parse_schedule, parse_schedule_ordered, save_dataset, stratified_split,
    synth_blobs, ClassSchedule, Dataset, SplitIndices, SplitSpec,
};
pub use engine::{
    ablation_grid, run_experiment, run_step, BalancedFinetune, ExemplarConfig, ExperimentReport,
    IncrementalState, IncrementalStepRecord, LossSwitches, Phase1Config, Phase2Config, StepConfig,
    StepEval, StepReport,
};
pub use error::{Error, Result};
pub use exemplar::{herding_order, ClassIndex, ExemplarStore, SelectionStrategy};
pub use layers::Mode;
pub use loss::{cross_entropy, kd_loss};
pub use metrics::{
    avg_incremental_accuracy, confusion, group_accuracy, group_accuracy_macro, ConfusionMatrix,
};
pub use model::{
    BackboneSpec, BackboneVariant, FreezeMask, FreezeScope, Gradients, Head, HeadSpec, LossTerm,
    ModelState,
};
pub use optim::{cosine_lr, sgd_step, LrSchedule, OptimizerState};
pub use tasks::{
    enumerate_task_count, make_decreasing_plan, make_explicit_plan, make_fixed_size_plan,
    TaskPlan, TaskSpec,
};
pub use tensor::{Scalar, Tensor};
pub use trainer::{
    evaluate_accuracy, extract_for_incremental, predict_local, train_base, BaseTrainConfig,
    TrainLog,
};
