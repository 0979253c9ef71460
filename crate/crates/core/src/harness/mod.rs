//! Class-incremental experiment engine.

mod experiment;
mod method;
mod metrics;
mod stream;
mod train;

pub use experiment::{
    run_experiment, run_single, seed_model, ExperimentReport, ExperimentSpec, LossDriftPoint,
    MethodSummary, ModelSettings, ResidualRecord, RunRecord,
};
pub use method::{LrSchedule, Method, MethodConfig, Optimizer};
pub use metrics::{final_metrics, mean_std, AccuracyMatrix};
pub use stream::{generate_task_stream, Image, SyntheticTaskSpec, Task, TaskStream};
pub use train::{
    end_of_task_update, evaluate, task_loss, train_task, ContinualState, LayerAudit, TaskLog,
};
