//! Masked cross-entropy, Adam, learning-rate schedules and seeded sweeps.

mod loss;
mod optim;
mod schedule;
mod step;
mod sweep;

pub use loss::{cross_entropy_masked, masked_nll_sum};
pub use optim::{
    adam_step, adam_step_lr, clip_global_norm, decays, AdamConfig, OptimState, StepInfo,
};
pub use schedule::Schedule;
pub use step::{batch_loss, batch_loss_and_grads};
pub use sweep::{
    run_sweep, train_arm, ArmResult, ArmStatus, CorpusSource, ExperimentSpec, MetricKind,
    MetricRow, PreparedTask, SweepReport, SweepSpec, TaskSpec, DEFAULT_LRS,
};
