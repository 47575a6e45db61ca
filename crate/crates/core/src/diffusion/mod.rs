//! DDPM behavior cloning: noise schedules, score networks, the
//! noise-prediction loss and ancestral sampling.

mod model;
mod net;
mod schedule;

pub use model::{
    awr_weights, noise_prediction_loss, train_behavior, AwrWeighting, BehaviorModel, DdpmConfig,
    DdpmReport, DdpmTrainer, LossNorm, SamplerConfig, BEHAVIOR_MAGIC, BEHAVIOR_VERSION,
};
pub use net::{time_embedding, ScoreArch, ScoreNet, ScoreNetConfig};
pub use schedule::{DiffusionSchedule, NoisedBatch, ScheduleKind, COSINE_MAX_BETA, COSINE_OFFSET};

use crate::envs::EnvError;
use crate::tensorgrad::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum DiffusionError {
    #[error("invalid diffusion config: {0}")]
    Config(String),
    #[error("beta_{t} = {beta} is outside (0, 1)")]
    Beta { t: usize, beta: f64 },
    #[error("diffusion step {t} outside 1..={steps}")]
    Step { t: usize, steps: usize },
    #[error("width {got}, expected {want}")]
    Width { got: usize, want: usize },
    #[error("row counts differ: {actions} actions, {states} states, {steps} steps")]
    Rows { actions: usize, states: usize, steps: usize },
    #[error("behavior loss became non-finite after {step} updates")]
    Diverged { step: u64 },
    #[error("behavior checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
