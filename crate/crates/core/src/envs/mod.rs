//! Desk-scale environments and offline datasets.

mod bandit;
mod dataset;
mod gridworld;
mod toy2d;

pub use bandit::{generate_bandit_dataset, BanditRef, ContinuousBandit2D, DiscreteBandit};
pub use dataset::{
    sample_batch, Batch, DatasetMeta, OfflineDataset, ReplayBuffer, RewardTransform, Transition,
    DATASET_MAGIC, DATASET_VERSION,
};
pub use gridworld::{generate_gridworld_dataset, GridAction, GridPolicy, GridWorld, PolicyMix};
pub use toy2d::{make_toy2d, Toy2DDataset, Toy2DGenerator};

use crate::SeededRng;

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("invalid environment config: {0}")]
    Config(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("batch size {batch} exceeds dataset size {len}")]
    BatchTooLarge { batch: usize, len: usize },
    #[error("unknown generator `{0}` (expected gaussians8, moons or spiral)")]
    UnknownGenerator(String),
    #[error("dataset file: {0}")]
    Format(String),
    #[error("transition has {got} values for a field of width {want}")]
    Width { got: usize, want: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Result of one environment step.
#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub next_state: Vec<f64>,
    pub reward: f64,
    /// True terminal; the bootstrap is masked.
    pub done: bool,
    /// Episode cut by the step cap.
    pub truncated: bool,
}

/// A reset/step environment with continuous action vectors.
pub trait Env {
    fn id(&self) -> String;
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn reset(&mut self, rng: &mut SeededRng) -> Vec<f64>;
    fn step(&mut self, action: &[f64], rng: &mut SeededRng) -> Step;
    /// Box to clip sampled actions into, if the env has one.
    fn action_bounds(&self) -> Option<(f64, f64)> {
        None
    }
    /// Discount used for discounted-return statistics.
    fn gamma(&self) -> f64 {
        1.0
    }
}
