use rand_chacha::rand_core::SeedableRng;

use super::{EnvKind, ExperimentConfig, ExperimentError};
use crate::envs::{
    generate_bandit_dataset, generate_gridworld_dataset, make_toy2d, ContinuousBandit2D,
    DiscreteBandit, Env, GridWorld, OfflineDataset, PolicyMix, Step,
};
use crate::SeededRng;

/// Stage streams derived from one seed. Each stage owns a ChaCha stream so
/// changing one stage's budget leaves the others' randomness untouched.
pub fn stream(seed: u64, stage: u64) -> SeededRng {
    let mut rng = SeededRng::seed_from_u64(seed);
    rng.set_stream(stage);
    rng
}

pub(crate) const DATA_STREAM: u64 = 1;
pub(crate) const CRITIC_STREAM: u64 = 2;
pub(crate) const ACTOR_STREAM: u64 = 3;
pub(crate) const EVAL_STREAM: u64 = 4;
pub(crate) const ONLINE_STREAM: u64 = 5;

#[derive(Clone, Debug)]
pub enum AnyEnv {
    Grid(GridWorld),
    Bandit(DiscreteBandit),
    Bandit2d(ContinuousBandit2D),
}

impl Env for AnyEnv {
    fn id(&self) -> String {
        match self {
            Self::Grid(e) => e.id(),
            Self::Bandit(e) => e.id(),
            Self::Bandit2d(e) => e.id(),
        }
    }
    fn state_dim(&self) -> usize {
        match self {
            Self::Grid(e) => e.state_dim(),
            Self::Bandit(e) => e.state_dim(),
            Self::Bandit2d(e) => e.state_dim(),
        }
    }
    fn action_dim(&self) -> usize {
        match self {
            Self::Grid(e) => e.action_dim(),
            Self::Bandit(e) => e.action_dim(),
            Self::Bandit2d(e) => e.action_dim(),
        }
    }
    fn reset(&mut self, rng: &mut SeededRng) -> Vec<f64> {
        match self {
            Self::Grid(e) => e.reset(rng),
            Self::Bandit(e) => e.reset(rng),
            Self::Bandit2d(e) => e.reset(rng),
        }
    }
    fn step(&mut self, action: &[f64], rng: &mut SeededRng) -> Step {
        match self {
            Self::Grid(e) => e.step(action, rng),
            Self::Bandit(e) => e.step(action, rng),
            Self::Bandit2d(e) => e.step(action, rng),
        }
    }
    fn action_bounds(&self) -> Option<(f64, f64)> {
        match self {
            Self::Grid(e) => e.action_bounds(),
            Self::Bandit(e) => e.action_bounds(),
            Self::Bandit2d(e) => e.action_bounds(),
        }
    }
    fn gamma(&self) -> f64 {
        match self {
            Self::Grid(e) => e.gamma(),
            Self::Bandit(e) => e.gamma(),
            Self::Bandit2d(e) => e.gamma(),
        }
    }
}

pub(crate) fn gridworld(config: &ExperimentConfig) -> Result<GridWorld, ExperimentError> {
    let n = config.grid_size;
    let mut g = GridWorld::new(n, n, (0, 0), (n - 1, n - 1))?;
    g.slip = config.slip;
    g.max_steps = config.max_episode_steps;
    g.gamma = config.gamma;
    g.validate()?;
    Ok(g)
}

pub(crate) fn discrete_bandit(config: &ExperimentConfig) -> Result<DiscreteBandit, ExperimentError> {
    Ok(DiscreteBandit::uniform(config.bandit_means.clone(), config.bandit_noise)?)
}

/// The environment a config evaluates in. Toy 2D datasets have none.
pub fn make_env(config: &ExperimentConfig) -> Result<AnyEnv, ExperimentError> {
    Ok(match config.env {
        EnvKind::Gridworld => AnyEnv::Grid(gridworld(config)?),
        EnvKind::Bandit => AnyEnv::Bandit(discrete_bandit(config)?),
        EnvKind::Bandit2d => AnyEnv::Bandit2d(ContinuousBandit2D::three_mode()),
        EnvKind::Toy2d => {
            return Err(ExperimentError::field("env", "toy2d datasets have no environment to act in"))
        }
    })
}

/// Loads `dataset_path` if set, otherwise generates from the env settings.
pub fn make_dataset(config: &ExperimentConfig) -> Result<OfflineDataset, ExperimentError> {
    if let Some(path) = &config.dataset_path {
        return Ok(OfflineDataset::read_from(&super::read_input(path)?[..])?);
    }
    let mut rng = stream(config.seed, DATA_STREAM);
    let n = config.dataset_size;
    Ok(match config.env {
        EnvKind::Gridworld => {
            let mix = PolicyMix::new(config.optimal_fraction, config.behavior_epsilon)?;
            generate_gridworld_dataset(&gridworld(config)?, mix, n, config.seed, &mut rng)?
        }
        EnvKind::Bandit => generate_bandit_dataset(&discrete_bandit(config)?, n, config.seed, &mut rng)?,
        EnvKind::Bandit2d => {
            generate_bandit_dataset(&ContinuousBandit2D::three_mode(), n, config.seed, &mut rng)?
        }
        EnvKind::Toy2d => make_toy2d(config.toy_generator, n, config.seed)?.to_dataset(),
    })
}
