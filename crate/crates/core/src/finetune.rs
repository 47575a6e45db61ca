//! Online finetuning from offline pretraining.
//!
//! `Max` keeps the behavior model frozen, explores with greedy extraction
//! and trains only the critics. `Imp` explores with the implicit policy and
//! also keeps cloning the (growing) buffer into the behavior model.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::critic::{CriticConfig, CriticError, CriticNets, CriticTrainer};
use crate::diffusion::{BehaviorModel, DdpmConfig, DdpmTrainer, DiffusionError};
use crate::envs::{EnvError, Env, ReplayBuffer, Transition};
use crate::extraction::{act, evaluate_policy, EvalReport, ExtractionError, ExtractionSpec};
use crate::{rng_from_seed, SeededRng};

#[derive(Debug, thiserror::Error)]
pub enum FinetuneError {
    #[error("eval_every must be positive")]
    EvalEvery,
    #[error(transparent)]
    Critic(#[from] CriticError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Extraction(#[from] ExtractionError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinetuneMode {
    Max,
    Imp,
}

impl FinetuneMode {
    /// Gradient steps per env step; the actor-finetuning mode takes two.
    pub fn grad_steps(self) -> usize {
        match self {
            FinetuneMode::Max => 1,
            FinetuneMode::Imp => 2,
        }
    }
}

impl std::str::FromStr for FinetuneMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "max" => Ok(Self::Max),
            "imp" => Ok(Self::Imp),
            other => Err(format!("unknown finetune mode `{other}` (expected max or imp)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub mode: FinetuneMode,
    pub env_steps: u64,
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub eval_max_steps: usize,
    pub n_samples: usize,
    pub critic: CriticConfig,
    pub ddpm: DdpmConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub env_step: u64,
    pub eval_return_mean: f64,
    pub eval_return_std: f64,
    /// Discounted with the env's gamma; kept out of the CSV.
    pub eval_discounted_mean: f64,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub curve: Vec<CurvePoint>,
    pub buffer: ReplayBuffer,
}

/// Writes the return curve as `env_step,eval_return_mean,eval_return_std`.
pub fn write_curve_csv<W: std::io::Write>(curve: &[CurvePoint], mut w: W) -> std::io::Result<()> {
    writeln!(w, "env_step,eval_return_mean,eval_return_std")?;
    for p in curve {
        writeln!(w, "{},{},{}", p.env_step, p.eval_return_mean, p.eval_return_std)?;
    }
    Ok(())
}

fn evaluate<E: Env + Clone>(
    env: &E,
    config: &FinetuneConfig,
    behavior: &BehaviorModel,
    critic: &CriticNets,
    seed: u64,
) -> Result<EvalReport, FinetuneError> {
    let mut eval_env = env.clone();
    let mut rng = rng_from_seed(seed);
    Ok(evaluate_policy(
        &ExtractionSpec::greedy(config.n_samples),
        &mut eval_env,
        behavior,
        critic,
        config.eval_episodes,
        config.eval_max_steps,
        &mut rng,
    )?)
}

/// Runs `config.env_steps` environment steps, appending every transition
/// to the buffer and training after each one.
pub fn finetune<E: Env + Clone>(
    critic: &mut CriticNets,
    behavior: &mut BehaviorModel,
    buffer: ReplayBuffer,
    env: &mut E,
    config: &FinetuneConfig,
    rng: &mut SeededRng,
) -> Result<FinetuneOutcome, FinetuneError> {
    if config.eval_every == 0 {
        return Err(FinetuneError::EvalEvery);
    }
    let mut buffer = buffer;
    let mut critic_trainer = CriticTrainer::new(config.critic.clone());
    let mut bc_trainer = match config.mode {
        FinetuneMode::Max => None,
        FinetuneMode::Imp => Some(DdpmTrainer::new(DdpmConfig {
            cosine_decay: false,
            ..config.ddpm.clone()
        })),
    };
    let explore = match config.mode {
        FinetuneMode::Max => ExtractionSpec::greedy(config.n_samples),
        FinetuneMode::Imp => ExtractionSpec::implicit(config.n_samples, config.critic.loss),
    };

    let mut curve = Vec::new();
    let eval_seed = |rng: &mut SeededRng| rng.random::<u64>();
    let report = evaluate(env, config, behavior, critic, eval_seed(rng))?;
    curve.push(CurvePoint {
        env_step: 0,
        eval_return_mean: report.mean_return,
        eval_return_std: report.std_return,
        eval_discounted_mean: report.mean_discounted_return,
    });

    let mut state = env.reset(rng);
    for step in 1..=config.env_steps {
        let action = act(&explore, &state, &*behavior, &*critic, rng)?;
        let out = env.step(&action, rng);
        buffer.push(Transition {
            state: state.clone(),
            action,
            reward: out.reward,
            next_state: out.next_state.clone(),
            done: out.done,
        })?;
        state = if out.done || out.truncated {
            env.reset(rng)
        } else {
            out.next_state
        };

        for _ in 0..config.mode.grad_steps() {
            let bs = config.critic.batch_size.min(buffer.len());
            let batch = buffer.sample(bs, rng)?;
            critic_trainer.step(critic, &batch)?;
            if let Some(t) = bc_trainer.as_mut() {
                let bs = config.ddpm.batch_size.min(buffer.len());
                let batch = buffer.sample(bs, rng)?;
                t.step(behavior, &batch.states, &batch.actions, None, rng)?;
            }
        }

        if step % config.eval_every == 0 || step == config.env_steps {
            let report = evaluate(env, config, behavior, critic, eval_seed(rng))?;
            curve.push(CurvePoint {
                env_step: step,
                eval_return_mean: report.mean_return,
                eval_return_std: report.std_return,
                eval_discounted_mean: report.mean_discounted_return,
            });
        }
    }
    Ok(FinetuneOutcome { curve, buffer })
}
