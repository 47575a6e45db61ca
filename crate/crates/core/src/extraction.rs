//! Sample-and-resample and argmax policy extraction.
//!
//! A policy draws `N` candidates from the behavior model, weighs them with
//! the critic and picks one. Implicit mode resamples in proportion to the
//! loss family's importance weight; greedy mode takes the Q-argmax.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::critic::CriticNets;
use crate::diffusion::{BehaviorModel, DiffusionError};
use crate::envs::Env;
use crate::losses::{implicit_weight, ConvexLoss, LossError};
use crate::tensorgrad::{Tensor, TensorError};
use crate::SeededRng;

#[derive(Debug, thiserror::Error)]
pub enum ExtractionError {
    #[error("n_samples must be at least 1")]
    NoSamples,
    #[error("episodes must be at least 1")]
    NoEpisodes,
    #[error("candidate source returned {got} actions, expected {want}")]
    CandidateCount { got: usize, want: usize },
    #[error("non-finite critic output")]
    NonFinite,
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum ExtractionMode {
    Implicit { loss: ConvexLoss },
    Greedy,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractionSpec {
    pub n_samples: usize,
    pub mode: ExtractionMode,
}

impl ExtractionSpec {
    pub fn greedy(n_samples: usize) -> Self {
        Self {
            n_samples,
            mode: ExtractionMode::Greedy,
        }
    }

    pub fn implicit(n_samples: usize, loss: ConvexLoss) -> Self {
        Self {
            n_samples,
            mode: ExtractionMode::Implicit { loss },
        }
    }

    pub fn validate(&self) -> Result<(), ExtractionError> {
        if self.n_samples == 0 {
            return Err(ExtractionError::NoSamples);
        }
        if let ExtractionMode::Implicit { loss } = &self.mode {
            // round-trip through the checked constructor
            ConvexLoss::from_parts(loss.family(), loss.param())?;
        }
        Ok(())
    }
}

/// Anything that proposes candidate actions for a state.
pub trait CandidateSource {
    fn candidates(&self, state: &[f64], n: usize, rng: &mut SeededRng)
        -> Result<Vec<Vec<f64>>, ExtractionError>;
}

/// Q(s, a_i) for a candidate set and V(s).
pub trait ActionCritic {
    fn q_values(&self, state: &[f64], actions: &[Vec<f64>]) -> Result<Vec<f64>, ExtractionError>;
    fn value(&self, state: &[f64]) -> Result<f64, ExtractionError>;
}

impl CandidateSource for BehaviorModel {
    fn candidates(
        &self,
        state: &[f64],
        n: usize,
        rng: &mut SeededRng,
    ) -> Result<Vec<Vec<f64>>, ExtractionError> {
        Ok(self.sample(state, n, rng)?)
    }
}

impl ActionCritic for CriticNets {
    fn q_values(&self, state: &[f64], actions: &[Vec<f64>]) -> Result<Vec<f64>, ExtractionError> {
        let states = Tensor::from_rows(&vec![state; actions.len()])?;
        let acts = Tensor::from_rows(actions)?;
        Ok(self.q_min_batch(&states, &acts)?)
    }

    fn value(&self, state: &[f64]) -> Result<f64, ExtractionError> {
        Ok(self.v(state)?)
    }
}

/// Index of the largest value, lowest index on ties; NaN never wins.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] || values[best].is_nan() && !v.is_nan() {
            best = i;
        }
    }
    best
}

/// Normalized selection probabilities over candidates with Q-values `q`.
/// All-zero implicit weights fall back to uniform.
pub fn selection_probs(mode: &ExtractionMode, q: &[f64], v: f64) -> Vec<f64> {
    let n = q.len();
    match mode {
        ExtractionMode::Greedy => {
            let mut p = vec![0.0; n];
            p[argmax(q)] = 1.0;
            p
        }
        ExtractionMode::Implicit { loss } => {
            let w: Vec<f64> = q.iter().map(|&qi| implicit_weight(loss, qi, v)).collect();
            let total: f64 = w.iter().sum();
            if total > 0.0 && total.is_finite() {
                w.iter().map(|x| x / total).collect()
            } else {
                log::warn!("all {n} candidate weights are zero or non-finite, resampling uniformly");
                vec![1.0 / n as f64; n]
            }
        }
    }
}

/// Categorical draw from `probs` by inverse CDF.
pub fn draw_index(probs: &[f64], rng: &mut SeededRng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the last partial sum
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Choice {
    pub index: usize,
    pub action: Vec<f64>,
    pub candidates: Vec<Vec<f64>>,
    pub q: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Draws candidates, weighs them and selects one.
pub fn choose(
    spec: &ExtractionSpec,
    state: &[f64],
    behavior: &dyn CandidateSource,
    critic: &dyn ActionCritic,
    rng: &mut SeededRng,
) -> Result<Choice, ExtractionError> {
    spec.validate()?;
    let candidates = behavior.candidates(state, spec.n_samples, rng)?;
    if candidates.len() != spec.n_samples {
        return Err(ExtractionError::CandidateCount {
            got: candidates.len(),
            want: spec.n_samples,
        });
    }
    let q = critic.q_values(state, &candidates)?;
    let v = match spec.mode {
        ExtractionMode::Implicit { .. } => critic.value(state)?,
        ExtractionMode::Greedy => 0.0,
    };
    if q.iter().any(|x| !x.is_finite()) || !v.is_finite() {
        return Err(ExtractionError::NonFinite);
    }
    let probs = selection_probs(&spec.mode, &q, v);
    let index = match spec.mode {
        ExtractionMode::Greedy => argmax(&q),
        ExtractionMode::Implicit { .. } => draw_index(&probs, rng),
    };
    Ok(Choice {
        index,
        action: candidates[index].clone(),
        candidates,
        q,
        probs,
    })
}

pub fn act(
    spec: &ExtractionSpec,
    state: &[f64],
    behavior: &dyn CandidateSource,
    critic: &dyn ActionCritic,
    rng: &mut SeededRng,
) -> Result<Vec<f64>, ExtractionError> {
    Ok(choose(spec, state, behavior, critic, rng)?.action)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub mean_discounted_return: f64,
    pub std_discounted_return: f64,
    /// Episodes cut by either the env's or the evaluator's step cap.
    pub truncated: usize,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Rolls out `policy` for `episodes` episodes. Undiscounted returns are
/// the headline numbers, discounted ones use the env's gamma.
pub fn evaluate_with<E, P>(
    env: &mut E,
    episodes: usize,
    max_steps: usize,
    rng: &mut SeededRng,
    mut policy: P,
) -> Result<EvalReport, ExtractionError>
where
    E: Env + ?Sized,
    P: FnMut(&[f64], &mut SeededRng) -> Result<Vec<f64>, ExtractionError>,
{
    if episodes == 0 {
        return Err(ExtractionError::NoEpisodes);
    }
    let gamma = env.gamma();
    let mut returns = Vec::with_capacity(episodes);
    let mut discounted = Vec::with_capacity(episodes);
    let mut truncated = 0;
    for _ in 0..episodes {
        let mut s = env.reset(rng);
        let (mut ret, mut disc, mut k) = (0.0, 0.0, 1.0);
        let mut steps = 0;
        loop {
            let a = policy(&s, rng)?;
            let step = env.step(&a, rng);
            ret += step.reward;
            disc += k * step.reward;
            k *= gamma;
            steps += 1;
            if step.done {
                break;
            }
            if step.truncated || steps >= max_steps {
                truncated += 1;
                break;
            }
            s = step.next_state;
        }
        returns.push(ret);
        discounted.push(disc);
    }
    let (mean_return, std_return) = mean_std(&returns);
    let (mean_discounted_return, std_discounted_return) = mean_std(&discounted);
    Ok(EvalReport {
        episodes,
        mean_return,
        std_return,
        mean_discounted_return,
        std_discounted_return,
        truncated,
    })
}

/// Evaluates the extracted policy.
pub fn evaluate_policy<E: Env + ?Sized>(
    spec: &ExtractionSpec,
    env: &mut E,
    behavior: &dyn CandidateSource,
    critic: &dyn ActionCritic,
    episodes: usize,
    max_steps: usize,
    rng: &mut SeededRng,
) -> Result<EvalReport, ExtractionError> {
    spec.validate()?;
    evaluate_with(env, episodes, max_steps, rng, |s, r| act(spec, s, behavior, critic, r))
}
