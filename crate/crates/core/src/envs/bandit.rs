use rand::Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DatasetMeta, Env, EnvError, OfflineDataset, Step, Transition};
use crate::SeededRng;

/// Multi-armed bandit with Gaussian reward noise. Actions are one-hot over
/// arms; any continuous action is read as the arm with the largest entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteBandit {
    pub reward_means: Vec<f64>,
    pub noise_std: f64,
    pub behavior_probs: Vec<f64>,
}

impl DiscreteBandit {
    pub fn new(
        reward_means: Vec<f64>,
        noise_std: f64,
        behavior_probs: Vec<f64>,
    ) -> Result<Self, EnvError> {
        if reward_means.is_empty() || reward_means.len() != behavior_probs.len() {
            return Err(EnvError::Config(
                "bandit needs one behavior probability per arm".into(),
            ));
        }
        if !(noise_std >= 0.0) {
            return Err(EnvError::Config(format!("noise_std {noise_std} < 0")));
        }
        let total: f64 = behavior_probs.iter().sum();
        if behavior_probs.iter().any(|&p| p < 0.0) || (total - 1.0).abs() > 1e-12 {
            return Err(EnvError::Config(format!(
                "behavior probabilities must form a simplex (sum {total})"
            )));
        }
        Ok(Self {
            reward_means,
            noise_std,
            behavior_probs,
        })
    }

    /// Uniform behavior over the given arm means.
    pub fn uniform(reward_means: Vec<f64>, noise_std: f64) -> Result<Self, EnvError> {
        let n = reward_means.len().max(1);
        let mut p = vec![1.0 / n as f64; reward_means.len()];
        if let Some(first) = p.first_mut() {
            *first = 1.0 - (n - 1) as f64 / n as f64;
        }
        Self::new(reward_means, noise_std, p)
    }

    /// Low/medium/high clusters used for the value-sweep figure.
    pub fn three_cluster() -> Self {
        Self::uniform(vec![1.0, 5.0, 10.0], 0.5).expect("valid")
    }

    pub fn n_arms(&self) -> usize {
        self.reward_means.len()
    }

    pub fn one_hot(&self, arm: usize) -> Vec<f64> {
        let mut a = vec![0.0; self.n_arms()];
        a[arm] = 1.0;
        a
    }

    /// Arm chosen by a continuous action; ties go to the lowest index.
    pub fn arm_of(&self, action: &[f64]) -> usize {
        let mut best = 0;
        for (i, &v) in action.iter().enumerate().take(self.n_arms()) {
            if v > action[best] {
                best = i;
            }
        }
        best
    }

    pub fn pull(&self, arm: usize, rng: &mut SeededRng) -> f64 {
        let noise: f64 = rng.sample(StandardNormal);
        self.reward_means[arm] + self.noise_std * noise
    }

    pub fn behavior_mean(&self) -> f64 {
        self.reward_means.iter().zip(&self.behavior_probs).map(|(m, p)| m * p).sum()
    }
}

impl Env for DiscreteBandit {
    fn id(&self) -> String {
        "discrete-bandit".into()
    }
    fn state_dim(&self) -> usize {
        1
    }
    fn action_dim(&self) -> usize {
        self.n_arms()
    }
    fn reset(&mut self, _rng: &mut SeededRng) -> Vec<f64> {
        vec![0.0]
    }
    fn step(&mut self, action: &[f64], rng: &mut SeededRng) -> Step {
        let arm = self.arm_of(action);
        Step {
            next_state: vec![0.0],
            reward: self.pull(arm, rng),
            done: true,
            truncated: false,
        }
    }
}

/// One-state bandit over the plane with reward `a₁ + a₂`; the behavior
/// policy is an equal-weight Gaussian mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuousBandit2D {
    pub mode_centers: Vec<[f64; 2]>,
    pub mode_std: f64,
}

impl ContinuousBandit2D {
    pub fn new(mode_centers: Vec<[f64; 2]>, mode_std: f64) -> Result<Self, EnvError> {
        if mode_centers.is_empty() {
            return Err(EnvError::Config("need at least one mode".into()));
        }
        if !(mode_std > 0.0) {
            return Err(EnvError::Config(format!("mode_std {mode_std} must be > 0")));
        }
        Ok(Self {
            mode_centers,
            mode_std,
        })
    }

    /// Three modes with distinct rewards inside the unit box.
    pub fn three_mode() -> Self {
        Self::new(vec![[0.2, 0.2], [0.5, 0.8], [0.9, 0.5]], 0.05).expect("valid")
    }

    pub fn reward(action: &[f64]) -> f64 {
        action[0] + action[1]
    }

    /// Index of the mode with the highest reward at its center.
    pub fn best_mode(&self) -> usize {
        let mut best = 0;
        for (i, c) in self.mode_centers.iter().enumerate() {
            if c[0] + c[1] > self.mode_centers[best][0] + self.mode_centers[best][1] {
                best = i;
            }
        }
        best
    }

    /// Nearest mode center and its distance in units of `mode_std`.
    pub fn nearest_mode(&self, a: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (i, c) in self.mode_centers.iter().enumerate() {
            let d = ((a[0] - c[0]).powi(2) + (a[1] - c[1]).powi(2)).sqrt() / self.mode_std;
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    pub fn sample_behavior(&self, rng: &mut SeededRng) -> [f64; 2] {
        let k = rng.random_range(0..self.mode_centers.len());
        let n = Normal::new(0.0, self.mode_std).expect("positive std");
        let c = self.mode_centers[k];
        [c[0] + n.sample(rng), c[1] + n.sample(rng)]
    }
}

impl Env for ContinuousBandit2D {
    fn id(&self) -> String {
        "continuous-bandit".into()
    }
    fn state_dim(&self) -> usize {
        1
    }
    fn action_dim(&self) -> usize {
        2
    }
    fn reset(&mut self, _rng: &mut SeededRng) -> Vec<f64> {
        vec![0.0]
    }
    fn step(&mut self, action: &[f64], _rng: &mut SeededRng) -> Step {
        Step {
            next_state: vec![0.0],
            reward: Self::reward(action),
            done: true,
            truncated: false,
        }
    }
}

/// Either bandit kind, for dataset generation.
pub enum BanditRef<'a> {
    Discrete(&'a DiscreteBandit),
    Continuous(&'a ContinuousBandit2D),
}

impl<'a> From<&'a DiscreteBandit> for BanditRef<'a> {
    fn from(b: &'a DiscreteBandit) -> Self {
        Self::Discrete(b)
    }
}

impl<'a> From<&'a ContinuousBandit2D> for BanditRef<'a> {
    fn from(b: &'a ContinuousBandit2D) -> Self {
        Self::Continuous(b)
    }
}

/// `n` one-step episodes from the bandit's behavior policy.
pub fn generate_bandit_dataset<'a>(
    bandit: impl Into<BanditRef<'a>>,
    n: usize,
    seed: u64,
    rng: &mut SeededRng,
) -> Result<OfflineDataset, EnvError> {
    if n == 0 {
        return Err(EnvError::EmptyDataset);
    }
    let (mut ds, details) = match bandit.into() {
        BanditRef::Discrete(b) => {
            let pick = WeightedIndex::new(&b.behavior_probs)
                .map_err(|e| EnvError::Config(e.to_string()))?;
            let mut ds = OfflineDataset::empty(&b.id(), seed, 1, b.n_arms());
            for _ in 0..n {
                let arm = pick.sample(rng);
                let reward = b.pull(arm, rng);
                ds.push(Transition {
                    state: vec![0.0],
                    action: b.one_hot(arm),
                    reward,
                    next_state: vec![0.0],
                    done: true,
                })?;
            }
            (ds, serde_json::json!({ "bandit": b }))
        }
        BanditRef::Continuous(b) => {
            let mut ds = OfflineDataset::empty(&b.id(), seed, 1, 2);
            for _ in 0..n {
                let a = b.sample_behavior(rng);
                ds.push(Transition {
                    state: vec![0.0],
                    action: a.to_vec(),
                    reward: ContinuousBandit2D::reward(&a),
                    next_state: vec![0.0],
                    done: true,
                })?;
            }
            (ds, serde_json::json!({ "bandit": b }))
        }
    };
    let returns = ds.rewards().to_vec();
    ds.meta = DatasetMeta {
        generator: "bandit behavior policy".into(),
        details,
        discounted_returns: returns.clone(),
        episode_returns: returns,
    };
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng_from_seed;

    #[test]
    fn noiseless_single_arm() {
        let b = DiscreteBandit::uniform(vec![1.0], 0.0).unwrap();
        let ds = generate_bandit_dataset(&b, 100, 0, &mut rng_from_seed(0)).unwrap();
        assert!(ds.rewards().iter().all(|&r| r == 1.0));
        assert!(ds.dones().iter().all(|&d| d));
    }

    #[test]
    fn arm_frequencies() {
        let b = DiscreteBandit::three_cluster();
        let ds = generate_bandit_dataset(&b, 30_000, 1, &mut rng_from_seed(1)).unwrap();
        let mut counts = [0usize; 3];
        for i in 0..ds.len() {
            counts[b.arm_of(ds.action(i))] += 1;
        }
        for c in counts {
            assert!((c as f64 / 30_000.0 - 1.0 / 3.0).abs() < 0.01, "{counts:?}");
        }
    }

    #[test]
    fn invalid_bandits() {
        assert!(DiscreteBandit::new(vec![1.0, 2.0], 0.1, vec![0.5]).is_err());
        assert!(DiscreteBandit::new(vec![1.0], -0.1, vec![1.0]).is_err());
        assert!(DiscreteBandit::new(vec![1.0, 2.0], 0.1, vec![0.7, 0.7]).is_err());
        assert!(ContinuousBandit2D::new(vec![], 0.1).is_err());
        assert!(ContinuousBandit2D::new(vec![[0.0, 0.0]], 0.0).is_err());
        let b = DiscreteBandit::three_cluster();
        assert!(generate_bandit_dataset(&b, 0, 0, &mut rng_from_seed(0)).is_err());
    }

    #[test]
    fn three_mode_geometry() {
        let b = ContinuousBandit2D::three_mode();
        assert_eq!(b.best_mode(), 2);
        assert_eq!(b.nearest_mode(&[0.51, 0.79]).0, 1);
    }
}
