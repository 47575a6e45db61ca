use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::DiffusionError;
use crate::tensorgrad::Tensor;

/// Offset of the cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;
/// Upper clip on cosine-schedule betas.
pub const COSINE_MAX_BETA: f64 = 0.999;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ScheduleKind {
    /// β_t affine from `beta_min` (t = 1) to `beta_max` (t = T).
    Linear { beta_min: f64, beta_max: f64 },
    Cosine,
    /// Discretized variance-preserving SDE.
    Vp { beta_min: f64, beta_max: f64 },
}

impl ScheduleKind {
    pub fn vp() -> Self {
        ScheduleKind::Vp {
            beta_min: 0.1,
            beta_max: 20.0,
        }
    }

    /// The usual 1e-4..0.02 range for T = 1000, rescaled by 1000/T.
    pub fn linear_for(steps: usize) -> Self {
        let scale = 1000.0 / steps.max(1) as f64;
        ScheduleKind::Linear {
            beta_min: 1e-4 * scale,
            beta_max: 0.02 * scale,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ScheduleKind::Linear { .. } => "linear",
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::Vp { .. } => "vp",
        }
    }

    /// Parses `linear`, `cosine` or `vp` with default parameters for `steps`.
    pub fn parse(name: &str, steps: usize) -> Result<Self, DiffusionError> {
        match name {
            "linear" => Ok(Self::linear_for(steps)),
            "cosine" => Ok(Self::Cosine),
            "vp" => Ok(Self::vp()),
            other => Err(DiffusionError::Config(format!(
                "unknown schedule `{other}` (expected linear, cosine or vp)"
            ))),
        }
    }
}

/// Noise coefficients for t = 1..T, stored 0-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub kind: ScheduleKind,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

fn cosine_g(u: f64) -> f64 {
    let x = (u + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
    x.cos().powi(2)
}

impl DiffusionSchedule {
    pub fn new(kind: ScheduleKind, steps: usize) -> Result<Self, DiffusionError> {
        if steps == 0 {
            return Err(DiffusionError::Config("diffusion steps must be at least 1".into()));
        }
        let tf = steps as f64;
        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear { beta_min, beta_max } => (1..=steps)
                .map(|t| {
                    if steps == 1 {
                        beta_min
                    } else {
                        beta_min + (beta_max - beta_min) * (t - 1) as f64 / (tf - 1.0)
                    }
                })
                .collect(),
            ScheduleKind::Cosine => {
                let g0 = cosine_g(0.0);
                let bar = |t: usize| cosine_g(t as f64 / tf) / g0;
                (1..=steps)
                    .map(|t| (1.0 - bar(t) / bar(t - 1)).min(COSINE_MAX_BETA))
                    .collect()
            }
            ScheduleKind::Vp { beta_min, beta_max } => (1..=steps)
                .map(|t| {
                    let x = beta_min / tf + (beta_max - beta_min) * (2.0 * t as f64 - 1.0) / (2.0 * tf * tf);
                    -(-x).exp_m1()
                })
                .collect(),
        };
        Self::from_betas(kind, betas)
    }

    /// Builds a schedule from explicit betas; `kind` is recorded as given.
    pub fn from_betas(kind: ScheduleKind, betas: Vec<f64>) -> Result<Self, DiffusionError> {
        if betas.is_empty() {
            return Err(DiffusionError::Config("diffusion steps must be at least 1".into()));
        }
        for (i, &b) in betas.iter().enumerate() {
            if !(b > 0.0 && b < 1.0) {
                return Err(DiffusionError::Beta { t: i + 1, beta: b });
            }
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            kind,
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_t(&self, t: usize) -> Result<usize, DiffusionError> {
        if t == 0 || t > self.steps() {
            return Err(DiffusionError::Step { t, steps: self.steps() });
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64, DiffusionError> {
        Ok(self.betas[self.check_t(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64, DiffusionError> {
        Ok(self.alphas[self.check_t(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64, DiffusionError> {
        Ok(self.alpha_bars[self.check_t(t)?])
    }

    /// Closed-form marginal `√ᾱ_t·a₀ + √(1−ᾱ_t)·ε`.
    pub fn forward_noise(&self, a0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>, DiffusionError> {
        let ab = self.alpha_bar(t)?;
        noise_combine(a0, eps, ab.sqrt(), (1.0 - ab).sqrt())
    }

    /// One transition `q(a_t | a_{t−1}) = N(√α_t·a_{t−1}, β_t·I)`.
    pub fn noise_step(&self, prev: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>, DiffusionError> {
        let i = self.check_t(t)?;
        noise_combine(prev, eps, self.alphas[i].sqrt(), self.betas[i].sqrt())
    }

    /// One reverse update `a ← (a − β_t/√(1−ᾱ_t)·ε̂)/√α_t + √β_t·z`, in
    /// place. With `noise` false the `z` term is dropped and `z` is never
    /// called.
    pub fn reverse_step(
        &self,
        a: &mut [f64],
        eps_hat: &[f64],
        t: usize,
        noise: bool,
        mut z: impl FnMut() -> f64,
    ) -> Result<(), DiffusionError> {
        let i = self.check_t(t)?;
        if a.len() != eps_hat.len() {
            return Err(DiffusionError::Config(format!(
                "reverse step: {} actions vs {} noise predictions",
                a.len(),
                eps_hat.len()
            )));
        }
        let k = self.betas[i] / (1.0 - self.alpha_bars[i]).sqrt();
        let inv = 1.0 / self.alphas[i].sqrt();
        let sigma = self.betas[i].sqrt();
        for (ai, ei) in a.iter_mut().zip(eps_hat) {
            *ai = inv * (*ai - k * ei);
            if noise {
                *ai += sigma * z();
            }
        }
        Ok(())
    }

    /// Draws t ∼ U{1..T} and ε ∼ N(0, I) per row and noises `actions`.
    pub fn noise_batch<R: Rng + ?Sized>(&self, actions: &Tensor, rng: &mut R) -> NoisedBatch {
        let (n, d) = (actions.rows(), actions.cols());
        let mut steps = Vec::with_capacity(n);
        let mut eps = Vec::with_capacity(n * d);
        let mut noised = Vec::with_capacity(n * d);
        for r in 0..n {
            let t = rng.random_range(1..=self.steps());
            let ab = self.alpha_bars[t - 1];
            let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
            steps.push(t);
            for &a in actions.row(r) {
                let e: f64 = rng.sample(StandardNormal);
                eps.push(e);
                noised.push(sa * a + sn * e);
            }
        }
        NoisedBatch {
            steps,
            eps: Tensor::matrix(n, d, eps).expect("sized above"),
            noised: Tensor::matrix(n, d, noised).expect("sized above"),
        }
    }
}

fn noise_combine(x: &[f64], eps: &[f64], sx: f64, se: f64) -> Result<Vec<f64>, DiffusionError> {
    if x.len() != eps.len() {
        return Err(DiffusionError::Width {
            got: eps.len(),
            want: x.len(),
        });
    }
    Ok(x.iter().zip(eps).map(|(a, e)| sx * a + se * e).collect())
}

/// Training inputs for the noise-prediction loss.
#[derive(Clone, Debug)]
pub struct NoisedBatch {
    /// Diffusion step per row, in 1..=T.
    pub steps: Vec<usize>,
    pub eps: Tensor,
    pub noised: Tensor,
}
