use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ExperimentError;
use crate::critic::CriticConfig;
use crate::diffusion::{
    DdpmConfig, DiffusionSchedule, LossNorm, SamplerConfig, ScheduleKind, ScoreArch, ScoreNetConfig,
};
use crate::envs::Toy2DGenerator;
use crate::extraction::ExtractionSpec;
use crate::finetune::FinetuneMode;
use crate::losses::ConvexLoss;
use crate::tensorgrad::Activation;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    BanditSweep,
    DdpmTrain,
    DdpmSample,
    #[default]
    TrainOffline,
    Evaluate,
    Finetune,
    Audit,
    Figure1,
    Figure2,
    Figure4,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 10] = [
        Self::BanditSweep,
        Self::DdpmTrain,
        Self::DdpmSample,
        Self::TrainOffline,
        Self::Evaluate,
        Self::Finetune,
        Self::Audit,
        Self::Figure1,
        Self::Figure2,
        Self::Figure4,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::BanditSweep => "bandit-sweep",
            Self::DdpmTrain => "ddpm-train",
            Self::DdpmSample => "ddpm-sample",
            Self::TrainOffline => "train-offline",
            Self::Evaluate => "evaluate",
            Self::Finetune => "finetune",
            Self::Audit => "audit",
            Self::Figure1 => "figure1",
            Self::Figure2 => "figure2",
            Self::Figure4 => "figure4",
        }
    }
}

impl std::str::FromStr for ExperimentKind {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| ExperimentError::field("kind", format!("unknown experiment `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    #[default]
    Gridworld,
    Bandit,
    Bandit2d,
    Toy2d,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractionKind {
    #[default]
    Greedy,
    Implicit,
    /// One behavior sample, no critic.
    Raw,
}

/// One flat record describing a run. Every field has a default, so a
/// config file only lists what it changes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub seed: u64,

    pub env: EnvKind,
    pub toy_generator: Toy2DGenerator,
    /// Transitions (gridworld steps, bandit pulls or toy points).
    pub dataset_size: usize,
    pub dataset_path: Option<String>,
    pub optimal_fraction: f64,
    pub behavior_epsilon: f64,
    pub bandit_means: Vec<f64>,
    pub bandit_noise: f64,
    pub grid_size: usize,
    pub slip: f64,
    pub max_episode_steps: usize,

    pub loss_family: String,
    pub loss_param: f64,
    pub critic_hidden: usize,
    pub critic_layers: usize,
    pub critic_lr: f64,
    pub critic_batch_size: usize,
    pub critic_steps: u64,
    pub ema: f64,
    pub gamma: f64,

    pub diffusion_steps: usize,
    pub schedule: String,
    pub beta_min: Option<f64>,
    pub beta_max: Option<f64>,
    pub arch: ScoreArch,
    pub hidden_dim: usize,
    pub n_blocks: usize,
    pub dropout: f64,
    pub time_embed_dim: usize,
    pub actor_lr: f64,
    pub actor_batch_size: usize,
    pub actor_steps: u64,
    pub actor_cosine_decay: bool,
    pub loss_norm: LossNorm,
    pub noise_at_last_step: bool,
    pub clip_actions: bool,

    pub extraction: ExtractionKind,
    pub n_samples: usize,
    pub eval_episodes: usize,

    pub finetune_mode: FinetuneMode,
    pub finetune_env_steps: u64,
    pub eval_every: u64,

    pub critic_checkpoint: Option<String>,
    pub behavior_checkpoint: Option<String>,
    pub sample_count: usize,
    pub audit_trials: usize,
    pub awr_temperatures: Vec<f64>,
    pub report_every: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::TrainOffline,
            seed: 0,
            env: EnvKind::Gridworld,
            toy_generator: Toy2DGenerator::Gaussians8,
            dataset_size: 20_000,
            dataset_path: None,
            optimal_fraction: 0.5,
            behavior_epsilon: 0.1,
            bandit_means: vec![1.0, 5.0, 10.0],
            bandit_noise: 0.5,
            grid_size: 5,
            slip: 0.0,
            max_episode_steps: 100,
            loss_family: "expectile".into(),
            loss_param: 0.7,
            critic_hidden: 256,
            critic_layers: 2,
            critic_lr: 3e-4,
            critic_batch_size: 256,
            critic_steps: 100_000,
            ema: 0.005,
            gamma: 0.99,
            diffusion_steps: 5,
            schedule: "vp".into(),
            beta_min: None,
            beta_max: None,
            arch: ScoreArch::LnResnet,
            hidden_dim: 256,
            n_blocks: 3,
            dropout: 0.1,
            time_embed_dim: 64,
            actor_lr: 3e-4,
            actor_batch_size: 1024,
            actor_steps: 100_000,
            actor_cosine_decay: true,
            loss_norm: LossNorm::L2,
            noise_at_last_step: false,
            clip_actions: true,
            extraction: ExtractionKind::Greedy,
            n_samples: 64,
            eval_episodes: 10,
            finetune_mode: FinetuneMode::Max,
            finetune_env_steps: 20_000,
            eval_every: 2000,
            critic_checkpoint: None,
            behavior_checkpoint: None,
            sample_count: 10_000,
            audit_trials: 1000,
            awr_temperatures: vec![0.5, 3.0, 10.0],
            report_every: 1000,
        }
    }
}

fn check(ok: bool, field: &'static str, constraint: &str) -> Result<(), ExperimentError> {
    if ok {
        Ok(())
    } else {
        Err(ExperimentError::field(field, constraint.to_string()))
    }
}

impl ExperimentConfig {
    pub fn for_kind(kind: ExperimentKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    /// Defaults scaled to run on a laptop CPU in minutes, per experiment.
    /// Every departure from [`ExperimentConfig::default`] is a plain field
    /// and lands in the stored config text.
    pub fn preset(kind: ExperimentKind) -> Self {
        let base = Self::for_kind(kind);
        let gridworld = Self {
            loss_param: 0.9,
            critic_hidden: 64,
            critic_lr: 1e-3,
            critic_steps: 20_000,
            hidden_dim: 32,
            actor_lr: 1e-3,
            actor_batch_size: 256,
            actor_steps: 5000,
            ..base.clone()
        };
        let toy = Self {
            env: EnvKind::Toy2d,
            diffusion_steps: 50,
            hidden_dim: 32,
            actor_lr: 1e-2,
            actor_batch_size: 4096,
            actor_steps: 1600,
            report_every: 100,
            ..base.clone()
        };
        match kind {
            ExperimentKind::TrainOffline | ExperimentKind::Evaluate => gridworld,
            ExperimentKind::Finetune => Self {
                optimal_fraction: 0.1,
                critic_steps: 500,
                actor_steps: 2000,
                ..gridworld
            },
            ExperimentKind::BanditSweep | ExperimentKind::Figure2 => Self {
                env: EnvKind::Bandit,
                ..base
            },
            ExperimentKind::Figure1 => Self {
                env: EnvKind::Bandit2d,
                dataset_size: 3000,
                loss_param: 0.9,
                critic_hidden: 32,
                critic_lr: 1e-3,
                critic_steps: 3000,
                hidden_dim: 32,
                actor_lr: 1e-3,
                actor_batch_size: 256,
                actor_steps: 3000,
                sample_count: 2000,
                ..base
            },
            ExperimentKind::DdpmTrain | ExperimentKind::DdpmSample | ExperimentKind::Figure4 => toy,
            ExperimentKind::Audit => base,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ExperimentError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one field from its text form, as in `key=value` on a command
    /// line. Values are parsed as TOML, falling back to a bare string.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ExperimentError> {
        let parsed = format!("v = {value}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        let mut overlay = toml::Table::new();
        overlay.insert(key.to_string(), parsed);
        self.merge(overlay)
            .map_err(|e| ExperimentError::Parse(format!("{key}={value}: {e}")))
    }

    /// Overlays the fields present in `text` onto `self`. Absent fields keep
    /// their current values. Does not validate.
    pub fn overlay_toml(&mut self, text: &str) -> Result<(), ExperimentError> {
        let overlay: toml::Table = text.parse().map_err(|e: toml::de::Error| ExperimentError::Parse(e.to_string()))?;
        self.merge(overlay).map_err(ExperimentError::Parse)
    }

    fn merge(&mut self, overlay: toml::Table) -> Result<(), String> {
        let mut table: toml::Table = toml::from_str(&self.to_toml()).map_err(|e| e.to_string())?;
        table.extend(overlay);
        *self = table.try_into().map_err(|e: toml::de::Error| e.to_string())?;
        Ok(())
    }

    /// Canonical text form: every field, in declaration order.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Checks every field before any work starts.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        check(self.dataset_size >= 1, "dataset_size", "must be at least 1")?;
        check((0.0..=1.0).contains(&self.optimal_fraction), "optimal_fraction", "must lie in [0, 1]")?;
        check((0.0..=1.0).contains(&self.behavior_epsilon), "behavior_epsilon", "must lie in [0, 1]")?;
        check(!self.bandit_means.is_empty(), "bandit_means", "needs at least one arm")?;
        check(self.bandit_means.iter().all(|m| m.is_finite()), "bandit_means", "must be finite")?;
        check(self.bandit_noise >= 0.0, "bandit_noise", "must be >= 0")?;
        check(self.grid_size >= 2, "grid_size", "must be at least 2")?;
        check((0.0..1.0).contains(&self.slip), "slip", "must lie in [0, 1)")?;
        check(self.max_episode_steps >= 1, "max_episode_steps", "must be at least 1")?;
        self.loss()?;
        check(self.critic_hidden >= 1, "critic_hidden", "must be at least 1")?;
        check(self.critic_layers >= 1, "critic_layers", "must be at least 1")?;
        check(self.critic_lr > 0.0, "critic_lr", "must be > 0")?;
        check(self.critic_batch_size >= 1, "critic_batch_size", "must be at least 1")?;
        check((0.0..=1.0).contains(&self.ema), "ema", "must lie in [0, 1]")?;
        check((0.0..1.0).contains(&self.gamma), "gamma", "must lie in [0, 1)")?;
        check(self.diffusion_steps >= 1, "diffusion_steps", "must be at least 1")?;
        self.schedule()?;
        check(self.hidden_dim >= 1, "hidden_dim", "must be at least 1")?;
        check(self.n_blocks >= 1, "n_blocks", "must be at least 1")?;
        check((0.0..1.0).contains(&self.dropout), "dropout", "must lie in [0, 1)")?;
        check(
            self.time_embed_dim >= 2 && self.time_embed_dim % 2 == 0,
            "time_embed_dim",
            "must be a positive even number",
        )?;
        check(self.actor_lr > 0.0, "actor_lr", "must be > 0")?;
        check(self.actor_batch_size >= 1, "actor_batch_size", "must be at least 1")?;
        check(self.n_samples >= 1, "n_samples", "must be at least 1")?;
        check(self.eval_episodes >= 1, "eval_episodes", "must be at least 1")?;
        check(self.eval_every >= 1, "eval_every", "must be at least 1")?;
        check(self.sample_count >= 1, "sample_count", "must be at least 1")?;
        check(self.audit_trials >= 1, "audit_trials", "must be at least 1")?;
        check(
            self.awr_temperatures.iter().all(|t| t.is_finite() && *t >= 0.0),
            "awr_temperatures",
            "must be finite and >= 0",
        )?;
        check(self.report_every >= 1, "report_every", "must be at least 1")?;
        match self.kind {
            ExperimentKind::DdpmSample => check(
                self.behavior_checkpoint.is_some(),
                "behavior_checkpoint",
                "required for ddpm-sample",
            )?,
            ExperimentKind::Evaluate => {
                check(self.behavior_checkpoint.is_some(), "behavior_checkpoint", "required for evaluate")?;
                check(self.critic_checkpoint.is_some(), "critic_checkpoint", "required for evaluate")?;
            }
            _ => {}
        }
        Ok(())
    }

    pub fn loss(&self) -> Result<ConvexLoss, ExperimentError> {
        ConvexLoss::from_parts(&self.loss_family, self.loss_param)
            .map_err(|e| ExperimentError::field("loss_param", e.to_string()))
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule, ExperimentError> {
        let mut kind = ScheduleKind::parse(&self.schedule, self.diffusion_steps)
            .map_err(|e| ExperimentError::field("schedule", e.to_string()))?;
        match &mut kind {
            ScheduleKind::Linear { beta_min, beta_max } | ScheduleKind::Vp { beta_min, beta_max } => {
                *beta_min = self.beta_min.unwrap_or(*beta_min);
                *beta_max = self.beta_max.unwrap_or(*beta_max);
            }
            ScheduleKind::Cosine => {}
        }
        DiffusionSchedule::new(kind, self.diffusion_steps)
            .map_err(|e| ExperimentError::field("schedule", e.to_string()))
    }

    pub fn critic_config(&self) -> Result<CriticConfig, ExperimentError> {
        Ok(CriticConfig {
            loss: self.loss()?,
            hidden: vec![self.critic_hidden; self.critic_layers],
            activation: Activation::Relu,
            twin: true,
            lr: self.critic_lr,
            batch_size: self.critic_batch_size,
            ema: self.ema,
            gamma: self.gamma,
            steps: self.critic_steps,
            report_every: self.report_every,
        })
    }

    pub fn score_net(&self, state_dim: usize, action_dim: usize) -> ScoreNetConfig {
        ScoreNetConfig {
            arch: self.arch,
            hidden_dim: self.hidden_dim,
            n_blocks: self.n_blocks,
            dropout: self.dropout,
            time_embed_dim: self.time_embed_dim,
            action_dim,
            state_dim,
            activation: Activation::Mish,
        }
    }

    pub fn sampler(&self, bounds: Option<(f64, f64)>) -> SamplerConfig {
        SamplerConfig {
            clip: if self.clip_actions { bounds } else { None },
            noise_at_last_step: self.noise_at_last_step,
        }
    }

    pub fn ddpm_config(&self) -> DdpmConfig {
        DdpmConfig {
            lr: self.actor_lr,
            batch_size: self.actor_batch_size,
            steps: self.actor_steps,
            cosine_decay: self.actor_cosine_decay,
            norm: self.loss_norm,
            report_every: self.report_every,
        }
    }

    pub fn extraction_spec(&self) -> Result<ExtractionSpec, ExperimentError> {
        Ok(match self.extraction {
            ExtractionKind::Greedy => ExtractionSpec::greedy(self.n_samples),
            ExtractionKind::Implicit => ExtractionSpec::implicit(self.n_samples, self.loss()?),
            ExtractionKind::Raw => ExtractionSpec::greedy(1),
        })
    }
}
