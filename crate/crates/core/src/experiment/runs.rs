use std::io::Write;

use serde::Serialize;

use super::envs::{
    gridworld, make_dataset, make_env, stream, ACTOR_STREAM, CRITIC_STREAM, EVAL_STREAM,
    ONLINE_STREAM,
};
use super::figures;
use super::{EnvKind, ExperimentConfig, ExperimentError, ExperimentKind, RunDir, read_input};
use crate::critic::{train_critic, write_reports_csv, CriticNets, TrainReport};
use crate::diffusion::{train_behavior, BehaviorModel, DdpmReport};
use crate::envs::{Env, OfflineDataset, ReplayBuffer};
use crate::extraction::evaluate_policy;
use crate::finetune::{finetune, write_curve_csv, CurvePoint, FinetuneConfig, FinetuneMode};
use crate::oracles::{audit_grid, audit_sweep, gradient_audit, value_iteration, AuditSummary, GradAuditRow, GradAuditSpec};
use crate::tensorgrad::{ParamSet, Tensor};

/// Critic and behavior model fitted to one dataset.
#[derive(Clone, Debug)]
pub struct OfflineModels {
    pub dataset: OfflineDataset,
    pub critic: CriticNets,
    pub critic_reports: Vec<TrainReport>,
    pub behavior: BehaviorModel,
    pub ddpm_reports: Vec<DdpmReport>,
}

fn action_bounds(config: &ExperimentConfig) -> Option<(f64, f64)> {
    make_env(config).ok().and_then(|e| e.action_bounds())
}

pub(crate) fn new_behavior(
    config: &ExperimentConfig,
    state_dim: usize,
    action_dim: usize,
    rng: &mut crate::SeededRng,
) -> Result<BehaviorModel, ExperimentError> {
    let mut model = BehaviorModel::new(config.score_net(state_dim, action_dim), config.schedule()?, rng)?;
    model.sampler = config.sampler(action_bounds(config));
    Ok(model)
}

pub(crate) fn fit_behavior(
    config: &ExperimentConfig,
    dataset: &OfflineDataset,
) -> Result<(BehaviorModel, Vec<DdpmReport>), ExperimentError> {
    let mut rng = stream(config.seed, ACTOR_STREAM);
    let mut model = new_behavior(config, dataset.state_dim(), dataset.action_dim(), &mut rng)?;
    let reports = train_behavior(&config.ddpm_config(), &mut model, dataset, &mut rng)?;
    Ok((model, reports))
}

/// Trains the critic and the behavior model on independent streams.
pub fn pretrain(config: &ExperimentConfig, dataset: OfflineDataset) -> Result<OfflineModels, ExperimentError> {
    let mut rng = stream(config.seed, CRITIC_STREAM);
    let (critic, critic_reports) = train_critic(&config.critic_config()?, &dataset, &mut rng)?;
    let (behavior, ddpm_reports) = fit_behavior(config, &dataset)?;
    Ok(OfflineModels {
        dataset,
        critic,
        critic_reports,
        behavior,
        ddpm_reports,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalSummary {
    pub env: String,
    pub extraction: String,
    pub n_samples: usize,
    pub episodes: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub mean_discounted_return: f64,
    pub std_discounted_return: f64,
    pub truncated: usize,
    /// Optimal discounted value of the start state, where one exists.
    pub v_star: Option<f64>,
    pub dataset_mean_return: Option<f64>,
    pub dataset_mean_discounted_return: Option<f64>,
    pub config_hash: String,
}

/// Optimal start-state value of the configured gridworld.
pub(crate) fn gridworld_v_star(config: &ExperimentConfig) -> Result<Option<f64>, ExperimentError> {
    if config.env != EnvKind::Gridworld {
        return Ok(None);
    }
    let g = gridworld(config)?;
    let table = value_iteration(&g.to_tabular(), 1e-12)?;
    Ok(Some(table.values[g.index(g.start)]))
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

/// Rolls out the extracted policy on the evaluation stream.
pub fn evaluate_run(
    config: &ExperimentConfig,
    critic: &CriticNets,
    behavior: &BehaviorModel,
    dataset: Option<&OfflineDataset>,
) -> Result<EvalSummary, ExperimentError> {
    let mut env = make_env(config)?;
    let spec = config.extraction_spec()?;
    let mut rng = stream(config.seed, EVAL_STREAM);
    let report = evaluate_policy(
        &spec,
        &mut env,
        behavior,
        critic,
        config.eval_episodes,
        config.max_episode_steps,
        &mut rng,
    )?;
    Ok(EvalSummary {
        env: env.id(),
        extraction: format!("{:?}", config.extraction).to_lowercase(),
        n_samples: spec.n_samples,
        episodes: report.episodes,
        mean_return: report.mean_return,
        std_return: report.std_return,
        mean_discounted_return: report.mean_discounted_return,
        std_discounted_return: report.std_discounted_return,
        truncated: report.truncated,
        v_star: gridworld_v_star(config)?,
        dataset_mean_return: dataset.and_then(|d| finite(d.meta.mean_return())),
        dataset_mean_discounted_return: dataset.and_then(|d| finite(d.meta.mean_discounted_return())),
        config_hash: config.hash(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FinetuneSummary {
    pub mode: FinetuneMode,
    pub env_steps: u64,
    pub v_star: Option<f64>,
    pub curve: Vec<CurvePoint>,
    pub pretrained_discounted: f64,
    pub final_discounted: f64,
    pub behavior_unchanged: bool,
    pub buffer_len: usize,
    pub online_transitions: usize,
}

/// Online finetuning from pretrained models. The models are updated in
/// place, so a caller still holds them if the loop fails.
pub fn finetune_run(
    config: &ExperimentConfig,
    models: &mut OfflineModels,
) -> Result<FinetuneSummary, ExperimentError> {
    let mut env = make_env(config)?;
    let ft = FinetuneConfig {
        mode: config.finetune_mode,
        env_steps: config.finetune_env_steps,
        eval_every: config.eval_every,
        eval_episodes: config.eval_episodes,
        eval_max_steps: config.max_episode_steps,
        n_samples: config.n_samples,
        critic: config.critic_config()?,
        ddpm: config.ddpm_config(),
    };
    let before = models.behavior.to_bytes();
    let buffer = ReplayBuffer::from_dataset(models.dataset.clone());
    let mut rng = stream(config.seed, ONLINE_STREAM);
    let out = finetune(&mut models.critic, &mut models.behavior, buffer, &mut env, &ft, &mut rng)?;
    let first = out.curve.first().map_or(f64::NAN, |p| p.eval_discounted_mean);
    let last = out.curve.last().map_or(f64::NAN, |p| p.eval_discounted_mean);
    Ok(FinetuneSummary {
        mode: config.finetune_mode,
        env_steps: config.finetune_env_steps,
        v_star: gridworld_v_star(config)?,
        pretrained_discounted: first,
        final_discounted: last,
        behavior_unchanged: models.behavior.to_bytes() == before,
        buffer_len: out.buffer.len(),
        online_transitions: out.buffer.online_len(),
        curve: out.curve,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditReport {
    pub fixed_point: Vec<AuditSummary>,
    /// Largest fixed-point or stationarity residual over the loss grid.
    pub max_residual: f64,
    pub gradients: Vec<GradAuditRow>,
    pub max_grad_rel_error: f64,
    pub gradient_spec: GradAuditSpec,
}

pub(crate) fn audit(config: &ExperimentConfig) -> Result<AuditReport, ExperimentError> {
    let mut rng = stream(config.seed, EVAL_STREAM);
    let fixed_point = audit_sweep(&audit_grid(), config.audit_trials, &mut rng);
    let max_residual = fixed_point
        .iter()
        .map(|s| s.max_fixed_point.max(s.max_stationarity))
        .fold(0.0, f64::max);
    let spec = GradAuditSpec::default();
    let gradients = gradient_audit(&spec, &mut rng)?;
    let max_grad_rel_error = gradients.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    Ok(AuditReport {
        fixed_point,
        max_residual,
        gradients,
        max_grad_rel_error,
        gradient_spec: spec,
    })
}

fn write_ddpm_csv(reports: &[DdpmReport], w: &mut Vec<u8>) -> std::io::Result<()> {
    writeln!(w, "step,loss")?;
    for r in reports {
        writeln!(w, "{},{}", r.step, r.loss)?;
    }
    Ok(())
}

pub(crate) fn write_samples_csv(rows: &Tensor, w: &mut Vec<u8>) -> std::io::Result<()> {
    let header: Vec<String> = match rows.cols() {
        2 => vec!["x".into(), "y".into()],
        d => (0..d).map(|i| format!("a{i}")).collect(),
    };
    writeln!(w, "{}", header.join(","))?;
    for r in 0..rows.rows() {
        let cells: Vec<String> = rows.row(r).iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}

fn save_models(dir: &mut RunDir, models: &OfflineModels) -> Result<(), ExperimentError> {
    dir.write("critic.ckpt", &models.critic.bundle()?.to_bytes())?;
    dir.write("behavior.ckpt", &models.behavior.to_bytes())?;
    Ok(())
}

fn load_critic(config: &ExperimentConfig, state_dim: usize, action_dim: usize) -> Result<CriticNets, ExperimentError> {
    let path = config.critic_checkpoint.as_deref().expect("validated");
    let bundle = ParamSet::read_from(&read_input(path)?[..])?;
    Ok(CriticNets::from_bundle(state_dim, action_dim, &config.critic_config()?, &bundle)?)
}

fn load_behavior(config: &ExperimentConfig) -> Result<BehaviorModel, ExperimentError> {
    let path = config.behavior_checkpoint.as_deref().expect("validated");
    Ok(BehaviorModel::read_from(&read_input(path)?[..])?)
}

pub(crate) fn dispatch(config: &ExperimentConfig, dir: &mut RunDir) -> Result<(), ExperimentError> {
    match config.kind {
        ExperimentKind::TrainOffline => {
            let models = pretrain(config, make_dataset(config)?)?;
            dir.write("dataset.bin", &models.dataset.to_bytes())?;
            save_models(dir, &models)?;
            dir.write_with("critic_train.csv", |w| write_reports_csv(&models.critic_reports, w))?;
            dir.write_with("ddpm_train.csv", |w| write_ddpm_csv(&models.ddpm_reports, w))?;
            if config.env != EnvKind::Toy2d {
                let summary = evaluate_run(config, &models.critic, &models.behavior, Some(&models.dataset))?;
                dir.write_json("eval.json", &summary)?;
            }
        }
        ExperimentKind::Evaluate => {
            let behavior = load_behavior(config)?;
            let c = behavior.config();
            let critic = load_critic(config, c.state_dim, c.action_dim)?;
            let summary = evaluate_run(config, &critic, &behavior, None)?;
            dir.write_json("eval.json", &summary)?;
        }
        ExperimentKind::DdpmTrain => {
            let dataset = make_dataset(config)?;
            let (model, reports) = fit_behavior(config, &dataset)?;
            dir.write("behavior.ckpt", &model.to_bytes())?;
            dir.write_with("ddpm_train.csv", |w| write_ddpm_csv(&reports, w))?;
        }
        ExperimentKind::DdpmSample => {
            let model = load_behavior(config)?;
            let states = Tensor::zeros(&[config.sample_count, model.config().state_dim]);
            let rows = model.sample_rows(&states, &mut stream(config.seed, EVAL_STREAM))?;
            dir.write_with("samples.csv", |w| write_samples_csv(&rows, w))?;
        }
        ExperimentKind::Finetune => {
            let mut models = pretrain(config, make_dataset(config)?)?;
            dir.write("pretrained_critic.ckpt", &models.critic.bundle()?.to_bytes())?;
            dir.write("pretrained_behavior.ckpt", &models.behavior.to_bytes())?;
            match finetune_run(config, &mut models) {
                Ok(summary) => {
                    save_models(dir, &models)?;
                    dir.write_with("curve.csv", |w| write_curve_csv(&summary.curve, w))?;
                    dir.write_json("finetune.json", &summary)?;
                }
                Err(e) => {
                    // keep whatever state the loop reached for inspection
                    dir.write("snapshot_critic.ckpt", &models.critic.bundle()?.to_bytes())?;
                    dir.write("snapshot_behavior.ckpt", &models.behavior.to_bytes())?;
                    return Err(e);
                }
            }
        }
        ExperimentKind::Audit => {
            dir.write_json("audit.json", &audit(config)?)?;
        }
        ExperimentKind::BanditSweep => {
            let rows = figures::bandit_sweep(config)?;
            dir.write_with("sweep.csv", |w| figures::write_bandit_sweep_csv(&rows, w))?;
        }
        ExperimentKind::Figure1 => {
            let report = figures::figure1(config)?;
            dir.write_json("figure1.json", &report)?;
            let resampled = report.resampled_tensor()?;
            dir.write_with("resampled.csv", |w| write_samples_csv(&resampled, w))?;
        }
        ExperimentKind::Figure2 => {
            let report = figures::figure2(config)?;
            dir.write_with("figure2.csv", |w| figures::write_sweep_csv(&report.rows, w))?;
            dir.write_json("figure2.json", &report)?;
        }
        ExperimentKind::Figure4 => {
            let report = figures::figure4(config, |arch, seed, samples| {
                let name = format!("samples_{}_seed{seed}.csv", arch.name());
                dir.write_with(&name, |w| write_samples_csv(samples, w))
            })?;
            dir.write_with("figure4.csv", |w| figures::write_figure4_csv(&report, w))?;
            dir.write_json("figure4.json", &report)?;
        }
    }
    Ok(())
}
