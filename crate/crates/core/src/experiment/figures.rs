use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;

use super::envs::{discrete_bandit, stream, CRITIC_STREAM, DATA_STREAM, EVAL_STREAM};
use super::runs::fit_behavior;
use super::{ExperimentConfig, ExperimentError};
use crate::critic::train_critic;
use crate::diffusion::{awr_weights, ScoreArch};
use crate::envs::{generate_bandit_dataset, make_toy2d, ContinuousBandit2D, Toy2DDataset, Toy2DGenerator};
use crate::extraction::{choose, ActionCritic, ExtractionSpec};
use crate::losses::{implicit_policy, ConvexLoss, DiscreteActionDistribution};
use crate::tensorgrad::Tensor;

pub const TAU_GRID: [f64; 7] = [0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99];

/// Nine log-spaced values from 0.1 to 10.
pub fn alpha_grid() -> Vec<f64> {
    (0..9).map(|k| 0.1 * 10f64.powf(k as f64 / 4.0)).collect()
}

fn family_grid() -> Vec<(&'static str, Vec<f64>)> {
    vec![
        ("expectile", TAU_GRID.to_vec()),
        ("quantile", TAU_GRID.to_vec()),
        ("exponential", alpha_grid()),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BanditSweepRow {
    pub family: &'static str,
    pub param: f64,
    pub v_star: f64,
    pub e_pi_imp_q: f64,
    pub fixed_point_gap: f64,
}

/// `V*` and the implicit actor's mean Q on the configured bandit's arm
/// means, for every family over its parameter grid.
pub fn bandit_sweep(config: &ExperimentConfig) -> Result<Vec<BanditSweepRow>, ExperimentError> {
    let bandit = discrete_bandit(config)?;
    let dist = DiscreteActionDistribution::new(bandit.reward_means.clone(), bandit.behavior_probs.clone())?;
    let mut rows = Vec::new();
    for (family, grid) in family_grid() {
        for param in grid {
            let pi = implicit_policy(&ConvexLoss::from_parts(family, param)?, &dist)?;
            let e = pi.expected_q(&dist);
            rows.push(BanditSweepRow {
                family,
                param,
                v_star: pi.v_star,
                e_pi_imp_q: e,
                fixed_point_gap: (pi.v_star - e).abs(),
            });
        }
    }
    Ok(rows)
}

pub fn write_bandit_sweep_csv(rows: &[BanditSweepRow], w: &mut Vec<u8>) -> std::io::Result<()> {
    writeln!(w, "family,param,V_star,E_pi_imp_Q,fixed_point_gap")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.family, r.param, r.v_star, r.e_pi_imp_q, r.fixed_point_gap)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub family: &'static str,
    pub param: f64,
    pub v_star: f64,
    pub mean_implicit_reward: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Dominance {
    pub family: &'static str,
    pub param: f64,
    /// `(mean_implicit_reward − behavior_mean) / noise_std`
    pub margin_in_noise_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Figure2Report {
    pub samples: usize,
    pub behavior_mean: f64,
    pub noise_std: f64,
    pub rows: Vec<SweepRow>,
    pub monotone: BTreeMap<&'static str, bool>,
    /// Measured at the largest parameter of each family.
    pub dominance: Vec<Dominance>,
    pub pass: bool,
}

/// The three families swept on the empirical reward distribution of a
/// sampled bandit dataset, each reward sample one equally likely atom.
pub fn figure2(config: &ExperimentConfig) -> Result<Figure2Report, ExperimentError> {
    let bandit = discrete_bandit(config)?;
    let mut rng = stream(config.seed, DATA_STREAM);
    let ds = generate_bandit_dataset(&bandit, config.dataset_size, config.seed, &mut rng)?;
    let rewards = ds.rewards().to_vec();
    let behavior_mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    let dist = DiscreteActionDistribution::uniform(rewards)?;

    let mut rows = Vec::new();
    let mut monotone = BTreeMap::new();
    let mut dominance = Vec::new();
    for (family, grid) in family_grid() {
        let mut prev = f64::NEG_INFINITY;
        let mut mono = true;
        for &param in &grid {
            let pi = implicit_policy(&ConvexLoss::from_parts(family, param)?, &dist)?;
            mono &= pi.v_star >= prev - 1e-12;
            prev = pi.v_star;
            rows.push(SweepRow {
                family,
                param,
                v_star: pi.v_star,
                mean_implicit_reward: pi.expected_q(&dist),
                std: pi.std_q(&dist),
            });
        }
        monotone.insert(family, mono);
        let top = rows.last().expect("non-empty grid");
        dominance.push(Dominance {
            family,
            param: top.param,
            margin_in_noise_std: (top.mean_implicit_reward - behavior_mean) / bandit.noise_std,
        });
    }
    let pass = monotone.values().all(|&m| m) && dominance.iter().all(|d| d.margin_in_noise_std >= 2.0);
    Ok(Figure2Report {
        samples: dist.len(),
        behavior_mean,
        noise_std: bandit.noise_std,
        rows,
        monotone,
        dominance,
        pass,
    })
}

pub fn write_sweep_csv(rows: &[SweepRow], w: &mut Vec<u8>) -> std::io::Result<()> {
    writeln!(w, "family,param,v_star,mean_implicit_reward,std")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.family, r.param, r.v_star, r.mean_implicit_reward, r.std)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AwrFit {
    pub alpha: f64,
    pub mean: [f64; 2],
    pub std: [f64; 2],
    pub nearest_mode: usize,
    /// Distance from the fitted mean to the nearest mode center, in mode stds.
    pub nearest_distance: f64,
    /// The mean lies more than three mode stds from every center.
    pub off_modes: bool,
}

/// Weighted maximum-likelihood diagonal Gaussian with AWR weights
/// `min(exp(α·A), max_weight)`.
pub fn awr_gaussian_fit(
    bandit: &ContinuousBandit2D,
    actions: &[[f64; 2]],
    advantages: &[f64],
    alpha: f64,
    max_weight: f64,
) -> AwrFit {
    let w = awr_weights(advantages, alpha, max_weight);
    let total: f64 = w.iter().sum();
    let mut mean = [0.0; 2];
    for (a, wi) in actions.iter().zip(&w) {
        for k in 0..2 {
            mean[k] += wi * a[k] / total;
        }
    }
    let mut var = [0.0; 2];
    for (a, wi) in actions.iter().zip(&w) {
        for k in 0..2 {
            var[k] += wi * (a[k] - mean[k]).powi(2) / total;
        }
    }
    let (nearest_mode, nearest_distance) = bandit.nearest_mode(&mean);
    AwrFit {
        alpha,
        mean,
        std: [var[0].sqrt(), var[1].sqrt()],
        nearest_mode,
        nearest_distance,
        off_modes: nearest_distance > 3.0,
    }
}

pub const AWR_MAX_WEIGHT: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Figure1Report {
    pub tau: f64,
    pub n_samples: usize,
    pub draws: usize,
    pub best_mode: usize,
    /// Fraction of resampled actions nearest the top-reward mode.
    pub top_mode_mass: f64,
    /// Occupancy of each mode among resampled actions.
    pub mode_occupancy: Vec<f64>,
    /// Occupancy of each mode among raw behavior samples.
    pub behavior_occupancy: Vec<f64>,
    /// Same as `top_mode_mass` under argmax extraction; informational.
    pub greedy_top_mode_mass: f64,
    /// Top-mode mass of the exact implicit policy over the dataset actions
    /// with `Q = r`. Resampling from a perfect critic and behavior model
    /// converges to this value.
    pub ideal_top_mode_mass: f64,
    pub awr: Vec<AwrFit>,
    pub pass: bool,
    #[serde(skip)]
    pub resampled: Vec<[f64; 2]>,
}

impl Figure1Report {
    pub fn resampled_tensor(&self) -> Result<Tensor, ExperimentError> {
        Ok(Tensor::from_rows(&self.resampled)?)
    }
}

fn occupancy(bandit: &ContinuousBandit2D, actions: &[Vec<f64>]) -> Vec<f64> {
    let mut counts = vec![0usize; bandit.mode_centers.len()];
    for a in actions {
        counts[bandit.nearest_mode(a).0] += 1;
    }
    counts.iter().map(|&c| c as f64 / actions.len().max(1) as f64).collect()
}

/// Diffusion plus resampling against a unimodal AWR fit on the three-mode
/// continuous bandit.
pub fn figure1(config: &ExperimentConfig) -> Result<Figure1Report, ExperimentError> {
    let bandit = ContinuousBandit2D::three_mode();
    let mut rng = stream(config.seed, DATA_STREAM);
    let ds = generate_bandit_dataset(&bandit, config.dataset_size, config.seed, &mut rng)?;
    let loss = config.loss()?;
    let (critic, _) = train_critic(&config.critic_config()?, &ds, &mut stream(config.seed, CRITIC_STREAM))?;
    let (behavior, _) = fit_behavior(config, &ds)?;

    let mut rng = stream(config.seed, EVAL_STREAM);
    let draws = config.sample_count;
    let state = [0.0];
    let implicit = ExtractionSpec::implicit(config.n_samples, loss);
    let greedy = ExtractionSpec::greedy(config.n_samples);
    let mut picked = Vec::with_capacity(draws);
    let mut greedy_picked = Vec::with_capacity(draws);
    for _ in 0..draws {
        picked.push(choose(&implicit, &state, &behavior, &critic, &mut rng)?.action);
        greedy_picked.push(choose(&greedy, &state, &behavior, &critic, &mut rng)?.action);
    }
    let raw = behavior.sample(&state, draws, &mut rng)?;
    let best = bandit.best_mode();
    let mode_occupancy = occupancy(&bandit, &picked);
    let greedy_occ = occupancy(&bandit, &greedy_picked);

    let actions: Vec<[f64; 2]> = (0..ds.len()).map(|i| [ds.action(i)[0], ds.action(i)[1]]).collect();
    let q = critic.q_values(&state, &actions.iter().map(|a| a.to_vec()).collect::<Vec<_>>())?;
    let v = critic.value(&state)?;
    let adv: Vec<f64> = q.iter().map(|qi| qi - v).collect();
    let awr: Vec<AwrFit> = config
        .awr_temperatures
        .iter()
        .map(|&alpha| awr_gaussian_fit(&bandit, &actions, &adv, alpha, AWR_MAX_WEIGHT))
        .collect();

    let exact = DiscreteActionDistribution::uniform(actions.iter().map(|a| ContinuousBandit2D::reward(a)).collect())?;
    let ideal = implicit_policy(&loss, &exact)?;
    let ideal_top_mode_mass = actions
        .iter()
        .zip(&ideal.probs)
        .filter(|(a, _)| bandit.nearest_mode(&a[..]).0 == best)
        .map(|(_, p)| p)
        .sum();

    let top_mode_mass = mode_occupancy[best];
    let pass = top_mode_mass >= 0.8 && awr.iter().all(|f| f.off_modes);
    Ok(Figure1Report {
        tau: loss.param(),
        n_samples: config.n_samples,
        draws,
        best_mode: best,
        top_mode_mass,
        mode_occupancy,
        behavior_occupancy: occupancy(&bandit, &raw),
        greedy_top_mode_mass: greedy_occ[best],
        ideal_top_mode_mass,
        awr,
        pass,
        resampled: picked.into_iter().map(|a| [a[0], a[1]]).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Figure4Seed {
    pub seed: u64,
    pub arch: ScoreArch,
    pub final_loss: f64,
    /// Samples more than 4σ from every ring mode.
    pub outlier_fraction: f64,
    /// Samples within 3σ of their nearest mode.
    pub coverage: f64,
    /// Occupied modes among the eight, counting samples within 3σ.
    pub modes_hit: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Figure4Report {
    pub seeds: Vec<Figure4Seed>,
    pub median_outlier_lnresnet: f64,
    pub median_outlier_mlp: f64,
    pub median_coverage_lnresnet: f64,
    pub outlier_ordering: bool,
    pub coverage_ok: bool,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Trains one architecture on one 8-Gaussian seed and scores its samples.
pub fn figure4_seed(
    config: &ExperimentConfig,
    arch: ScoreArch,
    seed: u64,
) -> Result<(Figure4Seed, Tensor), ExperimentError> {
    if config.toy_generator != Toy2DGenerator::Gaussians8 {
        return Err(ExperimentError::field("toy_generator", "figure4 scores samples against the gaussians8 ring"));
    }
    let run = ExperimentConfig {
        arch,
        seed,
        ..config.clone()
    };
    let ds = make_toy2d(Toy2DGenerator::Gaussians8, run.dataset_size, seed)?.to_dataset();
    let (model, reports) = fit_behavior(&run, &ds)?;
    let states = Tensor::zeros(&[run.sample_count, 1]);
    let samples = model.sample_rows(&states, &mut stream(seed, EVAL_STREAM))?;
    let (mut inside, mut outliers) = (0usize, 0usize);
    let mut hit = [false; 8];
    for r in 0..samples.rows() {
        let (mode, d) = Toy2DDataset::nearest_ring_mode(samples.row(r));
        if d <= 3.0 {
            inside += 1;
            hit[mode] = true;
        }
        if d > 4.0 {
            outliers += 1;
        }
    }
    let n = samples.rows() as f64;
    Ok((
        Figure4Seed {
            seed,
            arch,
            final_loss: reports.last().map_or(f64::NAN, |r| r.loss),
            outlier_fraction: outliers as f64 / n,
            coverage: inside as f64 / n,
            modes_hit: hit.iter().filter(|&&h| h).count(),
        },
        samples,
    ))
}

/// Both architectures, identical budgets, three consecutive seeds.
/// `sink` receives every sample set.
pub fn figure4(
    config: &ExperimentConfig,
    mut sink: impl FnMut(ScoreArch, u64, &Tensor) -> Result<(), ExperimentError>,
) -> Result<Figure4Report, ExperimentError> {
    let mut seeds = Vec::new();
    for k in 0..3 {
        for arch in [ScoreArch::LnResnet, ScoreArch::Mlp] {
            let (row, samples) = figure4_seed(config, arch, config.seed + k)?;
            sink(arch, row.seed, &samples)?;
            seeds.push(row);
        }
    }
    Ok(summarize_figure4(seeds))
}

pub fn summarize_figure4(seeds: Vec<Figure4Seed>) -> Figure4Report {
    let pick = |arch: ScoreArch, f: fn(&Figure4Seed) -> f64| {
        median(seeds.iter().filter(|s| s.arch == arch).map(f).collect())
    };
    let ln = pick(ScoreArch::LnResnet, |s| s.outlier_fraction);
    let mlp = pick(ScoreArch::Mlp, |s| s.outlier_fraction);
    let cov = pick(ScoreArch::LnResnet, |s| s.coverage);
    Figure4Report {
        median_outlier_lnresnet: ln,
        median_outlier_mlp: mlp,
        median_coverage_lnresnet: cov,
        outlier_ordering: ln <= mlp,
        coverage_ok: cov >= 0.95,
        seeds,
    }
}

pub fn write_figure4_csv(report: &Figure4Report, w: &mut Vec<u8>) -> std::io::Result<()> {
    writeln!(w, "seed,arch,final_loss,outlier_fraction,coverage,modes_hit")?;
    for s in &report.seeds {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            s.seed,
            s.arch.name(),
            s.final_loss,
            s.outlier_fraction,
            s.coverage,
            s.modes_hit
        )?;
    }
    Ok(())
}
