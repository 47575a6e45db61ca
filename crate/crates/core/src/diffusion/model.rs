use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DiffusionError, DiffusionSchedule, ScheduleKind, ScoreNet, ScoreNetConfig};
use crate::envs::{sample_batch, OfflineDataset};
use crate::tensorgrad::{Adam, AdamConfig, Binding, Graph, ParamSet, Tensor, Var};
use crate::SeededRng;

pub const BEHAVIOR_MAGIC: &[u8; 8] = b"IDQLDDPM";
pub const BEHAVIOR_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossNorm {
    /// Squared L2 norm per row.
    #[default]
    L2,
    L1,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Clip the final actions into this box.
    pub clip: Option<(f64, f64)>,
    /// Add √β₁·z on the last reverse step too.
    pub noise_at_last_step: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    net: ScoreNetConfig,
    schedule: ScheduleKind,
    steps: usize,
    sampler: SamplerConfig,
}

/// A score network plus its noise schedule: the learned behavior policy.
#[derive(Clone, Debug)]
pub struct BehaviorModel {
    pub params: ParamSet,
    pub schedule: DiffusionSchedule,
    pub sampler: SamplerConfig,
    net: ScoreNet,
}

impl BehaviorModel {
    pub fn new(
        config: ScoreNetConfig,
        schedule: DiffusionSchedule,
        rng: &mut SeededRng,
    ) -> Result<Self, DiffusionError> {
        let net = ScoreNet::new(config)?;
        let params = net.init(rng)?;
        Ok(Self {
            params,
            schedule,
            sampler: SamplerConfig::default(),
            net,
        })
    }

    pub fn config(&self) -> &ScoreNetConfig {
        &self.net.config
    }

    pub fn net(&self) -> &ScoreNet {
        &self.net
    }

    /// Builds the noise-prediction loss on a fresh noising of `actions`.
    /// `weights` scales each row's term before the batch mean.
    #[allow(clippy::too_many_arguments)]
    pub fn bc_loss(
        &self,
        g: &mut Graph,
        states: &Tensor,
        actions: &Tensor,
        norm: LossNorm,
        weights: Option<&[f64]>,
        train: bool,
        rng: &mut SeededRng,
    ) -> Result<Var, DiffusionError> {
        let nb = self.schedule.noise_batch(actions, rng);
        let input = self.net.build_input(&nb.noised, states, &nb.steps)?;
        let x = g.input(input);
        let pred = self.net.forward(g, &self.params, x, Binding::Trainable, train.then_some(rng))?;
        let eps = g.input(nb.eps);
        noise_prediction_loss(g, pred, eps, norm, weights)
    }

    /// One reverse chain per row of `states`, run as a batch.
    pub fn sample_rows(&self, states: &Tensor, rng: &mut SeededRng) -> Result<Tensor, DiffusionError> {
        let n = states.rows();
        let d = self.net.config.action_dim;
        let mut a: Vec<f64> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
        for t in (1..=self.schedule.steps()).rev() {
            let input = self.net.build_input(&Tensor::matrix(n, d, a.clone())?, states, &vec![t; n])?;
            let eps = self.net.predict(&self.params, input)?;
            let noise = t > 1 || self.sampler.noise_at_last_step;
            self.schedule
                .reverse_step(&mut a, eps.data(), t, noise, || rng.sample(StandardNormal))?;
        }
        if let Some((lo, hi)) = self.sampler.clip {
            for v in &mut a {
                *v = v.clamp(lo, hi);
            }
        }
        Ok(Tensor::matrix(n, d, a)?)
    }

    /// `n` independent actions for one state.
    pub fn sample(&self, state: &[f64], n: usize, rng: &mut SeededRng) -> Result<Vec<Vec<f64>>, DiffusionError> {
        let states = Tensor::from_rows(&vec![state; n])?;
        let out = self.sample_rows(&states, rng)?;
        Ok((0..n).map(|r| out.row(r).to_vec()).collect())
    }

    fn header(&self) -> Header {
        Header {
            net: self.net.config.clone(),
            schedule: self.schedule.kind,
            steps: self.schedule.steps(),
            sampler: self.sampler.clone(),
        }
    }

    /// `magic, version:u32, header_len:u32, header JSON`, then the
    /// parameter checkpoint.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), DiffusionError> {
        let header = serde_json::to_vec(&self.header()).expect("header serializes");
        w.write_all(BEHAVIOR_MAGIC)?;
        w.write_all(&BEHAVIOR_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        self.params.write_to(w)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, DiffusionError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != BEHAVIOR_MAGIC {
            return Err(DiffusionError::Format("not a behavior-model checkpoint".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != BEHAVIOR_VERSION {
            return Err(DiffusionError::Format(format!("unsupported version {version}")));
        }
        r.read_exact(&mut b4)?;
        let mut header = vec![0u8; u32::from_le_bytes(b4) as usize];
        r.read_exact(&mut header)?;
        let header: Header =
            serde_json::from_slice(&header).map_err(|e| DiffusionError::Format(e.to_string()))?;
        let params = ParamSet::read_from(r)?;
        let net = ScoreNet::new(header.net)?;
        let mut rng = crate::rng_from_seed(0);
        let fresh = net.init(&mut rng)?;
        if params.distance(&fresh).is_err() {
            return Err(DiffusionError::Format(
                "parameters do not match the stored network config".into(),
            ));
        }
        Ok(Self {
            params,
            schedule: DiffusionSchedule::new(header.schedule, header.steps)?,
            sampler: header.sampler,
            net,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DiffusionError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DiffusionError> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write_to(&mut v).expect("writing to a Vec cannot fail");
        v
    }
}

/// Batch mean of `‖ε − pred‖` per row (squared L2 or L1), optionally
/// weighted per row.
pub fn noise_prediction_loss(
    g: &mut Graph,
    pred: Var,
    eps: Var,
    norm: LossNorm,
    weights: Option<&[f64]>,
) -> Result<Var, DiffusionError> {
    let diff = g.sub(eps, pred)?;
    let per = match norm {
        LossNorm::L2 => g.square(diff),
        LossNorm::L1 => g.abs(diff),
    };
    let mut rows = g.row_sum(per);
    if let Some(w) = weights {
        let n = g.value(rows).rows();
        if w.len() != n {
            return Err(DiffusionError::Width { got: w.len(), want: n });
        }
        let wv = g.input(Tensor::matrix(n, 1, w.to_vec())?);
        rows = g.mul(rows, wv)?;
    }
    Ok(g.mean(rows))
}

/// Advantage weights `min(exp(α·adv), max_weight)`.
pub fn awr_weights(advantages: &[f64], alpha: f64, max_weight: f64) -> Vec<f64> {
    advantages.iter().map(|a| (alpha * a).exp().min(max_weight)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AwrWeighting {
    pub alpha: f64,
    pub max_weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DdpmConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub cosine_decay: bool,
    pub norm: LossNorm,
    pub report_every: u64,
}

impl Default for DdpmConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            batch_size: 1024,
            steps: 100_000,
            cosine_decay: true,
            norm: LossNorm::L2,
            report_every: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DdpmReport {
    pub step: u64,
    pub loss: f64,
}

/// Adam state for behavior cloning.
#[derive(Clone, Debug)]
pub struct DdpmTrainer {
    pub config: DdpmConfig,
    adam: Adam,
}

impl DdpmTrainer {
    pub fn new(config: DdpmConfig) -> Self {
        let mut adam = AdamConfig::with_lr(config.lr);
        if config.cosine_decay {
            adam = adam.cosine(config.steps);
        }
        Self {
            config,
            adam: Adam::new(adam),
        }
    }

    pub fn step(
        &mut self,
        model: &mut BehaviorModel,
        states: &Tensor,
        actions: &Tensor,
        weights: Option<&[f64]>,
        rng: &mut SeededRng,
    ) -> Result<f64, DiffusionError> {
        let mut g = Graph::new();
        let loss = model.bc_loss(&mut g, states, actions, self.config.norm, weights, true, rng)?;
        let value = g.value(loss).item()?;
        if !value.is_finite() {
            return Err(DiffusionError::Diverged { step: self.adam.steps_taken() });
        }
        g.backward(loss, &mut model.params)?;
        self.adam.step(&mut model.params)?;
        Ok(value)
    }
}

/// Fits `model` to the dataset's (state, action) pairs.
pub fn train_behavior(
    config: &DdpmConfig,
    model: &mut BehaviorModel,
    dataset: &OfflineDataset,
    rng: &mut SeededRng,
) -> Result<Vec<DdpmReport>, DiffusionError> {
    let bs = config.batch_size.min(dataset.len()).max(1);
    let mut trainer = DdpmTrainer::new(config.clone());
    let mut reports = Vec::new();
    for step in 1..=config.steps {
        let batch = sample_batch(dataset, bs, rng)?;
        let loss = trainer.step(model, &batch.states, &batch.actions, None, rng)?;
        if step % config.report_every.max(1) == 0 || step == config.steps {
            reports.push(DdpmReport { step, loss });
        }
    }
    Ok(reports)
}
