//! Twin Q networks, a state-value network and the implicit TD loop.
//!
//! One iteration takes a value step on `E[f(Q_target(s,a) − V(s))]`, then a
//! Q step on `(r + γ(1−done)V(s') − Q(s,a))²`, then moves the target
//! networks toward the online ones by EMA. Only dataset actions are ever fed
//! to the Q networks.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::envs::{sample_batch, Batch, EnvError, OfflineDataset};
use crate::losses::{ConvexLoss, LossError, EXP_OVERFLOW};
use crate::tensorgrad::{
    ema_update, Activation, Adam, AdamConfig, Binding, Graph, Mlp, ParamSet, Tensor, TensorError,
    Var,
};
use crate::SeededRng;

/// Tag on every action tensor fed to a Q network.
pub const ACTION_TAG: &str = "dataset_action";

#[derive(Debug, thiserror::Error)]
pub enum CriticError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("discount {0} outside [0, 1)")]
    BadGamma(f64),
    #[error("empty batch")]
    EmptyBatch,
    #[error("critic diverged at step {step}: {snapshot}")]
    Diverged { step: u64, snapshot: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticConfig {
    pub loss: ConvexLoss,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Clipped double-Q; `false` trains a single Q network.
    pub twin: bool,
    pub lr: f64,
    pub batch_size: usize,
    pub ema: f64,
    pub gamma: f64,
    pub steps: u64,
    pub report_every: u64,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            loss: ConvexLoss::Expectile { tau: 0.7 },
            hidden: vec![256, 256],
            activation: Activation::Relu,
            twin: true,
            lr: 3e-4,
            batch_size: 256,
            ema: 0.005,
            gamma: 0.99,
            steps: 100_000,
            report_every: 1_000,
        }
    }
}

/// Progress line written every `report_every` steps.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    pub step: u64,
    pub v_loss: f64,
    pub q_loss: f64,
    pub mean_v: f64,
    pub mean_q: f64,
}

pub fn write_reports_csv<W: Write>(reports: &[TrainReport], mut w: W) -> std::io::Result<()> {
    writeln!(w, "step,v_loss,q_loss,mean_v,mean_q")?;
    for r in reports {
        writeln!(w, "{},{},{},{},{}", r.step, r.v_loss, r.q_loss, r.mean_v, r.mean_q)?;
    }
    Ok(())
}

/// `Q_θ` (one or two heads), its EMA target `Q_θ̂` and `V_ψ`.
#[derive(Clone, Debug)]
pub struct CriticNets {
    pub state_dim: usize,
    pub action_dim: usize,
    q_nets: Vec<Mlp>,
    v_net: Mlp,
    pub q_online: ParamSet,
    pub q_target: ParamSet,
    pub v_params: ParamSet,
}

impl CriticNets {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        config: &CriticConfig,
        rng: &mut SeededRng,
    ) -> Result<Self, CriticError> {
        let mut nets = Self::layout(state_dim, action_dim, config);
        for q in &nets.q_nets {
            q.init(&mut nets.q_online, rng)?;
        }
        nets.v_net.init(&mut nets.v_params, rng)?;
        nets.q_target = nets.q_online.clone();
        Ok(nets)
    }

    fn layout(state_dim: usize, action_dim: usize, config: &CriticConfig) -> Self {
        let dims = |input: usize| {
            let mut d = vec![input];
            d.extend(&config.hidden);
            d.push(1);
            d
        };
        let heads = if config.twin { 2 } else { 1 };
        let q_nets = (1..=heads)
            .map(|i| Mlp::new(&format!("q{i}"), &dims(state_dim + action_dim), config.activation))
            .collect();
        Self {
            state_dim,
            action_dim,
            q_nets,
            v_net: Mlp::new("v", &dims(state_dim), config.activation),
            q_online: ParamSet::new(),
            q_target: ParamSet::new(),
            v_params: ParamSet::new(),
        }
    }

    pub fn num_heads(&self) -> usize {
        self.q_nets.len()
    }

    /// Per-head Q outputs on the graph, each `[n×1]`.
    pub fn q_heads(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        states: Var,
        actions: Var,
        binding: Binding,
    ) -> Result<Vec<Var>, TensorError> {
        let x = g.concat(&[states, actions])?;
        self.q_nets
            .iter()
            .map(|q| q.forward(g, params, x, binding))
            .collect()
    }

    pub fn v_forward(
        &self,
        g: &mut Graph,
        states: Var,
        binding: Binding,
    ) -> Result<Var, TensorError> {
        self.v_net.forward(g, &self.v_params, states, binding)
    }

    fn q_min_with(&self, params: &ParamSet, states: &Tensor, actions: &Tensor) -> Result<Vec<f64>, TensorError> {
        let mut g = Graph::new();
        let s = g.input(states.clone());
        let a = g.tagged_input(ACTION_TAG, actions.clone());
        let heads = self.q_heads(&mut g, params, s, a, Binding::Frozen)?;
        let n = states.rows();
        Ok((0..n)
            .map(|i| {
                heads
                    .iter()
                    .map(|&h| g.value(h).data()[i])
                    .fold(f64::INFINITY, f64::min)
            })
            .collect())
    }

    /// Twin minimum of the online heads for each row.
    pub fn q_min_batch(&self, states: &Tensor, actions: &Tensor) -> Result<Vec<f64>, TensorError> {
        self.q_min_with(&self.q_online, states, actions)
    }

    pub fn q_target_min_batch(
        &self,
        states: &Tensor,
        actions: &Tensor,
    ) -> Result<Vec<f64>, TensorError> {
        self.q_min_with(&self.q_target, states, actions)
    }

    pub fn q_min(&self, state: &[f64], action: &[f64]) -> Result<f64, TensorError> {
        let s = Tensor::matrix(1, state.len(), state.to_vec())?;
        let a = Tensor::matrix(1, action.len(), action.to_vec())?;
        Ok(self.q_min_batch(&s, &a)?[0])
    }

    pub fn v_batch(&self, states: &Tensor) -> Result<Vec<f64>, TensorError> {
        let mut g = Graph::new();
        let s = g.input(states.clone());
        let v = self.v_forward(&mut g, s, Binding::Frozen)?;
        Ok(g.value(v).data().to_vec())
    }

    pub fn v(&self, state: &[f64]) -> Result<f64, TensorError> {
        Ok(self.v_batch(&Tensor::matrix(1, state.len(), state.to_vec())?)?[0])
    }

    /// `mean f(Q_θ̂(s,a) − V_ψ(s))` on `g`. The target Q enters as a constant.
    pub fn value_loss_graph(
        &self,
        g: &mut Graph,
        loss: &ConvexLoss,
        batch: &Batch,
    ) -> Result<Var, CriticError> {
        if batch.is_empty() {
            return Err(CriticError::EmptyBatch);
        }
        let s = g.input(batch.states.clone());
        let a = g.tagged_input(ACTION_TAG, batch.actions.clone());
        let heads = self.q_heads(g, &self.q_target, s, a, Binding::Frozen)?;
        let q: Vec<f64> = (0..batch.len())
            .map(|i| {
                heads
                    .iter()
                    .map(|&h| g.value(h).data()[i])
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let qv = g.tagged_input("q_target", Tensor::matrix(q.len(), 1, q)?);
        let v = self.v_forward(g, s, Binding::Trainable)?;
        let u = g.sub(qv, v)?;
        if let ConvexLoss::Exponential { alpha } = *loss {
            if let Some(&worst) = g
                .value(u)
                .data()
                .iter()
                .find(|&&x| alpha * x > EXP_OVERFLOW)
            {
                return Err(LossError::ExpOverflow(alpha * worst).into());
            }
        }
        let l = *loss;
        let fu = g.map(u, move |x| l.value_and_deriv(x).unwrap_or((f64::NAN, f64::NAN)));
        Ok(g.mean(fu))
    }

    /// `mean over batch and heads of (r + γ(1−done)V_ψ(s') − Q_θ(s,a))²`.
    pub fn q_loss_graph(
        &self,
        g: &mut Graph,
        batch: &Batch,
        gamma: f64,
    ) -> Result<Var, CriticError> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(CriticError::BadGamma(gamma));
        }
        if batch.is_empty() {
            return Err(CriticError::EmptyBatch);
        }
        let v_next = self.v_batch(&batch.next_states)?;
        let targets: Vec<f64> = batch
            .rewards
            .iter()
            .zip(&batch.dones)
            .zip(&v_next)
            .map(|((&r, &d), &v)| r + if d { 0.0 } else { gamma * v })
            .collect();
        let y = g.tagged_input("td_target", Tensor::matrix(targets.len(), 1, targets)?);
        let s = g.input(batch.states.clone());
        let a = g.tagged_input(ACTION_TAG, batch.actions.clone());
        let heads = self.q_heads(g, &self.q_online, s, a, Binding::Trainable)?;
        let mut total: Option<Var> = None;
        for h in &heads {
            let e = g.squared_error(*h, y)?;
            total = Some(match total {
                None => e,
                Some(t) => g.add(t, e)?,
            });
        }
        Ok(g.scale(total.expect("at least one head"), 1.0 / heads.len() as f64))
    }

    pub fn value_loss(&self, loss: &ConvexLoss, batch: &Batch) -> Result<f64, CriticError> {
        let mut g = Graph::new();
        let l = self.value_loss_graph(&mut g, loss, batch)?;
        Ok(g.value(l).item()?)
    }

    pub fn q_loss(&self, batch: &Batch, gamma: f64) -> Result<f64, CriticError> {
        let mut g = Graph::new();
        let l = self.q_loss_graph(&mut g, batch, gamma)?;
        Ok(g.value(l).item()?)
    }

    /// Single checkpoint holding `q_online/`, `q_target/` and `v/` subtrees.
    pub fn bundle(&self) -> Result<ParamSet, TensorError> {
        let mut p = ParamSet::new();
        p.merge_prefixed("q_online", self.q_online.clone())?;
        p.merge_prefixed("q_target", self.q_target.clone())?;
        p.merge_prefixed("v", self.v_params.clone())?;
        Ok(p)
    }

    pub fn from_bundle(
        state_dim: usize,
        action_dim: usize,
        config: &CriticConfig,
        bundle: &ParamSet,
    ) -> Result<Self, CriticError> {
        let mut nets = Self::layout(state_dim, action_dim, config);
        let mut reference = Self::layout(state_dim, action_dim, config);
        let mut scratch = crate::rng_from_seed(0);
        for q in &reference.q_nets {
            q.init(&mut reference.q_online, &mut scratch)?;
        }
        reference.v_net.init(&mut reference.v_params, &mut scratch)?;
        nets.q_online = bundle.extract_prefixed("q_online");
        nets.q_target = bundle.extract_prefixed("q_target");
        nets.v_params = bundle.extract_prefixed("v");
        reference.q_online.distance(&nets.q_online)?;
        reference.q_online.distance(&nets.q_target)?;
        reference.v_params.distance(&nets.v_params)?;
        Ok(nets)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TensorError> {
        self.bundle()?.save(path)
    }

    pub fn all_finite(&self) -> bool {
        self.q_online.all_finite() && self.q_target.all_finite() && self.v_params.all_finite()
    }
}

/// Optimizer state for one critic.
#[derive(Clone, Debug)]
pub struct CriticTrainer {
    pub config: CriticConfig,
    q_opt: Adam,
    v_opt: Adam,
    step: u64,
}

impl CriticTrainer {
    pub fn new(config: CriticConfig) -> Self {
        let adam = AdamConfig::with_lr(config.lr);
        Self {
            q_opt: Adam::new(adam.clone()),
            v_opt: Adam::new(adam),
            config,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One value step, one Q step and one EMA step on `batch`. Returns the
    /// value and Q losses measured before the updates.
    pub fn step(&mut self, nets: &mut CriticNets, batch: &Batch) -> Result<(f64, f64), CriticError> {
        let mut g = Graph::new();
        let vl = nets.value_loss_graph(&mut g, &self.config.loss, batch)?;
        let v_loss = g.value(vl).item()?;
        g.backward(vl, &mut nets.v_params)?;
        self.v_opt.step(&mut nets.v_params)?;

        let mut g = Graph::new();
        let ql = nets.q_loss_graph(&mut g, batch, self.config.gamma)?;
        let q_loss = g.value(ql).item()?;
        g.backward(ql, &mut nets.q_online)?;
        self.q_opt.step(&mut nets.q_online)?;
        ema_update(&mut nets.q_target, &nets.q_online, self.config.ema)?;
        self.step += 1;

        if !(v_loss.is_finite() && q_loss.is_finite() && nets.all_finite()) {
            let snapshot = serde_json::json!({
                "v_loss": v_loss,
                "q_loss": q_loss,
                "q_finite": nets.q_online.all_finite(),
                "v_finite": nets.v_params.all_finite(),
                "batch_rewards": batch.rewards.iter().take(8).collect::<Vec<_>>(),
            });
            return Err(CriticError::Diverged {
                step: self.step,
                snapshot: snapshot.to_string(),
            });
        }
        Ok((v_loss, q_loss))
    }

    /// [`Self::step`] plus batch statistics for a progress line.
    pub fn step_with_report(
        &mut self,
        nets: &mut CriticNets,
        batch: &Batch,
    ) -> Result<TrainReport, CriticError> {
        let (v_loss, q_loss) = self.step(nets, batch)?;
        Ok(TrainReport {
            step: self.step,
            v_loss,
            q_loss,
            mean_v: mean(&nets.v_batch(&batch.states)?),
            mean_q: mean(&nets.q_min_batch(&batch.states, &batch.actions)?),
        })
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Trains fresh critics on `dataset` for `config.steps` iterations. Reports
/// are kept every `report_every` steps and at the last step.
pub fn train_critic(
    config: &CriticConfig,
    dataset: &OfflineDataset,
    rng: &mut SeededRng,
) -> Result<(CriticNets, Vec<TrainReport>), CriticError> {
    if dataset.is_empty() {
        return Err(EnvError::EmptyDataset.into());
    }
    if !(0.0..1.0).contains(&config.gamma) {
        return Err(CriticError::BadGamma(config.gamma));
    }
    let mut nets = CriticNets::new(dataset.state_dim(), dataset.action_dim(), config, rng)?;
    let mut trainer = CriticTrainer::new(config.clone());
    let batch_size = config.batch_size.min(dataset.len());
    let mut reports = Vec::new();
    for step in 1..=config.steps {
        let batch = sample_batch(dataset, batch_size, rng)?;
        if step % config.report_every.max(1) == 0 || step == config.steps {
            let r = trainer.step_with_report(&mut nets, &batch)?;
            log::debug!("critic step {step}: v_loss {:.5} q_loss {:.5}", r.v_loss, r.q_loss);
            reports.push(r);
        } else {
            trainer.step(&mut nets, &batch)?;
        }
    }
    Ok((nets, reports))
}
