//! Central finite-difference audit of the tape's reverse pass.
//!
//! Every op and every network the crate trains is rebuilt on random shapes
//! and parameters. The loss is reduced to a scalar through a random
//! weighting so each output element contributes a distinct term.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::OracleError;
use crate::critic::{CriticConfig, CriticNets};
use crate::diffusion::{BehaviorModel, DiffusionSchedule, LossNorm, ScheduleKind, ScoreArch, ScoreNetConfig};
use crate::envs::Batch;
use crate::losses::ConvexLoss;
use crate::tensorgrad::{Activation, Binding, Dense, Graph, LayerNorm, Mlp, ParamSet, Tensor, Var};
use crate::{rng_from_seed, SeededRng};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradAuditSpec {
    pub trials: usize,
    /// Finite-difference step.
    pub h: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, so that gradients near zero
    /// are compared on an absolute scale.
    pub floor: f64,
    /// Coordinates checked per trial on the larger networks.
    pub max_coords: usize,
}

impl Default for GradAuditSpec {
    fn default() -> Self {
        Self {
            trials: 100,
            h: 1e-5,
            tolerance: 1e-4,
            floor: 1e-4,
            max_coords: 40,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradAuditRow {
    pub target: String,
    pub trials: usize,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    /// Coordinates above tolerance.
    pub failures: usize,
}

pub const OP_TARGETS: [&str; 19] = [
    "matmul",
    "add_row",
    "mul_row",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "mish",
    "gelu",
    "abs",
    "square",
    "layer_norm",
    "dropout",
    "concat",
    "sum",
    "mean",
    "row_sum",
    "squared_error",
];

pub const NET_TARGETS: [&str; 11] = [
    "dense",
    "layer_norm_affine",
    "mlp_relu",
    "mlp_mish",
    "mlp_gelu",
    "critic_v_expectile",
    "critic_v_quantile",
    "critic_v_exponential",
    "critic_q",
    "score_mlp",
    "score_lnresnet",
];

/// Uniform on ±[0.05, 2], away from the kinks of relu and abs.
fn draw(rng: &mut SeededRng) -> f64 {
    let x: f64 = rng.random_range(0.05..2.0);
    if rng.random::<bool>() {
        x
    } else {
        -x
    }
}

fn random_tensor(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| draw(rng)).collect()).expect("shape matches")
}

fn matrix(rows: usize, cols: usize, rng: &mut SeededRng) -> Tensor {
    random_tensor(&[rows, cols], rng)
}

fn perturb(params: &mut ParamSet, scale: f64, rng: &mut SeededRng) {
    for (_, p) in params.iter_mut() {
        for v in p.value.data_mut() {
            *v += scale * draw(rng);
        }
    }
}

type Build<'a> = dyn Fn(&mut Graph, &ParamSet, Binding) -> Result<Var, String> + 'a;

/// `Σ out ⊙ w` for a fixed random `w`.
fn weighted_sum(g: &mut Graph, out: Var, seed: u64) -> Result<Var, String> {
    let w = random_tensor(g.value(out).shape(), &mut rng_from_seed(seed));
    let wi = g.input(w);
    let p = g.mul(out, wi).map_err(|e| e.to_string())?;
    Ok(g.sum(p))
}

struct Tally {
    coords: usize,
    max_rel: f64,
    failures: usize,
}

fn check_trial(
    params: &ParamSet,
    spec: &GradAuditSpec,
    limit: Option<usize>,
    rng: &mut SeededRng,
    build: &Build,
    tally: &mut Tally,
) -> Result<(), OracleError> {
    let mut analytic = params.clone();
    let mut g = Graph::new();
    let l = build(&mut g, params, Binding::Trainable).map_err(OracleError::Graph)?;
    g.backward(l, &mut analytic).map_err(|e| OracleError::Graph(e.to_string()))?;

    let mut coords = Vec::new();
    for (path, p) in params.iter() {
        for i in 0..p.value.len() {
            coords.push((path.to_string(), i));
        }
    }
    if let Some(k) = limit.filter(|&k| k < coords.len()) {
        let mut picked: Vec<usize> = sample(rng, coords.len(), k).into_vec();
        picked.sort_unstable();
        coords = picked.into_iter().map(|i| coords[i].clone()).collect();
    }

    let eval = |path: &str, i: usize, delta: f64| -> Result<f64, OracleError> {
        let mut q = params.clone();
        q.value_mut(path).map_err(|e| OracleError::Graph(e.to_string()))?.data_mut()[i] += delta;
        let mut g = Graph::new();
        let l = build(&mut g, &q, Binding::Frozen).map_err(OracleError::Graph)?;
        g.value(l).item().map_err(|e| OracleError::Graph(e.to_string()))
    };
    for (path, i) in coords {
        let a = analytic
            .get(&path)
            .ok()
            .and_then(|p| p.grad.as_ref())
            .map_or(0.0, |t| t.data()[i]);
        let n = (eval(&path, i, spec.h)? - eval(&path, i, -spec.h)?) / (2.0 * spec.h);
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(spec.floor);
        tally.coords += 1;
        if !(rel <= spec.tolerance) {
            tally.failures += 1;
        }
        if rel > tally.max_rel || rel.is_nan() {
            tally.max_rel = rel;
        }
    }
    Ok(())
}

fn param_set(entries: Vec<(&str, Tensor)>) -> ParamSet {
    let mut p = ParamSet::new();
    for (k, v) in entries {
        p.insert(k, v).expect("distinct paths");
    }
    p
}

fn op_trial(target: &str, spec: &GradAuditSpec, rng: &mut SeededRng, tally: &mut Tally) -> Result<(), OracleError> {
    let n = rng.random_range(1..=4);
    let m = rng.random_range(2..=4);
    let k = rng.random_range(1..=4);
    let seed: u64 = rng.random();
    let e = |e: crate::tensorgrad::TensorError| e.to_string();
    let (params, build): (ParamSet, Box<Build>) = match target {
        "matmul" => (
            param_set(vec![("x", matrix(n, k, rng)), ("y", matrix(k, m, rng))]),
            Box::new(move |g: &mut Graph, p: &ParamSet, b| {
                let x = g.param(p, "x", b).map_err(e)?;
                let y = g.param(p, "y", b).map_err(e)?;
                let o = g.matmul(x, y).map_err(e)?;
                weighted_sum(g, o, seed)
            }),
        ),
        "add_row" | "mul_row" => {
            let mul = target == "mul_row";
            (
                param_set(vec![("x", matrix(n, m, rng)), ("r", random_tensor(&[m], rng))]),
                Box::new(move |g: &mut Graph, p: &ParamSet, b| {
                    let x = g.param(p, "x", b).map_err(e)?;
                    let r = g.param(p, "r", b).map_err(e)?;
                    let o = if mul { g.mul_row(x, r) } else { g.add_row(x, r) }.map_err(e)?;
                    weighted_sum(g, o, seed)
                }),
            )
        }
        "add" | "sub" | "mul" | "squared_error" => {
            let which = target.to_string();
            (
                param_set(vec![("x", matrix(n, m, rng)), ("y", matrix(n, m, rng))]),
                Box::new(move |g: &mut Graph, p: &ParamSet, b| {
                    let x = g.param(p, "x", b).map_err(e)?;
                    let y = g.param(p, "y", b).map_err(e)?;
                    let o = match which.as_str() {
                        "add" => g.add(x, y),
                        "sub" => g.sub(x, y),
                        "mul" => g.mul(x, y),
                        _ => g.squared_error(x, y),
                    }
                    .map_err(e)?;
                    weighted_sum(g, o, seed)
                }),
            )
        }
        "concat" => (
            param_set(vec![
                ("x", matrix(n, m, rng)),
                ("y", matrix(n, k, rng)),
                ("z", matrix(n, 1, rng)),
            ]),
            Box::new(move |g: &mut Graph, p: &ParamSet, b| {
                let parts = ["x", "y", "z"]
                    .iter()
                    .map(|name| g.param(p, name, b))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(e)?;
                let o = g.concat(&parts).map_err(e)?;
                weighted_sum(g, o, seed)
            }),
        ),
        unary => {
            let which = unary.to_string();
            let factor = draw(rng);
            (
                param_set(vec![("x", matrix(n, m, rng))]),
                Box::new(move |g: &mut Graph, p: &ParamSet, b| {
                    let x = g.param(p, "x", b).map_err(e)?;
                    let o = match which.as_str() {
                        "scale" => g.scale(x, factor),
                        "relu" => g.relu(x),
                        "mish" => g.mish(x),
                        "gelu" => g.gelu(x),
                        "abs" => g.abs(x),
                        "square" => g.square(x),
                        "layer_norm" => g.layer_norm(x),
                        "dropout" => g.dropout(x, 0.3, true, &mut rng_from_seed(seed)).map_err(e)?,
                        "sum" => g.sum(x),
                        "mean" => g.mean(x),
                        "row_sum" => g.row_sum(x),
                        other => return Err(format!("unknown audit target `{other}`")),
                    };
                    weighted_sum(g, o, seed)
                }),
            )
        }
    };
    check_trial(&params, spec, None, rng, &*build, tally)
}

fn random_batch(rows: usize, sd: usize, ad: usize, rng: &mut SeededRng) -> Batch {
    Batch {
        states: matrix(rows, sd, rng),
        actions: matrix(rows, ad, rng),
        rewards: (0..rows).map(|_| draw(rng)).collect(),
        next_states: matrix(rows, sd, rng),
        dones: (0..rows).map(|_| rng.random::<bool>()).collect(),
        indices: (0..rows).collect(),
    }
}

fn net_trial(target: &str, spec: &GradAuditSpec, rng: &mut SeededRng, tally: &mut Tally) -> Result<(), OracleError> {
    let n = rng.random_range(2..=5);
    let d_in = rng.random_range(2..=4);
    let d_out = rng.random_range(1..=3);
    let seed: u64 = rng.random();
    let limit = Some(spec.max_coords);
    let g_err = |e: String| OracleError::Graph(e);
    let x = matrix(n, d_in, rng);
    match target {
        "dense" | "layer_norm_affine" => {
            let dense = Dense::new("d", d_in, d_out + 1);
            let ln = LayerNorm::new("ln", d_out + 1);
            let mut params = ParamSet::new();
            dense.init(&mut params, rng, false).map_err(|e| g_err(e.to_string()))?;
            let with_ln = target == "layer_norm_affine";
            if with_ln {
                ln.init(&mut params).map_err(|e| g_err(e.to_string()))?;
            }
            perturb(&mut params, 0.2, rng);
            let build = move |g: &mut Graph, p: &ParamSet, b| {
                let xi = g.input(x.clone());
                let mut h = dense.forward(g, p, xi, b).map_err(|e| e.to_string())?;
                if with_ln {
                    h = ln.forward(g, p, h, b).map_err(|e| e.to_string())?;
                }
                weighted_sum(g, h, seed)
            };
            check_trial(&params, spec, None, rng, &build, tally)
        }
        "mlp_relu" | "mlp_mish" | "mlp_gelu" => {
            let act: Activation = target.trim_start_matches("mlp_").parse().map_err(|e: String| g_err(e))?;
            let mlp = Mlp::new("m", &[d_in, 5, 4, d_out], act);
            let mut params = ParamSet::new();
            mlp.init(&mut params, rng).map_err(|e| g_err(e.to_string()))?;
            let build = move |g: &mut Graph, p: &ParamSet, b| {
                let xi = g.input(x.clone());
                let h = mlp.forward(g, p, xi, b).map_err(|e| e.to_string())?;
                weighted_sum(g, h, seed)
            };
            check_trial(&params, spec, limit, rng, &build, tally)
        }
        critic_target if critic_target.starts_with("critic_") => {
            let loss = match critic_target {
                "critic_v_quantile" => ConvexLoss::Quantile { tau: 0.7 },
                "critic_v_exponential" => ConvexLoss::Exponential { alpha: 0.8 },
                _ => ConvexLoss::Expectile { tau: 0.8 },
            };
            let config = CriticConfig {
                loss,
                hidden: vec![5, 4],
                ..CriticConfig::default()
            };
            let nets = CriticNets::new(d_in, d_out, &config, rng).map_err(|e| g_err(e.to_string()))?;
            let batch = random_batch(n, d_in, d_out, rng);
            let on_q = critic_target == "critic_q";
            let params = if on_q { nets.q_online.clone() } else { nets.v_params.clone() };
            let build = move |g: &mut Graph, p: &ParamSet, _b| {
                let mut nets = nets.clone();
                if on_q {
                    nets.q_online = p.clone();
                    nets.q_loss_graph(g, &batch, 0.9).map_err(|e| e.to_string())
                } else {
                    nets.v_params = p.clone();
                    nets.value_loss_graph(g, &loss, &batch).map_err(|e| e.to_string())
                }
            };
            check_trial(&params, spec, limit, rng, &build, tally)
        }
        "score_mlp" | "score_lnresnet" => {
            let arch = if target == "score_mlp" { ScoreArch::Mlp } else { ScoreArch::LnResnet };
            let config = ScoreNetConfig {
                hidden_dim: 6,
                n_blocks: 2,
                time_embed_dim: 4,
                dropout: 0.2,
                ..ScoreNetConfig::new(arch, d_in, d_out)
            };
            let schedule = DiffusionSchedule::new(ScheduleKind::vp(), 5).map_err(|e| g_err(e.to_string()))?;
            let mut model = BehaviorModel::new(config, schedule, rng).map_err(|e| g_err(e.to_string()))?;
            // move the zero-initialized layers off zero so every path carries gradient
            perturb(&mut model.params, 0.3, rng);
            let states = matrix(n, d_in, rng);
            let actions = matrix(n, d_out, rng);
            let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..2.0)).collect();
            let params = model.params.clone();
            let build = move |g: &mut Graph, p: &ParamSet, _b| {
                let mut m = model.clone();
                m.params = p.clone();
                m.bc_loss(g, &states, &actions, LossNorm::L2, Some(&weights), true, &mut rng_from_seed(seed))
                    .map_err(|e| e.to_string())
            };
            check_trial(&params, spec, limit, rng, &build, tally)
        }
        other => Err(g_err(format!("unknown audit target `{other}`"))),
    }
}

/// Runs `spec.trials` random trials on every op and network target.
pub fn gradient_audit(spec: &GradAuditSpec, rng: &mut SeededRng) -> Result<Vec<GradAuditRow>, OracleError> {
    let mut rows = Vec::new();
    for (targets, is_op) in [(&OP_TARGETS[..], true), (&NET_TARGETS[..], false)] {
        for &target in targets {
            let mut tally = Tally {
                coords: 0,
                max_rel: 0.0,
                failures: 0,
            };
            for _ in 0..spec.trials {
                if is_op {
                    op_trial(target, spec, rng, &mut tally)?;
                } else {
                    net_trial(target, spec, rng, &mut tally)?;
                }
            }
            rows.push(GradAuditRow {
                target: target.to_string(),
                trials: spec.trials,
                coords_checked: tally.coords,
                max_rel_error: tally.max_rel,
                failures: tally.failures,
            });
        }
    }
    Ok(rows)
}
