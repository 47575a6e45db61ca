//! Three small ops for the static page in `www/`. Each returns JSON text so
//! the page can stay plain JavaScript. The `*_json` functions are ordinary
//! Rust and are what the tests call.

use idql::diffusion::{DiffusionSchedule, ScheduleKind};
use idql::losses::{implicit_policy, ConvexLoss, DiscreteActionDistribution};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct PolicyOut {
    family: &'static str,
    param: f64,
    v_star: f64,
    behavior_mean: f64,
    implicit_mean: f64,
    probs: Vec<f64>,
}

fn dist(q: Vec<f64>, mu: Vec<f64>) -> Result<DiscreteActionDistribution, String> {
    let d = if mu.is_empty() {
        DiscreteActionDistribution::uniform(q)
    } else {
        DiscreteActionDistribution::new(q, mu)
    };
    d.map_err(|e| e.to_string())
}

/// `V*` and the implicit policy for one discrete state. Empty `mu` means
/// uniform behavior.
pub fn implicit_policy_json(family: &str, param: f64, q: Vec<f64>, mu: Vec<f64>) -> Result<String, String> {
    let loss = ConvexLoss::from_parts(family, param).map_err(|e| e.to_string())?;
    let d = dist(q, mu)?;
    let pi = implicit_policy(&loss, &d).map_err(|e| e.to_string())?;
    let out = PolicyOut {
        family: loss.family(),
        param: loss.param(),
        v_star: pi.v_star,
        behavior_mean: d.mean(),
        implicit_mean: pi.expected_q(&d),
        probs: pi.probs,
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct SweepPoint {
    param: f64,
    v_star: f64,
    implicit_mean: f64,
}

/// `V*` and `E_π[Q]` across `params` for one loss family.
pub fn param_sweep_json(family: &str, params: Vec<f64>, q: Vec<f64>, mu: Vec<f64>) -> Result<String, String> {
    let d = dist(q, mu)?;
    let mut points = Vec::with_capacity(params.len());
    for param in params {
        let loss = ConvexLoss::from_parts(family, param).map_err(|e| e.to_string())?;
        let pi = implicit_policy(&loss, &d).map_err(|e| e.to_string())?;
        points.push(SweepPoint {
            param,
            v_star: pi.v_star,
            implicit_mean: pi.expected_q(&d),
        });
    }
    serde_json::to_string(&points).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct ScheduleOut<'a> {
    kind: &'static str,
    betas: &'a [f64],
    alpha_bars: &'a [f64],
}

/// Betas and `ᾱ_t` for `"vp"`, `"linear"` or `"cosine"` with `steps` steps.
pub fn schedule_json(kind: &str, steps: usize) -> Result<String, String> {
    let kind = ScheduleKind::parse(kind, steps).map_err(|e| e.to_string())?;
    let s = DiffusionSchedule::new(kind, steps).map_err(|e| e.to_string())?;
    let out = ScheduleOut {
        kind: s.kind.name(),
        betas: s.betas(),
        alpha_bars: s.alpha_bars(),
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn implicit_policy_js(family: &str, param: f64, q: Vec<f64>, mu: Vec<f64>) -> Result<String, JsValue> {
    implicit_policy_json(family, param, q, mu).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn param_sweep_js(family: &str, params: Vec<f64>, q: Vec<f64>, mu: Vec<f64>) -> Result<String, JsValue> {
    param_sweep_json(family, params, q, mu).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn schedule_js(kind: &str, steps: usize) -> Result<String, JsValue> {
    schedule_json(kind, steps).map_err(|e| JsValue::from_str(&e))
}
