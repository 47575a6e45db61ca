//! Convex critic losses `f(Q − V)` and the implicit actors they induce.
//!
//! For a loss `f` with `f'(0) = 0`, the value `V*` minimizing
//! `E_μ[f(Q − V)]` is also the mean of `Q` under the reweighted behavior
//! policy `π_imp(a) ∝ μ(a)·|f'(Q(a) − V*)| / |Q(a) − V*|`. This module
//! provides the three loss families, exact solvers for `V*` on discrete
//! action distributions and the corresponding importance weights.

use serde::{Deserialize, Serialize};

/// Denominator clamp for the quantile weight and the switch-over point to
/// the analytic `α²` limit of the exponential weight.
pub const WEIGHT_EPS: f64 = 1e-8;

/// `α·u` beyond which `exp(α·u)` is treated as an overflow.
pub const EXP_OVERFLOW: f64 = 700.0;

/// Above this `α·(max Q − min Q)` a warning about Q-value scaling is logged.
pub const SCALE_WARN: f64 = 50.0;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LossError {
    #[error("{family}: parameter {value} outside {range}")]
    InvalidParam {
        family: &'static str,
        value: f64,
        range: &'static str,
    },
    #[error("exponential loss overflow at α·u = {0:.1}; rescale Q-values or lower α")]
    ExpOverflow(f64),
    #[error("empty action distribution")]
    Empty,
    #[error("invalid action distribution: {0}")]
    InvalidDistribution(String),
    #[error("all implicit weights are zero")]
    Degenerate,
    #[error("non-finite input")]
    NonFinite,
}

/// One member of the generalized value-loss family.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum ConvexLoss {
    /// `|τ − 1(u<0)|·u²`
    Expectile { tau: f64 },
    /// `|τ − 1(u<0)|·|u|`
    Quantile { tau: f64 },
    /// Linex `exp(α·u) − α·u`
    Exponential { alpha: f64 },
}

impl ConvexLoss {
    pub fn expectile(tau: f64) -> Result<Self, LossError> {
        check_tau("expectile", tau)?;
        Ok(Self::Expectile { tau })
    }

    pub fn quantile(tau: f64) -> Result<Self, LossError> {
        check_tau("quantile", tau)?;
        Ok(Self::Quantile { tau })
    }

    pub fn exponential(alpha: f64) -> Result<Self, LossError> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(LossError::InvalidParam {
                family: "exponential",
                value: alpha,
                range: "(0, ∞)",
            });
        }
        Ok(Self::Exponential { alpha })
    }

    /// Parses `family` + parameter as used in configs and CSV output.
    pub fn from_parts(family: &str, param: f64) -> Result<Self, LossError> {
        match family {
            "expectile" => Self::expectile(param),
            "quantile" => Self::quantile(param),
            "exponential" => Self::exponential(param),
            _ => Err(LossError::InvalidParam {
                family: "loss",
                value: param,
                range: "family ∈ {expectile, quantile, exponential}",
            }),
        }
    }

    pub fn family(&self) -> &'static str {
        match self {
            Self::Expectile { .. } => "expectile",
            Self::Quantile { .. } => "quantile",
            Self::Exponential { .. } => "exponential",
        }
    }

    pub fn param(&self) -> f64 {
        match *self {
            Self::Expectile { tau } | Self::Quantile { tau } => tau,
            Self::Exponential { alpha } => alpha,
        }
    }

    /// `f(u)`
    pub fn value(&self, u: f64) -> Result<f64, LossError> {
        Ok(self.value_and_deriv(u)?.0)
    }

    /// `f'(u)`; the quantile kink uses `f'(0) = 0`.
    pub fn deriv(&self, u: f64) -> Result<f64, LossError> {
        Ok(self.value_and_deriv(u)?.1)
    }

    pub fn value_and_deriv(&self, u: f64) -> Result<(f64, f64), LossError> {
        if !u.is_finite() {
            return Err(LossError::NonFinite);
        }
        Ok(match *self {
            Self::Expectile { tau } => {
                let w = asym(tau, u);
                (w * u * u, 2.0 * w * u)
            }
            Self::Quantile { tau } => {
                let w = asym(tau, u);
                let d = if u == 0.0 { 0.0 } else { w * u.signum() };
                (w * u.abs(), d)
            }
            Self::Exponential { alpha } => {
                let au = alpha * u;
                if au > EXP_OVERFLOW {
                    return Err(LossError::ExpOverflow(au));
                }
                (au.exp() - au, alpha * au.exp_m1())
            }
        })
    }
}

fn check_tau(family: &'static str, tau: f64) -> Result<(), LossError> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(LossError::InvalidParam {
            family,
            value: tau,
            range: "(0, 1)",
        })
    }
}

/// `|τ − 1(u < 0)|`
fn asym(tau: f64, u: f64) -> f64 {
    if u < 0.0 {
        1.0 - tau
    } else {
        tau
    }
}

/// Importance weight `w = |f'(q − v)| / |q − v|` relating the implicit actor
/// to the behavior policy. Singular points use [`WEIGHT_EPS`].
pub fn implicit_weight(loss: &ConvexLoss, q: f64, v: f64) -> f64 {
    implicit_weight_eps(loss, q, v, WEIGHT_EPS)
}

pub fn implicit_weight_eps(loss: &ConvexLoss, q: f64, v: f64, eps: f64) -> f64 {
    let u = q - v;
    match *loss {
        // the |u| factors cancel
        ConvexLoss::Expectile { tau } => asym(tau, u),
        ConvexLoss::Quantile { tau } => asym(tau, u) / u.abs().max(eps),
        ConvexLoss::Exponential { alpha } => {
            if u.abs() < eps {
                alpha * alpha
            } else {
                alpha * (alpha * u).exp_m1().abs() / u.abs()
            }
        }
    }
}

/// Q-values and behavior probabilities over a finite action set.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteActionDistribution {
    q_values: Vec<f64>,
    probs: Vec<f64>,
}

impl DiscreteActionDistribution {
    pub fn new(q_values: Vec<f64>, probs: Vec<f64>) -> Result<Self, LossError> {
        if q_values.is_empty() {
            return Err(LossError::Empty);
        }
        if q_values.len() != probs.len() {
            return Err(LossError::InvalidDistribution(format!(
                "{} Q-values but {} probabilities",
                q_values.len(),
                probs.len()
            )));
        }
        if q_values.iter().chain(&probs).any(|v| !v.is_finite()) {
            return Err(LossError::NonFinite);
        }
        if probs.iter().any(|&p| p < 0.0) {
            return Err(LossError::InvalidDistribution("negative probability".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(LossError::InvalidDistribution(format!(
                "probabilities sum to {total}"
            )));
        }
        Ok(Self { q_values, probs })
    }

    /// Uniform behavior over the given Q-values.
    pub fn uniform(q_values: Vec<f64>) -> Result<Self, LossError> {
        let n = q_values.len();
        if n == 0 {
            return Err(LossError::Empty);
        }
        let mut probs = vec![1.0 / n as f64; n];
        // make the sum exact so validation never trips on rounding
        let rest: f64 = probs[1..].iter().sum();
        probs[0] = 1.0 - rest;
        Self::new(q_values, probs)
    }

    pub fn q_values(&self) -> &[f64] {
        &self.q_values
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.q_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q_values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.q_values.iter().zip(&self.probs).map(|(q, p)| q * p).sum()
    }

    pub fn min_q(&self) -> f64 {
        self.q_values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_q(&self) -> f64 {
        self.q_values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Support atoms with positive mass, merged by value and sorted.
    fn sorted_atoms(&self) -> Vec<(f64, f64)> {
        let mut atoms: Vec<(f64, f64)> = self
            .q_values
            .iter()
            .zip(&self.probs)
            .filter(|(_, &p)| p > 0.0)
            .map(|(&q, &p)| (q, p))
            .collect();
        atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut merged: Vec<(f64, f64)> = Vec::with_capacity(atoms.len());
        for (q, p) in atoms {
            match merged.last_mut() {
                Some(last) if last.0 == q => last.1 += p,
                _ => merged.push((q, p)),
            }
        }
        merged
    }
}

/// `V* = argmin_V E_μ[f(Q − V)]`.
///
/// Expectiles are solved exactly on the piecewise-quadratic objective,
/// quantiles by reading off the weighted quantile (midpoint of the minimizing
/// interval on ties), and the linex loss by its log-sum-exp closed form.
pub fn solve_value(loss: &ConvexLoss, dist: &DiscreteActionDistribution) -> Result<f64, LossError> {
    let atoms = dist.sorted_atoms();
    if atoms.is_empty() {
        return Err(LossError::Empty);
    }
    Ok(match *loss {
        ConvexLoss::Expectile { tau } => expectile_value(tau, &atoms),
        ConvexLoss::Quantile { tau } => quantile_value(tau, &atoms),
        ConvexLoss::Exponential { alpha } => {
            warn_if_badly_scaled(alpha, dist);
            exponential_value(alpha, &atoms)
        }
    })
}

fn expectile_value(tau: f64, atoms: &[(f64, f64)]) -> f64 {
    if atoms.len() == 1 {
        return atoms[0].0;
    }
    // With V in [u_k, u_{k+1}] the stationarity condition is linear in V:
    // (1−τ)·Σ_below μ(q − V) + τ·Σ_above μ(q − V) = 0.
    let total_m: f64 = atoms.iter().map(|a| a.1).sum();
    let total_mq: f64 = atoms.iter().map(|a| a.0 * a.1).sum();
    let (mut below_m, mut below_mq) = (0.0, 0.0);
    for k in 0..atoms.len() - 1 {
        below_m += atoms[k].1;
        below_mq += atoms[k].0 * atoms[k].1;
        let above_m = total_m - below_m;
        let above_mq = total_mq - below_mq;
        let v = ((1.0 - tau) * below_mq + tau * above_mq) / ((1.0 - tau) * below_m + tau * above_m);
        let (lo, hi) = (atoms[k].0, atoms[k + 1].0);
        if v <= hi || k + 2 == atoms.len() {
            return v.clamp(lo, hi);
        }
    }
    unreachable!("loop returns on the last interval")
}

fn quantile_value(tau: f64, atoms: &[(f64, f64)]) -> f64 {
    const TIE: f64 = 1e-12;
    let mut cdf = 0.0;
    for (k, &(q, m)) in atoms.iter().enumerate() {
        cdf += m;
        if cdf >= tau - TIE {
            if (cdf - tau).abs() <= TIE && k + 1 < atoms.len() {
                return 0.5 * (q + atoms[k + 1].0);
            }
            return q;
        }
    }
    atoms[atoms.len() - 1].0
}

fn exponential_value(alpha: f64, atoms: &[(f64, f64)]) -> f64 {
    let max_q = atoms.iter().map(|a| a.0).fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = atoms
        .iter()
        .map(|&(q, m)| (alpha * (q - max_q) + m.ln()).exp())
        .sum();
    max_q + s.ln() / alpha
}

fn warn_if_badly_scaled(alpha: f64, dist: &DiscreteActionDistribution) {
    let spread = alpha * (dist.max_q() - dist.min_q());
    if spread > SCALE_WARN {
        log::warn!(
            "α·(max Q − min Q) = {spread:.1} exceeds {SCALE_WARN}; exponential weights may overflow"
        );
    }
}

/// The implicit actor for one state: `V*` and `π_imp`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImplicitPolicy {
    pub v_star: f64,
    pub probs: Vec<f64>,
}

impl ImplicitPolicy {
    /// `E_{π_imp}[Q]`
    pub fn expected_q(&self, dist: &DiscreteActionDistribution) -> f64 {
        self.probs.iter().zip(dist.q_values()).map(|(p, q)| p * q).sum()
    }

    pub fn std_q(&self, dist: &DiscreteActionDistribution) -> f64 {
        let m = self.expected_q(dist);
        self.probs
            .iter()
            .zip(dist.q_values())
            .map(|(p, q)| p * (q - m) * (q - m))
            .sum::<f64>()
            .sqrt()
    }
}

/// `π_imp(a) = μ(a)·w(a) / Z`.
pub fn implicit_policy(
    loss: &ConvexLoss,
    dist: &DiscreteActionDistribution,
) -> Result<ImplicitPolicy, LossError> {
    let v_star = solve_value(loss, dist)?;
    let unnorm: Vec<f64> = dist
        .q_values()
        .iter()
        .zip(dist.probs())
        .map(|(&q, &mu)| mu * implicit_weight(loss, q, v_star))
        .collect();
    let z: f64 = unnorm.iter().sum();
    if !(z > 0.0) || !z.is_finite() {
        return Err(LossError::Degenerate);
    }
    Ok(ImplicitPolicy {
        v_star,
        probs: unnorm.into_iter().map(|w| w / z).collect(),
    })
}

/// `D_KL(μ ‖ π_exp)` computed two ways.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KlReport {
    /// `Σ μ log(μ / π_exp)` with `π_exp` normalized explicitly.
    pub direct: f64,
    /// `E_μ[α(V_exp − Q)]`
    pub closed_form: f64,
}

impl KlReport {
    pub fn gap(&self) -> f64 {
        (self.direct - self.closed_form).abs()
    }
}

/// KL divergence from the behavior policy to `π_exp ∝ μ·exp(α·Q)`.
pub fn kl_behavior_to_awr(
    alpha: f64,
    dist: &DiscreteActionDistribution,
) -> Result<KlReport, LossError> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(LossError::InvalidParam {
            family: "kl",
            value: alpha,
            range: "[0, ∞)",
        });
    }
    if alpha == 0.0 {
        return Ok(KlReport {
            direct: 0.0,
            closed_form: 0.0,
        });
    }
    let max_q = dist.max_q();
    let unnorm: Vec<f64> = dist
        .q_values()
        .iter()
        .zip(dist.probs())
        .map(|(&q, &mu)| mu * (alpha * (q - max_q)).exp())
        .collect();
    let z: f64 = unnorm.iter().sum();
    let direct = dist
        .probs()
        .iter()
        .zip(&unnorm)
        .filter(|(&mu, _)| mu > 0.0)
        .map(|(&mu, &u)| mu * (mu / (u / z)).ln())
        .sum();
    let v_exp = solve_value(&ConvexLoss::exponential(alpha)?, dist)?;
    let closed_form = alpha * (v_exp - dist.mean());
    Ok(KlReport {
        direct,
        closed_form,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn loss_values_and_derivatives() {
        let e = ConvexLoss::expectile(0.9).unwrap();
        assert_abs_diff_eq!(e.value(-1.0).unwrap(), 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(e.deriv(-1.0).unwrap(), -0.2, epsilon = 1e-15);

        let q = ConvexLoss::quantile(0.8).unwrap();
        assert_abs_diff_eq!(q.value(2.0).unwrap(), 1.6, epsilon = 1e-15);
        assert_abs_diff_eq!(q.deriv(2.0).unwrap(), 0.8, epsilon = 1e-15);
        assert_eq!(q.deriv(0.0).unwrap(), 0.0);

        let x = ConvexLoss::exponential(1.0).unwrap();
        assert_eq!(x.value(0.0).unwrap(), 1.0);
        assert_eq!(x.deriv(0.0).unwrap(), 0.0);
    }

    #[test]
    fn exponential_overflow_is_reported() {
        let x = ConvexLoss::exponential(2.0).unwrap();
        assert!(matches!(x.value(351.0), Err(LossError::ExpOverflow(_))));
        assert!(x.value(349.0).is_ok());
    }

    #[test]
    fn derivative_sign_matches_residual() {
        for loss in [
            ConvexLoss::expectile(0.3).unwrap(),
            ConvexLoss::quantile(0.7).unwrap(),
            ConvexLoss::exponential(0.5).unwrap(),
        ] {
            for u in [-3.0, -0.1, 0.2, 4.0] {
                assert_eq!(loss.deriv(u).unwrap().signum(), f64::signum(u));
            }
        }
    }

    #[test]
    fn invalid_parameters() {
        assert!(ConvexLoss::expectile(1.0).is_err());
        assert!(ConvexLoss::quantile(0.0).is_err());
        assert!(ConvexLoss::exponential(-1.0).is_err());
        assert!(ConvexLoss::from_parts("huber", 1.0).is_err());
    }

    #[test]
    fn solve_value_examples() {
        let d = DiscreteActionDistribution::uniform(vec![0.0, 2.0]).unwrap();
        assert_abs_diff_eq!(
            solve_value(&ConvexLoss::expectile(0.5).unwrap(), &d).unwrap(),
            1.0,
            epsilon = 1e-15
        );
        let d = DiscreteActionDistribution::uniform(vec![0.0, 1.0]).unwrap();
        assert_abs_diff_eq!(
            solve_value(&ConvexLoss::expectile(0.9).unwrap(), &d).unwrap(),
            0.9,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            solve_value(&ConvexLoss::exponential(1.0).unwrap(), &d).unwrap(),
            0.620_114_506_958_278_2,
            epsilon = 1e-12
        );
        let d = DiscreteActionDistribution::uniform(vec![2.0, 0.0, 1.0]).unwrap();
        assert_eq!(solve_value(&ConvexLoss::quantile(0.5).unwrap(), &d).unwrap(), 1.0);
    }

    #[test]
    fn quantile_plateau_returns_midpoint() {
        let d = DiscreteActionDistribution::uniform(vec![0.0, 4.0]).unwrap();
        assert_eq!(solve_value(&ConvexLoss::quantile(0.5).unwrap(), &d).unwrap(), 2.0);
    }

    #[test]
    fn weights() {
        let e = ConvexLoss::expectile(0.9).unwrap();
        assert_eq!(implicit_weight(&e, 0.5, 0.2), 0.9);
        let q = ConvexLoss::quantile(0.8).unwrap();
        assert_abs_diff_eq!(implicit_weight(&q, 1.0, 0.0), 0.8, epsilon = 1e-15);
        let x = ConvexLoss::exponential(2.0).unwrap();
        assert_eq!(implicit_weight(&x, 0.3, 0.3), 4.0);
        // continuity at the switch-over
        assert_abs_diff_eq!(implicit_weight(&x, 0.3 + 2e-8, 0.3), 4.0, epsilon = 1e-6);
    }

    #[test]
    fn implicit_policy_examples() {
        let d = DiscreteActionDistribution::new(vec![0.0, 1.0, 3.0], vec![0.2, 0.5, 0.3]).unwrap();
        let p = implicit_policy(&ConvexLoss::expectile(0.5).unwrap(), &d).unwrap();
        for (a, b) in p.probs.iter().zip(d.probs()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }

        let d = DiscreteActionDistribution::uniform(vec![0.0, 1.0]).unwrap();
        let p = implicit_policy(&ConvexLoss::expectile(0.9).unwrap(), &d).unwrap();
        assert_abs_diff_eq!(p.probs[0], 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(p.probs[1], 0.9, epsilon = 1e-15);
        assert_abs_diff_eq!(p.expected_q(&d), p.v_star, epsilon = 1e-15);
    }

    #[test]
    fn kl_examples() {
        let d = DiscreteActionDistribution::uniform(vec![0.0, 1.0]).unwrap();
        let r = kl_behavior_to_awr(0.0, &d).unwrap();
        assert_eq!((r.direct, r.closed_form), (0.0, 0.0));

        let c = DiscreteActionDistribution::uniform(vec![2.5; 4]).unwrap();
        let r = kl_behavior_to_awr(3.0, &c).unwrap();
        assert_abs_diff_eq!(r.direct, 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(r.closed_form, 0.0, epsilon = 1e-14);

        let r = kl_behavior_to_awr(1.0, &d).unwrap();
        let expected = ((1.0 + 1f64.exp()) / 2.0).ln() - 0.5;
        assert_abs_diff_eq!(r.closed_form, expected, epsilon = 1e-14);
        assert_abs_diff_eq!(r.direct, expected, epsilon = 1e-14);
    }

    #[test]
    fn invalid_distributions() {
        assert_eq!(
            DiscreteActionDistribution::new(vec![], vec![]),
            Err(LossError::Empty)
        );
        assert!(DiscreteActionDistribution::new(vec![1.0, 2.0], vec![0.5, 0.6]).is_err());
        assert!(DiscreteActionDistribution::new(vec![1.0, 2.0], vec![1.5, -0.5]).is_err());
        assert!(DiscreteActionDistribution::new(vec![1.0], vec![0.5, 0.5]).is_err());
    }
}
