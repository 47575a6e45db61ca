//! Brute-force verifiers for the closed forms in [`crate::losses`] and for
//! the gridworld experiments.
//!
//! Nothing here calls into the loss formulas it checks. The per-family loss
//! terms are re-derived locally and minimized by golden-section search, and
//! tabular problems are solved by plain value iteration. Reverse-mode
//! gradients are checked against central finite differences.

mod gradcheck;

pub use gradcheck::{gradient_audit, GradAuditRow, GradAuditSpec};

use rand::Rng;
use serde::Serialize;

use crate::losses::{implicit_policy, solve_value, ConvexLoss, DiscreteActionDistribution};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum OracleError {
    #[error("empty search interval [{lo}, {hi}]")]
    EmptyInterval { lo: f64, hi: f64 },
    #[error("tolerance must be positive, got {0}")]
    BadTolerance(f64),
    #[error("transition row ({state}, {action}) sums to {total}")]
    NotStochastic {
        state: usize,
        action: usize,
        total: f64,
    },
    #[error("gradient audit graph: {0}")]
    Graph(String),
}

const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Golden-section search on `[lo, hi]` for a convex objective, stopping at
/// interval width `tol` and returning the midpoint.
pub fn minimize_1d_convex(
    objective: impl Fn(f64) -> f64,
    lo: f64,
    hi: f64,
    tol: f64,
) -> Result<f64, OracleError> {
    golden_section_by(lo, hi, tol, |x, y| objective(x) - objective(y))
}

/// Golden-section search driven by `diff(x, y) = F(x) − F(y)`.
///
/// Comparing objective values directly cannot resolve a minimizer much
/// beyond the square root of machine precision; an objective difference
/// computed in factored form can.
pub fn golden_section_by(
    lo: f64,
    hi: f64,
    tol: f64,
    diff: impl Fn(f64, f64) -> f64,
) -> Result<f64, OracleError> {
    if !(lo < hi) {
        return Err(OracleError::EmptyInterval { lo, hi });
    }
    if !(tol > 0.0) {
        return Err(OracleError::BadTolerance(tol));
    }
    let (mut a, mut b) = (lo, hi);
    for _ in 0..1000 {
        if b - a <= tol {
            break;
        }
        let c = b - INV_PHI * (b - a);
        let d = a + INV_PHI * (b - a);
        if !(a < c && c < d && d < b) {
            break;
        }
        if diff(c, d) <= 0.0 {
            b = d;
        } else {
            a = c;
        }
    }
    Ok(0.5 * (a + b))
}

/// Loss term `f(u)` re-derived independently of `losses`.
fn f(loss: &ConvexLoss, u: f64) -> f64 {
    match *loss {
        ConvexLoss::Expectile { tau } => {
            let w = if u >= 0.0 { tau } else { 1.0 - tau };
            w * u * u
        }
        ConvexLoss::Quantile { tau } => {
            if u >= 0.0 {
                tau * u
            } else {
                (tau - 1.0) * u
            }
        }
        ConvexLoss::Exponential { alpha } => (alpha * u).exp() - alpha * u,
    }
}

/// `f'(u)`, with the quantile kink set to zero.
fn f_prime(loss: &ConvexLoss, u: f64) -> f64 {
    match *loss {
        ConvexLoss::Expectile { tau } => {
            let w = if u >= 0.0 { tau } else { 1.0 - tau };
            2.0 * w * u
        }
        ConvexLoss::Quantile { tau } => {
            if u > 0.0 {
                tau
            } else if u < 0.0 {
                tau - 1.0
            } else {
                0.0
            }
        }
        ConvexLoss::Exponential { alpha } => alpha * (alpha * u).exp_m1(),
    }
}

/// `f(q − x) − f(q − y)` without catastrophic cancellation.
fn f_diff(loss: &ConvexLoss, q: f64, x: f64, y: f64) -> f64 {
    let (ux, uy) = (q - x, q - y);
    match *loss {
        ConvexLoss::Exponential { alpha } => {
            // e^{α·uy}(e^{α(y−x)} − 1) − α(y − x)
            (alpha * uy).exp() * (alpha * (y - x)).exp_m1() - alpha * (y - x)
        }
        ConvexLoss::Expectile { tau } if (ux >= 0.0) == (uy >= 0.0) => {
            let w = if ux >= 0.0 { tau } else { 1.0 - tau };
            w * (y - x) * (ux + uy)
        }
        ConvexLoss::Quantile { tau } if (ux >= 0.0) == (uy >= 0.0) => {
            if ux >= 0.0 {
                tau * (y - x)
            } else {
                (1.0 - tau) * (x - y)
            }
        }
        _ => f(loss, ux) - f(loss, uy),
    }
}

/// `E_μ[f(Q − V)]`
pub fn expected_loss(loss: &ConvexLoss, dist: &DiscreteActionDistribution, v: f64) -> f64 {
    dist.q_values()
        .iter()
        .zip(dist.probs())
        .map(|(&q, &m)| m * f(loss, q - v))
        .sum()
}

/// `E_μ[f(Q − x)] − E_μ[f(Q − y)]`
pub fn expected_loss_diff(
    loss: &ConvexLoss,
    dist: &DiscreteActionDistribution,
    x: f64,
    y: f64,
) -> f64 {
    dist.q_values()
        .iter()
        .zip(dist.probs())
        .map(|(&q, &m)| m * f_diff(loss, q, x, y))
        .sum()
}

/// Numeric `argmin_V E_μ[f(Q − V)]` over `[min Q, max Q]`.
pub fn oracle_value(
    loss: &ConvexLoss,
    dist: &DiscreteActionDistribution,
    tol: f64,
) -> Result<f64, OracleError> {
    let (lo, hi) = (dist.min_q(), dist.max_q());
    if lo == hi {
        return Ok(lo);
    }
    golden_section_by(lo, hi, tol, |x, y| expected_loss_diff(loss, dist, x, y))
}

/// Importance weight re-derived from `|f'(u)| / |u|`.
fn oracle_weight(loss: &ConvexLoss, q: f64, v: f64) -> f64 {
    const EPS: f64 = 1e-8;
    let u = q - v;
    match *loss {
        ConvexLoss::Expectile { tau } => {
            if u >= 0.0 {
                tau
            } else {
                1.0 - tau
            }
        }
        ConvexLoss::Quantile { tau } => {
            let w = if u >= 0.0 { tau } else { 1.0 - tau };
            w / u.abs().max(EPS)
        }
        ConvexLoss::Exponential { alpha } if u.abs() < EPS => alpha * alpha,
        _ => f_prime(loss, u).abs() / u.abs(),
    }
}

/// Residuals of the implicit-actor fixed point on one distribution.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FixedPointReport {
    pub family: &'static str,
    pub param: f64,
    pub n_actions: usize,
    /// `V*` from the library solver.
    pub v_solver: f64,
    /// `V*` from golden-section search.
    pub v_oracle: f64,
    pub value_gap: f64,
    /// `E_μ[f(Q−V_solver)] − E_μ[f(Q−V_oracle)]`; nonpositive when the solver
    /// is at least as good as the search.
    pub objective_gap: f64,
    /// `|E_{π_imp}[Q] − V*|`
    pub fixed_point: f64,
    /// Distance of `E_μ[f'(Q − V*)]` from its optimality set (zero, or the
    /// subgradient interval at a quantile kink).
    pub stationarity: f64,
    /// Largest absolute difference between the library `π_imp` and the one
    /// rebuilt here.
    pub policy_gap: f64,
    /// Set when the library refused the input (e.g. degenerate weights).
    pub error: Option<String>,
}

impl FixedPointReport {
    pub fn max_residual(&self) -> f64 {
        if self.error.is_some() {
            return f64::INFINITY;
        }
        self.fixed_point.max(self.stationarity)
    }
}

/// Checks the implicit-actor identity on `dist`: `V*` two ways, the
/// stationarity condition and the fixed point `E_{π_imp}[Q] = V*`.
/// Failures are recorded in the report rather than returned as errors.
pub fn fixed_point_audit(loss: &ConvexLoss, dist: &DiscreteActionDistribution) -> FixedPointReport {
    let mut report = FixedPointReport {
        family: loss.family(),
        param: loss.param(),
        n_actions: dist.len(),
        v_solver: f64::NAN,
        v_oracle: f64::NAN,
        value_gap: f64::NAN,
        objective_gap: f64::NAN,
        fixed_point: f64::NAN,
        stationarity: f64::NAN,
        policy_gap: f64::NAN,
        error: None,
    };
    let v_oracle = match oracle_value(loss, dist, 1e-13) {
        Ok(v) => v,
        Err(e) => {
            report.error = Some(e.to_string());
            return report;
        }
    };
    report.v_oracle = v_oracle;
    let (v, pi) = match solve_value(loss, dist).and_then(|v| Ok((v, implicit_policy(loss, dist)?))) {
        Ok(x) => x,
        Err(e) => {
            report.error = Some(e.to_string());
            return report;
        }
    };
    report.v_solver = v;
    report.value_gap = (v - v_oracle).abs();
    report.objective_gap = expected_loss_diff(loss, dist, v, v_oracle);

    let q = dist.q_values();
    let mu = dist.probs();
    let e_q: f64 = pi.probs.iter().zip(q).map(|(p, q)| p * q).sum();
    report.fixed_point = (e_q - v).abs();

    let s: f64 = q.iter().zip(mu).map(|(&q, &m)| m * f_prime(loss, q - v)).sum();
    report.stationarity = match *loss {
        ConvexLoss::Quantile { tau } => {
            let at: f64 = q.iter().zip(mu).filter(|(&q, _)| q == v).map(|(_, m)| m).sum();
            let (lo, hi) = (-tau * at, (1.0 - tau) * at);
            (lo - s).max(s - hi).max(0.0)
        }
        _ => s.abs(),
    };

    let unnorm: Vec<f64> = q.iter().zip(mu).map(|(&q, &m)| m * oracle_weight(loss, q, v)).collect();
    let z: f64 = unnorm.iter().sum();
    report.policy_gap = unnorm
        .iter()
        .zip(&pi.probs)
        .map(|(u, p)| (u / z - p).abs())
        .fold(0.0, f64::max);
    report
}

/// Random bandit: `n` actions, `Q ~ U[q_lo, q_hi]`, `μ` uniform on the
/// simplex.
pub fn random_distribution<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    q_lo: f64,
    q_hi: f64,
) -> DiscreteActionDistribution {
    let q: Vec<f64> = (0..n).map(|_| rng.random_range(q_lo..q_hi)).collect();
    // normalized exponentials are Dirichlet(1, ..., 1)
    let e: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let total: f64 = e.iter().sum();
    let mut mu: Vec<f64> = e.iter().map(|x| x / total).collect();
    let rest: f64 = mu[1..].iter().sum();
    mu[0] = 1.0 - rest;
    DiscreteActionDistribution::new(q, mu).expect("valid by construction")
}

/// The (family, parameter) grid the fixed-point audit sweeps.
pub fn audit_grid() -> Vec<ConvexLoss> {
    let mut grid = Vec::new();
    for tau in [0.6, 0.7, 0.8, 0.9] {
        grid.push(ConvexLoss::Expectile { tau });
    }
    for tau in [0.6, 0.8] {
        grid.push(ConvexLoss::Quantile { tau });
    }
    for alpha in [0.5, 1.0, 2.0] {
        grid.push(ConvexLoss::Exponential { alpha });
    }
    grid
}

/// Worst residuals for one loss over a batch of random distributions.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditSummary {
    pub family: &'static str,
    pub param: f64,
    pub trials: usize,
    pub max_fixed_point: f64,
    pub max_stationarity: f64,
    pub max_value_gap: f64,
    pub max_policy_gap: f64,
    pub failures: usize,
}

/// Runs [`fixed_point_audit`] on `trials` random bandits (2–32 actions,
/// `Q ~ U[−5, 5]`) for every loss in `grid`.
pub fn audit_sweep<R: Rng + ?Sized>(
    grid: &[ConvexLoss],
    trials: usize,
    rng: &mut R,
) -> Vec<AuditSummary> {
    let dists: Vec<_> = (0..trials)
        .map(|_| {
            let n = rng.random_range(2..=32);
            random_distribution(rng, n, -5.0, 5.0)
        })
        .collect();
    grid.iter()
        .map(|loss| {
            let mut s = AuditSummary {
                family: loss.family(),
                param: loss.param(),
                trials,
                max_fixed_point: 0.0,
                max_stationarity: 0.0,
                max_value_gap: 0.0,
                max_policy_gap: 0.0,
                failures: 0,
            };
            for d in &dists {
                let r = fixed_point_audit(loss, d);
                if r.error.is_some() {
                    s.failures += 1;
                    continue;
                }
                s.max_fixed_point = s.max_fixed_point.max(r.fixed_point);
                s.max_stationarity = s.max_stationarity.max(r.stationarity);
                s.max_value_gap = s.max_value_gap.max(r.value_gap);
                s.max_policy_gap = s.max_policy_gap.max(r.policy_gap);
            }
            s
        })
        .collect()
}

/// One possible outcome of taking an action in a tabular MDP.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Outcome {
    pub prob: f64,
    pub next: usize,
    pub reward: f64,
    pub done: bool,
}

/// Finite MDP given as explicit outcome lists `outcomes[s][a]`.
#[derive(Clone, Debug)]
pub struct TabularMdp {
    pub outcomes: Vec<Vec<Vec<Outcome>>>,
    pub gamma: f64,
}

impl TabularMdp {
    pub fn n_states(&self) -> usize {
        self.outcomes.len()
    }

    /// Every `(s, a)` row must be a probability distribution.
    pub fn validate(&self) -> Result<(), OracleError> {
        for (s, row) in self.outcomes.iter().enumerate() {
            for (a, outs) in row.iter().enumerate() {
                let total: f64 = outs.iter().map(|o| o.prob).sum();
                if (total - 1.0).abs() > 1e-12 || outs.iter().any(|o| o.prob < 0.0) {
                    return Err(OracleError::NotStochastic {
                        state: s,
                        action: a,
                        total,
                    });
                }
            }
        }
        Ok(())
    }

    fn backup(&self, v: &[f64], s: usize, a: usize) -> f64 {
        self.outcomes[s][a]
            .iter()
            .map(|o| o.prob * (o.reward + if o.done { 0.0 } else { self.gamma * v[o.next] }))
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValueTable {
    pub values: Vec<f64>,
    /// Greedy action per state; ties go to the lowest index.
    pub policy: Vec<usize>,
    pub iterations: usize,
}

/// Bellman-optimal values to sup-norm tolerance `tol`.
pub fn value_iteration(mdp: &TabularMdp, tol: f64) -> Result<ValueTable, OracleError> {
    if !(tol > 0.0) {
        return Err(OracleError::BadTolerance(tol));
    }
    mdp.validate()?;
    let n = mdp.n_states();
    let mut v = vec![0.0; n];
    let mut iterations = 0;
    loop {
        iterations += 1;
        let mut delta: f64 = 0.0;
        let next: Vec<f64> = (0..n)
            .map(|s| {
                (0..mdp.outcomes[s].len())
                    .map(|a| mdp.backup(&v, s, a))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        for (old, new) in v.iter().zip(&next) {
            delta = delta.max((old - new).abs());
        }
        v = next;
        // contraction: sup-norm error ≤ γ/(1−γ)·delta
        let bound = if mdp.gamma > 0.0 {
            delta * mdp.gamma / (1.0 - mdp.gamma)
        } else {
            0.0
        };
        if bound <= tol || iterations >= 1_000_000 {
            break;
        }
    }
    let policy = (0..n)
        .map(|s| {
            let mut best = 0;
            for a in 1..mdp.outcomes[s].len() {
                if mdp.backup(&v, s, a) > mdp.backup(&v, s, best) + 1e-12 {
                    best = a;
                }
            }
            best
        })
        .collect();
    Ok(ValueTable {
        values: v,
        policy,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn golden_section_examples() {
        let tol = 1e-10;
        let x = minimize_1d_convex(|x| (x - 3.0) * (x - 3.0), 0.0, 10.0, tol).unwrap();
        assert!((x - 3.0).abs() <= tol);
        let x = minimize_1d_convex(|x: f64| (x - 1.0).abs(), 0.0, 2.0, tol).unwrap();
        assert!((x - 1.0).abs() <= tol);
        let d = DiscreteActionDistribution::uniform(vec![0.0, 1.0]).unwrap();
        let loss = ConvexLoss::Expectile { tau: 0.9 };
        let x = minimize_1d_convex(|v| expected_loss(&loss, &d, v), 0.0, 1.0, 1e-6).unwrap();
        assert!((x - 0.9).abs() <= 1e-6);
        let x = oracle_value(&loss, &d, tol).unwrap();
        assert!((x - 0.9).abs() <= tol);
    }

    #[test]
    fn golden_section_errors() {
        assert_eq!(
            minimize_1d_convex(|x| x, 1.0, 1.0, 1e-6),
            Err(OracleError::EmptyInterval { lo: 1.0, hi: 1.0 })
        );
        assert!(minimize_1d_convex(|x| x, 0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn factored_differences_match_direct_ones() {
        let d = DiscreteActionDistribution::new(vec![-1.0, 0.5, 2.0], vec![0.2, 0.3, 0.5]).unwrap();
        for loss in [
            ConvexLoss::Expectile { tau: 0.8 },
            ConvexLoss::Quantile { tau: 0.3 },
            ConvexLoss::Exponential { alpha: 1.5 },
        ] {
            for (x, y) in [(0.1, 0.7), (-0.9, 1.9), (0.5, 0.5)] {
                let direct = expected_loss(&loss, &d, x) - expected_loss(&loss, &d, y);
                assert_abs_diff_eq!(expected_loss_diff(&loss, &d, x, y), direct, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn audit_examples() {
        let d = DiscreteActionDistribution::new(vec![3.0, -1.0, 0.5, 2.0], vec![0.1, 0.4, 0.3, 0.2])
            .unwrap();
        let r = fixed_point_audit(&ConvexLoss::Expectile { tau: 0.5 }, &d);
        assert_abs_diff_eq!(r.v_solver, d.mean(), epsilon = 1e-12);
        assert!(r.max_residual() <= 1e-8, "{r:?}");

        let d = DiscreteActionDistribution::uniform(vec![0.0, 1.0]).unwrap();
        let r = fixed_point_audit(&ConvexLoss::Exponential { alpha: 1.0 }, &d);
        assert!(r.value_gap <= 1e-8, "{r:?}");
    }

    fn chain(width: usize, gamma: f64) -> TabularMdp {
        // states 0..width on a line, goal at the right end; actions left/right
        let goal = width - 1;
        let outcomes = (0..width)
            .map(|s| {
                (0..2)
                    .map(|a| {
                        if s == goal {
                            vec![Outcome { prob: 1.0, next: s, reward: 1.0, done: true }]
                        } else {
                            let next = if a == 0 { s.saturating_sub(1) } else { s + 1 };
                            vec![Outcome { prob: 1.0, next, reward: -0.01, done: false }]
                        }
                    })
                    .collect()
            })
            .collect();
        TabularMdp { outcomes, gamma }
    }

    #[test]
    fn value_iteration_examples() {
        let vt = value_iteration(&chain(2, 0.99), 1e-12).unwrap();
        assert_abs_diff_eq!(vt.values[0], 0.98, epsilon = 1e-10);
        assert_eq!(vt.policy[0], 1);

        let vt = value_iteration(&chain(4, 0.0), 1e-12).unwrap();
        assert_eq!(vt.values, vec![-0.01, -0.01, -0.01, 1.0]);
    }

    #[test]
    fn non_stochastic_rows_are_rejected() {
        let mut m = chain(3, 0.9);
        m.outcomes[1][0][0].prob = 0.5;
        assert!(matches!(
            value_iteration(&m, 1e-9),
            Err(OracleError::NotStochastic { state: 1, action: 0, .. })
        ));
    }
}
