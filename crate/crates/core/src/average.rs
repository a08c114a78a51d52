//! Long-run growth rate by the vanishing-discount method.
//!
//! For each `β` the discounted problem is solved, `m_β = max v_β` and
//! `(1 − β)·m_β` estimates the optimal growth rate `λ̄`. The relative value
//! `w_β = m_β − v_β ≥ 0` at the largest `β` and the greedy policy there give
//! the average-optimal Markov impulse policy.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{CostConstants, CostSpec};
use crate::dp::{DiscountedProblem, DpError, Policy, PolicyTag, SolveOptions, span};
use crate::exec::{self, Parallelism};
use crate::grid::StateGrid;
use crate::market::MarketModel;

pub const DEFAULT_BETAS: [f64; 4] = [0.9, 0.99, 0.995, 0.999];
pub const DEFAULT_CROSS_TOL: f64 = 5e-3;
pub const DEFAULT_RESIDUAL_TOL: f64 = 1e-2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AverageError {
    #[error("discounted solve failed at beta = {beta}: {source}")]
    Solve { beta: f64, source: DpError },
    #[error(transparent)]
    Dp(#[from] DpError),
    #[error("invalid discount schedule: {0}")]
    Schedule(String),
    #[error("mimicking needs a wealth-free base policy")]
    WealthIndexedBase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VanishingOptions {
    pub betas: Vec<f64>,
    pub solve: SolveOptions,
    pub residual_tol: f64,
}

impl Default for VanishingOptions {
    fn default() -> Self {
        Self { betas: DEFAULT_BETAS.to_vec(), solve: SolveOptions::default(), residual_tol: DEFAULT_RESIDUAL_TOL }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    /// Which inequality the slack measures.
    pub form: String,
    pub lambda: f64,
    pub min_slack: f64,
    pub mean_slack: f64,
    pub max_slack: f64,
    pub argmin_state: usize,
    pub tol: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VanishingDiscountReport {
    pub betas: Vec<f64>,
    /// `max v_β` of the problem on the given grid.
    pub m_beta: Vec<f64>,
    pub lambda_estimates: Vec<f64>,
    /// Last estimate.
    pub lambda: f64,
    /// Two-point extrapolation from the last two discount factors.
    pub lambda_richardson: f64,
    pub last_step_change: f64,
    /// `(min w_β, max w_β)` per `β`.
    pub w_beta_extremes: Vec<(f64, f64)>,
    /// `max ṽ_β` and its estimates, recorded when the grid has a wealth axis.
    pub m_beta_prop: Option<Vec<f64>>,
    pub lambda_estimates_prop: Option<Vec<f64>>,
    pub iterations: Vec<usize>,
    /// Fraction of states where the greedy policies at the two largest `β` differ.
    pub policy_disagreement: Option<f64>,
    pub residual: ResidualReport,
    pub converged: bool,
    pub diagnostics: Vec<String>,
}

/// Output of [`vanishing_discount`] besides the report.
#[derive(Debug, Clone)]
pub struct VanishingDiscountOutput {
    pub report: VanishingDiscountReport,
    pub policy: Policy,
    /// `w_β = m_β − v_β` at the largest `β`.
    pub relative_value: Vec<f64>,
    pub problem: DiscountedProblem,
}

fn check_schedule(betas: &[f64]) -> Result<(), AverageError> {
    if betas.is_empty() {
        return Err(AverageError::Schedule("no discount factors".into()));
    }
    if betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
        return Err(AverageError::Schedule(format!("discount factors must lie in (0, 1): {betas:?}")));
    }
    if betas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(AverageError::Schedule(format!("discount factors must increase: {betas:?}")));
    }
    Ok(())
}

/// Two-point extrapolation of `λ(β) ≈ λ + a·(1 − β)` to `β = 1`.
pub fn richardson(b1: f64, l1: f64, b2: f64, l2: f64) -> f64 {
    (l2 * (1.0 - b1) - l1 * (1.0 - b2)) / (b2 - b1)
}

struct Sweep {
    m: f64,
    values: Vec<f64>,
    policy: Policy,
    iterations: usize,
}

fn sweep(
    problem: &DiscountedProblem,
    betas: &[f64],
    solve: &SolveOptions,
    mode: Parallelism,
) -> Result<Vec<Sweep>, AverageError> {
    let results = exec::map_indexed(mode, betas.len(), |i| {
        let beta = betas[i];
        problem
            .solve(beta, solve)
            .map(|sol| Sweep {
                m: sol.value.sup(),
                values: sol.value.values,
                policy: sol.policy,
                iterations: sol.report.iterations,
            })
            .map_err(|source| AverageError::Solve { beta, source })
    });
    results.into_iter().collect()
}

/// Vanishing-discount sweep on `grid`. With a wealth axis this is the
/// fixed-plus-proportional problem and the proportional-only problem on the
/// same simplex axis is solved alongside for reference.
pub fn vanishing_discount(
    model: &MarketModel,
    spec: &CostSpec,
    grid: &StateGrid,
    opts: &VanishingOptions,
) -> Result<VanishingDiscountOutput, AverageError> {
    check_schedule(&opts.betas)?;
    let mode = opts.solve.parallelism;
    let problem = DiscountedProblem::new(model, spec, grid, mode)?;
    let main = sweep(&problem, &opts.betas, &opts.solve, mode)?;
    let prop = match grid.wealth {
        Some(_) => {
            let p = DiscountedProblem::new(model, spec, &grid.without_wealth(), mode)?;
            Some(sweep(&p, &opts.betas, &opts.solve, mode)?)
        }
        None => None,
    };

    let betas = opts.betas.clone();
    let m_beta: Vec<f64> = main.iter().map(|s| s.m).collect();
    let lambda_estimates: Vec<f64> = betas.iter().zip(&m_beta).map(|(b, m)| (1.0 - b) * m).collect();
    let n = betas.len();
    let lambda = lambda_estimates[n - 1];
    let (lambda_richardson, last_step_change) = if n >= 2 {
        (
            richardson(betas[n - 2], lambda_estimates[n - 2], betas[n - 1], lambda),
            (lambda - lambda_estimates[n - 2]).abs(),
        )
    } else {
        (lambda, f64::NAN)
    };
    let w_beta_extremes: Vec<(f64, f64)> = main
        .iter()
        .map(|s| {
            let lo = s.values.iter().fold(f64::INFINITY, |a, v| a.min(s.m - v));
            let hi = s.values.iter().fold(f64::NEG_INFINITY, |a, v| a.max(s.m - v));
            (lo, hi)
        })
        .collect();
    let last = &main[n - 1];
    let relative_value: Vec<f64> = last.values.iter().map(|v| last.m - v).collect();
    let beta_max = betas[n - 1];
    let mut policy = last.policy.clone();
    policy.tag = PolicyTag::Average { beta: beta_max };
    let policy_disagreement = (n >= 2).then(|| main[n - 2].policy.disagreement(&last.policy));
    let residual = bellman_residual(&problem, &policy, &relative_value, lambda, opts.residual_tol);

    let mut diagnostics = Vec::new();
    let mut converged = lambda_estimates.iter().all(|l| l.is_finite()) && residual.passed;
    if !residual.passed {
        diagnostics.push(format!("Bellman residual min slack {:.3e} below -{:e}", residual.min_slack, residual.tol));
    }
    if w_beta_extremes.iter().any(|&(lo, _)| lo < 0.0) {
        converged = false;
        diagnostics.push("negative relative value".into());
    }
    if let Some(d) = policy_disagreement
        && d >= 0.05
    {
        diagnostics.push(format!("greedy policies at the two largest discount factors differ on {:.1}% of states", 100.0 * d));
    }

    let (m_beta_prop, lambda_estimates_prop) = match &prop {
        Some(p) => {
            let m: Vec<f64> = p.iter().map(|s| s.m).collect();
            let l = betas.iter().zip(&m).map(|(b, m)| (1.0 - b) * m).collect();
            (Some(m), Some(l))
        }
        None => (None, None),
    };
    let report = VanishingDiscountReport {
        betas,
        m_beta,
        lambda_estimates,
        lambda,
        lambda_richardson,
        last_step_change,
        w_beta_extremes,
        m_beta_prop,
        lambda_estimates_prop,
        iterations: main.iter().map(|s| s.iterations).collect(),
        policy_disagreement,
        residual,
        converged,
        diagnostics,
    };
    Ok(VanishingDiscountOutput { report, policy, relative_value, problem })
}

/// Slack of `w(ϑ) + λ ≤ η(ϑ, f(ϑ)) + ∫ w dq(ϑ, f(ϑ))` with `w = −w_β ≤ 0`
/// (the relative value passed in is `w_β = m_β − v_β ≥ 0`) and the
/// undiscounted kernel. Non-negative slack everywhere means the inequality holds.
pub fn bellman_residual(
    problem: &DiscountedProblem,
    policy: &Policy,
    w_beta: &[f64],
    lambda: f64,
    tol: f64,
) -> ResidualReport {
    let u: Vec<f64> = w_beta.iter().map(|w| -w).collect();
    let slack = exec::map_indexed(problem.parallelism(), u.len(), |s| {
        let b = policy.target[s];
        match (problem.action_reward(s, b), problem.expect_after_action(&u, s, b)) {
            (Some((r, _, _)), Some(next)) => r + next - u[s] - lambda,
            _ => f64::NEG_INFINITY,
        }
    });
    let (mut min, mut arg, mut max) = (f64::INFINITY, 0, f64::NEG_INFINITY);
    for (s, &x) in slack.iter().enumerate() {
        if x < min {
            min = x;
            arg = s;
        }
        max = max.max(x);
    }
    let mean = exec::pairwise_sum(&slack) / slack.len() as f64;
    ResidualReport {
        form: "w + lambda <= eta + E[w'] with w = v_beta - m_beta <= 0".into(),
        lambda,
        min_slack: min,
        mean_slack: mean,
        max_slack: max,
        argmin_state: arg,
        tol,
        passed: min >= -tol,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossCheckReport {
    pub lambda_fixed: f64,
    pub lambda_prop: f64,
    pub difference: f64,
    pub cross_tol: f64,
    pub passed: bool,
}

/// Growth rate with and without the fixed charge; they coincide in the
/// continuum and should agree within `cross_tol` on the grid.
pub fn cross_check_costs(
    model: &MarketModel,
    spec: &CostSpec,
    grid: &StateGrid,
    opts: &VanishingOptions,
    cross_tol: f64,
) -> Result<CrossCheckReport, AverageError> {
    let fixed = vanishing_discount(model, spec, grid, opts)?;
    let lambda_fixed = fixed.report.lambda;
    let lambda_prop = match fixed.report.lambda_estimates_prop.as_ref().and_then(|l| l.last()) {
        Some(&l) if spec.fixed > 0.0 => l,
        _ => vanishing_discount(model, &spec.proportional_only(), grid, opts)?.report.lambda,
    };
    let difference = (lambda_fixed - lambda_prop).abs();
    Ok(CrossCheckReport { lambda_fixed, lambda_prop, difference, cross_tol, passed: difference <= cross_tol })
}

/// Follow a proportional-cost policy while wealth is at least `M`, freeze
/// below `M`, and resynchronise once wealth recovers to `M* = M·e^{η_M}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MimickingPolicy {
    pub base: Policy,
    pub m: f64,
    pub m_star: f64,
    pub eta_m: f64,
}

pub fn build_mimicking(base: &Policy, constants: &CostConstants) -> Result<MimickingPolicy, AverageError> {
    if base.has_wealth_axis() {
        return Err(AverageError::WealthIndexedBase);
    }
    Ok(MimickingPolicy { base: base.clone(), m: constants.m, m_star: constants.m_star, eta_m: constants.eta_m })
}

/// Range of the relative value, for reports.
pub fn relative_value_span(w: &[f64]) -> f64 {
    span(w)
}
