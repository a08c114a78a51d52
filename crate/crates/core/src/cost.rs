//! Transaction-cost mathematics in proportion space.
//!
//! A rebalance from pre-trade proportions `π₋` to post-trade proportions `π`
//! at pre-trade wealth `x₋` keeps the fraction `δ = e(π₋, π, x₋)` of wealth,
//! where `δ` is the unique root in `(0, 1]` of
//!
//! ```text
//! F(δ) = c(π₋, δπ) + C/x₋ + δ = 1          (additive costs)
//! F(δ) = max(C/x₋, c(π₋, δπ)) + δ = 1       (max variant)
//! ```
//!
//! and `c(π₋, π̃) = Σᵢ c¹ᵢ (π̃ⁱ − π₋ⁱ)⁺ + c²ᵢ (π̃ⁱ − π₋ⁱ)⁻` charges the buy rate
//! on purchases and the sell rate on sales. When no root exists the rebalance
//! is unaffordable and `δ = 0`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market::{self, MarketError, path_rng};

/// Tolerance for accepting `δ = 1` as a root.
pub const UNIT_ROOT_TOL: f64 = 1e-12;
const DOMAIN_TOL: f64 = 1e-9;
const DEFAULT_M_GRID_POINTS: usize = 400;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("invalid cost specification: {0}")]
    Spec(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("projection of a zero vector is undefined")]
    ZeroProjection,
    #[error("(A6) violated: eta = {eta} is not below p_hat = {p_hat}")]
    A6Violated { eta: f64, p_hat: f64 },
    #[error("no wealth threshold M on the search grid satisfies eta_M < p_hat = {p_hat}")]
    NoAdmissibleM { p_hat: f64 },
}

impl From<MarketError> for CostError {
    fn from(e: MarketError) -> Self {
        CostError::Domain(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostVariant {
    /// Proportional part plus the fixed charge.
    #[default]
    Additive,
    /// The larger of the fixed charge and the proportional part.
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSpec {
    pub buy: Vec<f64>,
    pub sell: Vec<f64>,
    pub fixed: f64,
    #[serde(default)]
    pub variant: CostVariant,
}

/// Derived thresholds: `η`, `η_M`, `M`, `M* = M e^{η_M}` and `x*`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostConstants {
    pub c_hat: f64,
    pub eta: f64,
    pub eta_m: f64,
    pub m: f64,
    pub m_star: f64,
    pub x_star: f64,
}

/// Outcome of [`general_cost_check`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandwichReport {
    pub samples: usize,
    pub lower_violations: usize,
    pub upper_violations: usize,
    pub subadditivity_violations: usize,
    pub passed: bool,
}

impl CostSpec {
    pub fn new(
        buy: Vec<f64>,
        sell: Vec<f64>,
        fixed: f64,
        variant: CostVariant,
    ) -> Result<Self, CostError> {
        let spec = Self { buy, sell, fixed, variant };
        spec.check()?;
        Ok(spec)
    }

    /// Same proportional rates on every asset.
    pub fn uniform(d: usize, rate: f64, fixed: f64) -> Result<Self, CostError> {
        Self::new(vec![rate; d], vec![rate; d], fixed, CostVariant::Additive)
    }

    pub fn check(&self) -> Result<(), CostError> {
        if self.buy.len() != self.sell.len() || self.buy.is_empty() {
            return Err(CostError::Spec(format!(
                "buy ({}) and sell ({}) rate vectors must be non-empty and equal length",
                self.buy.len(),
                self.sell.len()
            )));
        }
        if self.buy.iter().chain(&self.sell).any(|&c| !(0.0..1.0).contains(&c)) {
            return Err(CostError::Spec("proportional rates must lie in [0, 1)".into()));
        }
        if !(self.fixed >= 0.0 && self.fixed.is_finite()) {
            return Err(CostError::Spec(format!("fixed cost {} must be >= 0", self.fixed)));
        }
        Ok(())
    }

    pub fn n_assets(&self) -> usize {
        self.buy.len()
    }

    /// The same spec with the fixed charge removed.
    pub fn proportional_only(&self) -> Self {
        Self { fixed: 0.0, ..self.clone() }
    }

    pub fn with_fixed(&self, fixed: f64) -> Self {
        Self { fixed, ..self.clone() }
    }

    pub fn with_variant(&self, variant: CostVariant) -> Self {
        Self { variant, ..self.clone() }
    }

    /// `ĉ = maxᵢ max(c¹ᵢ, c²ᵢ)`.
    pub fn c_hat(&self) -> f64 {
        self.buy.iter().chain(&self.sell).copied().fold(0.0, f64::max)
    }

    pub fn max_buy(&self) -> f64 {
        self.buy.iter().copied().fold(0.0, f64::max)
    }

    pub fn max_sell(&self) -> f64 {
        self.sell.iter().copied().fold(0.0, f64::max)
    }

    /// `c(π₋, π̃)` for `π₋ ∈ 𝕊`, `π̃ ∈ 𝕊⁰`.
    pub fn proportional_cost(&self, pi_minus: &[f64], pi_tilde: &[f64]) -> Result<f64, CostError> {
        let d = self.n_assets();
        market::check_simplex(pi_minus, d)?;
        if pi_tilde.len() != d
            || pi_tilde.iter().any(|&p| p < -DOMAIN_TOL)
            || pi_tilde.iter().sum::<f64>() > 1.0 + DOMAIN_TOL
        {
            return Err(CostError::Domain(format!("{pi_tilde:?} is not in the sub-simplex")));
        }
        Ok(self.prop_cost(pi_minus, pi_tilde))
    }

    pub(crate) fn prop_cost(&self, pi_minus: &[f64], pi_tilde: &[f64]) -> f64 {
        pi_minus
            .iter()
            .zip(pi_tilde)
            .enumerate()
            .map(|(i, (&from, &to))| {
                let diff = to - from;
                if diff > 0.0 { self.buy[i] * diff } else { -self.sell[i] * diff }
            })
            .sum()
    }

    fn scaled_cost(&self, pi_minus: &[f64], pi: &[f64], delta: f64) -> f64 {
        pi_minus
            .iter()
            .zip(pi)
            .enumerate()
            .map(|(i, (&from, &to))| {
                let diff = delta * to - from;
                if diff > 0.0 { self.buy[i] * diff } else { -self.sell[i] * diff }
            })
            .sum()
    }

    /// The self-financing map `F(δ)`; a rebalance keeping the fraction `δ`
    /// of wealth is affordable exactly when `F(δ) = 1`.
    pub fn self_financing_f(&self, pi_minus: &[f64], pi: &[f64], x_minus: f64, delta: f64) -> f64 {
        let fixed = if self.fixed > 0.0 { self.fixed / x_minus } else { 0.0 };
        let prop = self.scaled_cost(pi_minus, pi, delta);
        match self.variant {
            CostVariant::Additive => prop + fixed + delta,
            CostVariant::Max => prop.max(fixed) + delta,
        }
    }

    /// Wealth fraction `e(π₋, π, x₋)` surviving the rebalance, `0` when the
    /// rebalance cannot be paid for.
    pub fn solve_e(&self, pi_minus: &[f64], pi: &[f64], x_minus: f64) -> f64 {
        debug_assert!(x_minus > 0.0);
        if self.fixed == 0.0 && pi_minus == pi {
            return 1.0;
        }
        let fixed = if self.fixed > 0.0 { self.fixed / x_minus } else { 0.0 };
        match self.variant {
            CostVariant::Additive => self.solve_affine_segments(pi_minus, pi, fixed),
            CostVariant::Max => {
                // max(g₁, g₂) = 1 at the smaller of the two roots, both maps increasing.
                if fixed >= 1.0 {
                    return 0.0;
                }
                let proportional = self.solve_affine_segments(pi_minus, pi, 0.0);
                proportional.min(1.0 - fixed)
            }
        }
    }

    /// `ẽ(π₋, π)`: [`CostSpec::solve_e`] with the fixed charge dropped.
    pub fn solve_e_prop(&self, pi_minus: &[f64], pi: &[f64]) -> f64 {
        if pi_minus == pi {
            return 1.0;
        }
        self.solve_affine_segments(pi_minus, pi, 0.0)
    }

    /// Additive root of `c(π₋, δπ) + offset + δ = 1`. `F` is affine between
    /// the breakpoints `π₋ⁱ/πⁱ` and strictly increasing, so the root is found by
    /// a scan over the sorted breakpoints and one affine solve.
    fn solve_affine_segments(&self, pi_minus: &[f64], pi: &[f64], offset: f64) -> f64 {
        let f = |delta: f64| self.scaled_cost(pi_minus, pi, delta) + offset + delta;
        let f_one = f(1.0);
        if (f_one - 1.0).abs() <= UNIT_ROOT_TOL {
            return 1.0;
        }
        let mut lo = 0.0;
        let mut f_lo = f(0.0);
        if f_lo >= 1.0 {
            return 0.0;
        }
        let mut breaks: Vec<f64> = pi_minus
            .iter()
            .zip(pi)
            .filter(|&(_, &to)| to > 0.0)
            .map(|(&from, &to)| from / to)
            .filter(|&b| b > 0.0 && b < 1.0)
            .collect();
        breaks.sort_by(f64::total_cmp);
        breaks.push(1.0);
        for hi in breaks {
            if hi <= lo {
                continue;
            }
            let f_hi = if hi == 1.0 { f_one } else { f(hi) };
            if f_hi >= 1.0 {
                let mid = 0.5 * (lo + hi);
                let slope = 1.0
                    + pi_minus
                        .iter()
                        .zip(pi)
                        .enumerate()
                        .map(|(i, (&from, &to))| {
                            if to == 0.0 {
                                0.0
                            } else if mid * to > from {
                                self.buy[i] * to
                            } else {
                                -self.sell[i] * to
                            }
                        })
                        .sum::<f64>();
                let root = lo + (1.0 - f_lo) / slope;
                return root.clamp(lo, hi);
            }
            lo = hi;
            f_lo = f_hi;
        }
        // F(1) >= 1 always holds, so the scan returns before reaching here.
        1.0
    }

    /// Share-space cost `c̃(N_before, N_after, S)` with the same rates; the buy
    /// rate applies to shares bought and the sell rate to shares sold.
    pub fn share_cost(&self, before: &[f64], after: &[f64], prices: &[f64]) -> f64 {
        let prop = self.share_cost_proportional(before, after, prices);
        match self.variant {
            CostVariant::Additive => prop + self.fixed,
            CostVariant::Max => prop.max(self.fixed),
        }
    }

    pub fn share_cost_proportional(&self, before: &[f64], after: &[f64], prices: &[f64]) -> f64 {
        (0..self.n_assets())
            .map(|i| {
                let diff = after[i] - before[i];
                if diff > 0.0 {
                    self.buy[i] * prices[i] * diff
                } else {
                    -self.sell[i] * prices[i] * diff
                }
            })
            .sum()
    }

    /// `η = −ln(1 − 2ĉ/(1 − ĉ))`, infinite once `ĉ ≥ 1/3`.
    pub fn eta(&self) -> f64 {
        drag(self.c_hat(), 0.0)
    }

    /// `η_M = −ln(1 − (2ĉ + C/M)/(1 − ĉ))`, infinite when the argument is not positive.
    pub fn eta_at(&self, m: f64) -> f64 {
        let fixed = if self.fixed > 0.0 { self.fixed / m } else { 0.0 };
        drag(self.c_hat(), fixed)
    }

    /// Lower bound `1 − (2ĉ + C/x)/(1 − ĉ)` on `e(·, ·, x)`.
    pub fn e_lower_bound(&self, x_minus: f64) -> f64 {
        let c = self.c_hat();
        let fixed = if self.fixed > 0.0 { self.fixed / x_minus } else { 0.0 };
        1.0 - (2.0 * c + fixed) / (1.0 - c)
    }

    /// `x* = inf{x : e(π₋, π, x) > 0 for all π₋, π}` by bisection over
    /// vertex pairs `(eᵢ, eⱼ)`, where the affordability test is tightest.
    pub fn x_star(&self) -> f64 {
        if self.fixed == 0.0 {
            return 0.0;
        }
        let d = self.n_assets();
        let vertex = |i: usize| {
            let mut v = vec![0.0; d];
            v[i] = 1.0;
            v
        };
        let vertices: Vec<Vec<f64>> = (0..d).map(vertex).collect();
        let affordable = |x: f64| {
            vertices
                .iter()
                .all(|a| vertices.iter().all(|b| self.solve_e(a, b, x) > 0.0))
        };
        let mut hi = self.fixed;
        while !affordable(hi) {
            hi *= 2.0;
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if affordable(mid) { hi = mid } else { lo = mid }
        }
        hi
    }

    /// Default log-spaced search grid for `M` over `[1.01 x*, 10⁶ C]`.
    pub fn default_m_grid(&self) -> Vec<f64> {
        if self.fixed == 0.0 {
            return Vec::new();
        }
        let lo = (self.x_star() * 1.01).max(self.fixed * 1e-6);
        let hi = self.fixed * 1e6;
        let n = DEFAULT_M_GRID_POINTS;
        let step = (hi / lo).ln() / (n - 1) as f64;
        (0..n).map(|k| lo * (step * k as f64).exp()).collect()
    }

    /// Constants for the growth-versus-drag comparison. Fails when (A6) does
    /// not hold or no grid value of `M` makes `η_M < p̂`.
    pub fn constants(&self, p_hat: f64, m_grid: Option<&[f64]>) -> Result<CostConstants, CostError> {
        let c_hat = self.c_hat();
        let eta = self.eta();
        if !(eta < p_hat) {
            return Err(CostError::A6Violated { eta, p_hat });
        }
        if self.fixed == 0.0 {
            return Ok(CostConstants { c_hat, eta, eta_m: eta, m: 0.0, m_star: 0.0, x_star: 0.0 });
        }
        let x_star = self.x_star();
        let default_grid;
        let grid = match m_grid {
            Some(g) => g,
            None => {
                default_grid = self.default_m_grid();
                &default_grid
            }
        };
        let m = grid
            .iter()
            .copied()
            .filter(|&m| m > x_star)
            .find(|&m| self.eta_at(m) < p_hat)
            .ok_or(CostError::NoAdmissibleM { p_hat })?;
        let eta_m = self.eta_at(m);
        Ok(CostConstants { c_hat, eta, eta_m, m, m_star: m * eta_m.exp(), x_star })
    }
}

fn drag(c_hat: f64, fixed_ratio: f64) -> f64 {
    let arg = 1.0 - (2.0 * c_hat + fixed_ratio) / (1.0 - c_hat);
    if arg > 0.0 { -arg.ln() } else { f64::INFINITY }
}

/// `g(v) = v / Σvⁱ`.
pub fn project_g(v: &[f64]) -> Result<Vec<f64>, CostError> {
    let s: f64 = v.iter().sum();
    if !(s > 0.0) {
        return Err(CostError::ZeroProjection);
    }
    Ok(v.iter().map(|x| x / s).collect())
}

/// `(π ⋄ ζ)ⁱ = πⁱζⁱ / Σⱼ πʲζʲ`: proportions after one period of returns.
pub fn diamond(pi: &[f64], zeta: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; pi.len()];
    diamond_into(pi, zeta, &mut out);
    out
}

/// In-place [`diamond`]; returns the portfolio gross return `π·ζ`.
pub fn diamond_into(pi: &[f64], zeta: &[f64], out: &mut [f64]) -> f64 {
    let mut s = 0.0;
    for ((o, p), z) in out.iter_mut().zip(pi).zip(zeta) {
        *o = p * z;
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
    s
}

/// Sample share-space triples and check that `candidate` is sandwiched
/// between the proportional part of `lower` and the proportional part plus
/// fixed charge of `upper`, and that it is subadditive along `N₁ → N₂ → N₃`.
pub fn general_cost_check<F>(
    lower: &CostSpec,
    candidate: F,
    upper: &CostSpec,
    samples: usize,
    seed: u64,
) -> SandwichReport
where
    F: Fn(&[f64], &[f64], &[f64]) -> f64,
{
    let d = lower.n_assets();
    let mut rng = path_rng(seed, 0);
    let mut draw = |lo: f64, hi: f64| -> Vec<f64> {
        (0..d).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect()
    };
    let (mut low, mut up, mut sub) = (0, 0, 0);
    for _ in 0..samples {
        let n1 = draw(0.0, 10.0);
        let n2 = draw(0.0, 10.0);
        let n3 = draw(0.0, 10.0);
        let s = draw(0.5, 2.0);
        let scale = 1.0 + s.iter().zip(n1.iter().chain(&n2)).map(|(a, b)| a * b).sum::<f64>();
        let tol = 1e-12 * scale;
        let c12 = candidate(&n1, &n2, &s);
        let floor = lower.share_cost_proportional(&n1, &n2, &s);
        let cap = upper.share_cost_proportional(&n1, &n2, &s) + upper.fixed;
        if c12 < floor - tol {
            low += 1;
        }
        if c12 > cap + tol {
            up += 1;
        }
        let c13 = candidate(&n1, &n3, &s);
        let c23 = candidate(&n2, &n3, &s);
        if c13 > c12 + c23 + tol {
            sub += 1;
        }
    }
    SandwichReport {
        samples,
        lower_violations: low,
        upper_violations: up,
        subadditivity_violations: sub,
        passed: low == 0 && up == 0 && sub == 0,
    }
}
