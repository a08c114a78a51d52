//! Finite Markov-modulated market: factor chain `Z(t)`, i.i.d. shocks `ξ(t)`
//! and the gross return table `ζⁱ(z, ξ)`.
//!
//! Prices evolve as `Sⁱ(t+1) = Sⁱ(t) · ζⁱ(Z(t+1), ξ(t+1))`; the return realised
//! over `(t, t+1]` is driven by the factor state at `t+1`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default horizon searched for a contracting power of the transition matrix.
pub const DEFAULT_DOBRUSHIN_MAX_STEP: usize = 64;

const SUM_TOL: f64 = 1e-12;
const SIMPLEX_TOL: f64 = 1e-9;
const RESIDUAL_TOL: f64 = 1e-12;
const POWER_ITERATION_CAP: usize = 1_000_000;
const DIRECT_SOLVE_MAX_STATES: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MarketError {
    #[error("malformed model: {0}")]
    Shape(String),
    #[error("factor chain is not uniformly ergodic: {0}")]
    NotErgodic(String),
    #[error("factor state {0} out of range")]
    BadFactor(usize),
    #[error("portfolio outside the unit simplex: {0}")]
    Domain(String),
}

/// Immutable market description. Shapes are checked on construction; the
/// probabilistic invariants are reported by [`MarketModel::validate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketModel {
    n_assets: usize,
    n_factors: usize,
    n_shocks: usize,
    /// Row-major `n_factors × n_factors`.
    transition: Vec<f64>,
    shock_probs: Vec<f64>,
    /// Indexed `[(z * n_shocks + ξ) * n_assets + i]`.
    returns: Vec<f64>,
    #[serde(skip)]
    transition_cdf: Vec<f64>,
    #[serde(skip)]
    shock_cdf: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
}

impl Status {
    fn from_bool(ok: bool) -> Self {
        if ok { Status::Pass } else { Status::Fail }
    }
}

/// Outcome of [`MarketModel::validate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub passed: bool,
    /// Bounded expected log-return; follows from strictly positive finite returns.
    pub a2_bounded_log_return: Status,
    /// Some power of the transition matrix contracts in total variation.
    pub a3_uniform_ergodicity: Status,
    /// Returns strictly positive.
    pub a5_positive_returns: Status,
    pub dobrushin_n: Option<usize>,
    pub kappa: f64,
    pub violations: Vec<String>,
}

/// Ergodic and large-deviation summary of the factor/shock process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErgodicReport {
    pub invariant_measure: Vec<f64>,
    pub dobrushin_n: usize,
    pub kappa: f64,
    pub p_hat: f64,
    pub eta: f64,
    pub satisfies_a6: bool,
}

/// Worst-asset return table `ζ̂(z, ξ) = minᵢ ζⁱ(z, ξ)` and its stationary mean log `p̂`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthFloor {
    pub p_hat: f64,
    /// Indexed `[z * n_shocks + ξ]`.
    pub zeta_hat: Vec<f64>,
}

fn cdf(probs: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    let mut out: Vec<f64> = probs
        .iter()
        .map(|p| {
            acc += p;
            acc
        })
        .collect();
    // The last atom with positive mass absorbs rounding so a uniform draw in
    // [0, 1) always lands somewhere.
    if let Some(last) = probs.iter().rposition(|&p| p > 0.0) {
        for c in &mut out[last..] {
            *c = f64::INFINITY;
        }
    }
    out
}

fn sample_index(cdf: &[f64], u: f64) -> usize {
    cdf.iter().position(|&c| u < c).unwrap_or(cdf.len() - 1)
}

/// Per-path generator: ChaCha8 keyed by the run seed, one stream per path.
pub type PathRng = ChaCha8Rng;

pub fn path_rng(seed: u64, stream: u64) -> PathRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn mat_mul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

impl MarketModel {
    /// `transition[z][z']`, `shock_probs[ξ]`, `returns[z][ξ][i]`.
    pub fn new(
        transition: Vec<Vec<f64>>,
        shock_probs: Vec<f64>,
        returns: Vec<Vec<Vec<f64>>>,
    ) -> Result<Self, MarketError> {
        let n_factors = transition.len();
        if n_factors == 0 {
            return Err(MarketError::Shape("no factor states".into()));
        }
        if transition.iter().any(|row| row.len() != n_factors) {
            return Err(MarketError::Shape("transition matrix is not square".into()));
        }
        let n_shocks = shock_probs.len();
        if n_shocks == 0 {
            return Err(MarketError::Shape("no shock atoms".into()));
        }
        if returns.len() != n_factors {
            return Err(MarketError::Shape(format!(
                "returns table has {} factor blocks, expected {n_factors}",
                returns.len()
            )));
        }
        let n_assets = returns[0].first().map_or(0, Vec::len);
        if n_assets == 0 {
            return Err(MarketError::Shape("no assets".into()));
        }
        for (z, block) in returns.iter().enumerate() {
            if block.len() != n_shocks {
                return Err(MarketError::Shape(format!(
                    "returns[{z}] has {} shock rows, expected {n_shocks}",
                    block.len()
                )));
            }
            if block.iter().any(|r| r.len() != n_assets) {
                return Err(MarketError::Shape(format!(
                    "returns[{z}] has a row without {n_assets} assets"
                )));
            }
        }
        let transition: Vec<f64> = transition.into_iter().flatten().collect();
        let returns: Vec<f64> = returns.into_iter().flatten().flatten().collect();
        if transition.iter().chain(&shock_probs).chain(&returns).any(|v| !v.is_finite()) {
            return Err(MarketError::Shape("non-finite entry".into()));
        }
        let transition_cdf = transition.chunks(n_factors).flat_map(cdf).collect();
        let shock_cdf = cdf(&shock_probs);
        Ok(Self {
            n_assets,
            n_factors,
            n_shocks,
            transition,
            shock_probs,
            returns,
            transition_cdf,
            shock_cdf,
        })
    }

    /// Rebuild the sampling tables after deserialisation.
    pub fn rehydrate(mut self) -> Self {
        self.transition_cdf = self.transition.chunks(self.n_factors).flat_map(cdf).collect();
        self.shock_cdf = cdf(&self.shock_probs);
        self
    }

    pub fn n_assets(&self) -> usize {
        self.n_assets
    }

    pub fn n_factors(&self) -> usize {
        self.n_factors
    }

    pub fn n_shocks(&self) -> usize {
        self.n_shocks
    }

    pub fn transition(&self, z: usize, z_next: usize) -> f64 {
        self.transition[z * self.n_factors + z_next]
    }

    pub fn transition_row(&self, z: usize) -> &[f64] {
        &self.transition[z * self.n_factors..(z + 1) * self.n_factors]
    }

    pub fn shock_probs(&self) -> &[f64] {
        &self.shock_probs
    }

    /// Gross return vector `ζ(z, ξ)`.
    pub fn returns(&self, z: usize, xi: usize) -> &[f64] {
        let start = (z * self.n_shocks + xi) * self.n_assets;
        &self.returns[start..start + self.n_assets]
    }

    pub fn min_return(&self) -> f64 {
        self.returns.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_return(&self) -> f64 {
        self.returns.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Check stochasticity, positivity and uniform ergodicity. Never fails;
    /// every violation is listed in the report.
    pub fn validate(&self, n_max: usize) -> ValidationReport {
        let mut violations = Vec::new();
        let mut stochastic = true;
        for z in 0..self.n_factors {
            let row = self.transition_row(z);
            if row.iter().any(|&p| p < 0.0) {
                stochastic = false;
                violations.push(format!("transition row {z} has a negative entry"));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > SUM_TOL {
                stochastic = false;
                violations.push(format!("transition row {z} sums to {s}"));
            }
        }
        if self.shock_probs.iter().any(|&p| p < 0.0) {
            stochastic = false;
            violations.push("shock law has a negative entry".into());
        }
        let s: f64 = self.shock_probs.iter().sum();
        if (s - 1.0).abs() > SUM_TOL {
            stochastic = false;
            violations.push(format!("shock law sums to {s}"));
        }
        let positive = self.returns.iter().all(|&r| r > 0.0);
        if !positive {
            violations.push("(A5) returns table has a non-positive entry".into());
        }
        let mixing = if stochastic { self.first_contracting_step(n_max) } else { None };
        let kappa = mixing.map_or(1.0, |(_, k)| k);
        if stochastic && mixing.is_none() {
            violations.push(format!("(A3) no n <= {n_max} with Dobrushin coefficient < 1"));
        }
        let a3 = mixing.is_some();
        ValidationReport {
            passed: stochastic && positive && a3,
            a2_bounded_log_return: Status::from_bool(positive),
            a3_uniform_ergodicity: Status::from_bool(a3),
            a5_positive_returns: Status::from_bool(positive),
            dobrushin_n: mixing.map(|(n, _)| n),
            kappa,
            violations,
        }
    }

    /// `Pⁿ` as a row-major matrix.
    pub fn transition_power(&self, n: usize) -> Vec<f64> {
        let dim = self.n_factors;
        let mut result: Vec<f64> = (0..dim * dim)
            .map(|i| if i / dim == i % dim { 1.0 } else { 0.0 })
            .collect();
        let mut base = self.transition.clone();
        let mut e = n;
        while e > 0 {
            if e & 1 == 1 {
                result = mat_mul(&result, &base, dim);
            }
            e >>= 1;
            if e > 0 {
                base = mat_mul(&base, &base, dim);
            }
        }
        result
    }

    /// Dobrushin coefficient `κₙ = max_{z,z'} ½ ‖Pⁿ(z,·) − Pⁿ(z',·)‖₁`.
    pub fn dobrushin(&self, n: usize) -> f64 {
        assert!(n >= 1, "dobrushin step must be at least 1");
        let dim = self.n_factors;
        let pn = self.transition_power(n);
        let mut kappa: f64 = 0.0;
        for a in 0..dim {
            for b in (a + 1)..dim {
                let tv: f64 = (0..dim)
                    .map(|j| (pn[a * dim + j] - pn[b * dim + j]).abs())
                    .sum::<f64>()
                    * 0.5;
                kappa = kappa.max(tv);
            }
        }
        kappa.min(1.0)
    }

    /// Smallest `n ≤ n_max` with `κₙ < 1`, together with `κₙ`.
    pub fn first_contracting_step(&self, n_max: usize) -> Option<(usize, f64)> {
        (1..=n_max)
            .map(|n| (n, self.dobrushin(n)))
            .find(|&(_, k)| k < 1.0 - 1e-15)
    }

    /// Unique invariant probability vector `θ` with `θP = θ`.
    pub fn invariant_measure(&self) -> Result<Vec<f64>, MarketError> {
        let n = self.n_factors;
        if n == 1 {
            return Ok(vec![1.0]);
        }
        let theta = if n <= DIRECT_SOLVE_MAX_STATES {
            self.invariant_direct()?
        } else {
            self.invariant_power()?
        };
        let residual = self.stationarity_residual(&theta);
        if residual > RESIDUAL_TOL {
            return Err(MarketError::NotErgodic(format!(
                "invariant measure residual {residual:e} above {RESIDUAL_TOL:e}"
            )));
        }
        Ok(theta)
    }

    /// `max_j |(θP)_j − θ_j|`.
    pub fn stationarity_residual(&self, theta: &[f64]) -> f64 {
        let n = self.n_factors;
        (0..n)
            .map(|j| {
                let tp: f64 = (0..n).map(|i| theta[i] * self.transition(i, j)).sum();
                (tp - theta[j]).abs()
            })
            .fold(0.0, f64::max)
    }

    fn invariant_direct(&self) -> Result<Vec<f64>, MarketError> {
        let n = self.n_factors;
        // Rows 0..n-1 of (Pᵀ − I) plus the normalisation Σθ = 1.
        let mut a = vec![0.0; n * n];
        let mut b = vec![0.0; n];
        for i in 0..n - 1 {
            for j in 0..n {
                a[i * n + j] = self.transition(j, i) - if i == j { 1.0 } else { 0.0 };
            }
        }
        for j in 0..n {
            a[(n - 1) * n + j] = 1.0;
        }
        b[n - 1] = 1.0;
        let mut theta = gauss_solve(a, b, n).ok_or_else(|| {
            MarketError::NotErgodic("stationary equations are singular".into())
        })?;
        if theta.iter().any(|&t| t < -1e-9) {
            return Err(MarketError::NotErgodic(
                "stationary solution has negative mass".into(),
            ));
        }
        for t in &mut theta {
            *t = t.max(0.0);
        }
        // A few power steps remove the elimination rounding.
        for _ in 0..4 {
            let mut next = vec![0.0; n];
            for (i, &ti) in theta.iter().enumerate() {
                for (j, nj) in next.iter_mut().enumerate() {
                    *nj += ti * self.transition(i, j);
                }
            }
            let s: f64 = next.iter().sum();
            theta = next.into_iter().map(|t| t / s).collect();
        }
        Ok(theta)
    }

    fn invariant_power(&self) -> Result<Vec<f64>, MarketError> {
        let n = self.n_factors;
        let mut theta = vec![1.0 / n as f64; n];
        for _ in 0..POWER_ITERATION_CAP {
            // Lazy chain (I + P)/2 has the same invariant measure and no periodicity.
            let mut next: Vec<f64> = theta.iter().map(|t| 0.5 * t).collect();
            for (i, &ti) in theta.iter().enumerate() {
                for (j, nj) in next.iter_mut().enumerate() {
                    *nj += 0.5 * ti * self.transition(i, j);
                }
            }
            let s: f64 = next.iter().sum();
            for t in &mut next {
                *t /= s;
            }
            theta = next;
            if self.stationarity_residual(&theta) <= RESIDUAL_TOL {
                return Ok(theta);
            }
        }
        Err(MarketError::NotErgodic(format!(
            "power iteration did not converge in {POWER_ITERATION_CAP} steps"
        )))
    }

    /// `ζ̂` table and `p̂ = Σ_z θ(z) Σ_ξ ν(ξ) ln ζ̂(z, ξ)`.
    pub fn growth_floor(&self) -> Result<GrowthFloor, MarketError> {
        let theta = self.invariant_measure()?;
        let zeta_hat: Vec<f64> = (0..self.n_factors)
            .flat_map(|z| (0..self.n_shocks).map(move |xi| (z, xi)))
            .map(|(z, xi)| self.returns(z, xi).iter().copied().fold(f64::INFINITY, f64::min))
            .collect();
        let p_hat = (0..self.n_factors)
            .map(|z| {
                theta[z]
                    * (0..self.n_shocks)
                        .map(|xi| self.shock_probs[xi] * zeta_hat[z * self.n_shocks + xi].ln())
                        .sum::<f64>()
            })
            .sum();
        Ok(GrowthFloor { p_hat, zeta_hat })
    }

    /// `min_i ζⁱ(z, ξ)`.
    pub fn worst_return(&self, z: usize, xi: usize) -> f64 {
        self.returns(z, xi).iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Expected one-step log growth `h(π, z) = Σ_{z'} P(z,z') Σ_ξ ν(ξ) ln(π·ζ(z', ξ))`.
    pub fn expected_log_return(&self, pi: &[f64], z: usize) -> Result<f64, MarketError> {
        if z >= self.n_factors {
            return Err(MarketError::BadFactor(z));
        }
        check_simplex(pi, self.n_assets)?;
        Ok(self.expected_log_return_unchecked(pi, z))
    }

    pub(crate) fn expected_log_return_unchecked(&self, pi: &[f64], z: usize) -> f64 {
        let mut h = 0.0;
        for z_next in 0..self.n_factors {
            let p = self.transition(z, z_next);
            if p == 0.0 {
                continue;
            }
            let inner: f64 = (0..self.n_shocks)
                .filter(|&xi| self.shock_probs[xi] > 0.0)
                .map(|xi| self.shock_probs[xi] * dot(pi, self.returns(z_next, xi)).ln())
                .sum();
            h += p * inner;
        }
        h
    }

    /// Draw `(Z(t+1), ξ(t+1))` given `Z(t) = z`.
    pub fn step<R: Rng + ?Sized>(&self, z: usize, rng: &mut R) -> (usize, usize) {
        let n = self.n_factors;
        let z_next = sample_index(&self.transition_cdf[z * n..(z + 1) * n], rng.random::<f64>());
        let xi = sample_index(&self.shock_cdf, rng.random::<f64>());
        (z_next, xi)
    }

    /// Stationary expectation `Σ_z θ(z) Σ_ξ ν(ξ) f(z, ξ)`.
    pub fn stationary_expectation<F: Fn(usize, usize) -> f64>(
        &self,
        f: F,
    ) -> Result<f64, MarketError> {
        let theta = self.invariant_measure()?;
        Ok((0..self.n_factors)
            .map(|z| {
                theta[z]
                    * (0..self.n_shocks)
                        .map(|xi| self.shock_probs[xi] * f(z, xi))
                        .sum::<f64>()
            })
            .sum())
    }

    /// Ergodic summary; `eta` is the worst-case proportional rebalancing drag.
    pub fn ergodic_report(&self, eta: f64, n_max: usize) -> Result<ErgodicReport, MarketError> {
        let invariant_measure = self.invariant_measure()?;
        let (dobrushin_n, kappa) = self.first_contracting_step(n_max).ok_or_else(|| {
            MarketError::NotErgodic(format!("no contracting step up to {n_max}"))
        })?;
        let p_hat = self.growth_floor()?.p_hat;
        Ok(ErgodicReport {
            invariant_measure,
            dobrushin_n,
            kappa,
            p_hat,
            eta,
            satisfies_a6: eta < p_hat,
        })
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Accept `pi` if it lies in the closed unit simplex up to `1e-9`.
pub fn check_simplex(pi: &[f64], d: usize) -> Result<(), MarketError> {
    if pi.len() != d {
        return Err(MarketError::Domain(format!("expected {d} weights, got {}", pi.len())));
    }
    if pi.iter().any(|&p| !(p >= -SIMPLEX_TOL)) {
        return Err(MarketError::Domain(format!("negative weight in {pi:?}")));
    }
    let s: f64 = pi.iter().sum();
    if (s - 1.0).abs() > SIMPLEX_TOL {
        return Err(MarketError::Domain(format!("weights sum to {s}")));
    }
    Ok(())
}

/// Gaussian elimination with partial pivoting; `None` when singular.
fn gauss_solve(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Option<Vec<f64>> {
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))?;
        if a[piv * n + col].abs() < 1e-13 {
            return None;
        }
        if piv != col {
            for j in 0..n {
                a.swap(piv * n + j, col * n + j);
            }
            b.swap(piv, col);
        }
        for row in (col + 1)..n {
            let f = a[row * n + col] / a[col * n + col];
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                a[row * n + j] -= f * a[col * n + j];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = ((row + 1)..n).map(|j| a[row * n + j] * x[j]).sum();
        x[row] = (b[row] - s) / a[row * n + row];
    }
    Some(x)
}
