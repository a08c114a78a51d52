//! Discounted dynamic programming on the state grid.
//!
//! The post-decision continuation
//!
//! ```text
//! N(π, j, z) = h(π, z) + β Σ_{z′,ξ} P(z,z′) ν(ξ) v(π ⋄ ζ, x_j·(π·ζ), z′)
//! ```
//! is a sparse linear map of `v` (simplex stencil × linear interpolation in
//! log-wealth), precomputed once per problem. The Bellman operator is then
//!
//! ```text
//! Tv(a, j, z) = max( N(a, j, z),  max_{b ≠ a, e > 0} ln e(a, b, x_j) + N(b, x_j·e, z) )
//! ```
//! with `N` interpolated linearly in log-wealth for the off-grid post-trade wealth.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{CostError, CostSpec, diamond_into};
use crate::exec::{self, Parallelism};
use crate::grid::{GridError, GridSpec, StateGrid, split_coordinate};
use crate::market::{MarketError, MarketModel};

/// Marker for an impulse value with no affordable target.
pub const INFEASIBLE: f64 = -1e18;
pub const DEFAULT_TIE_EPS: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DpError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error("inconsistent inputs: {0}")]
    Mismatch(String),
    #[error("discount factor must lie in (0, 1), got {0}")]
    BadBeta(f64),
    #[error(
        "value iteration hit the cap of {iterations} sweeps at beta = {beta} \
         (sup |dv| = {sup_delta:e}, span dv = {span_delta:e})"
    )]
    IterationCap { beta: f64, iterations: usize, sup_delta: f64, span_delta: f64 },
}

/// With the fixed charge and a wealth axis, or the proportional-only problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueVariant {
    WithFixed,
    Proportional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StopRule {
    /// `‖v_{k+1} − v_k‖∞ ≤ tol·(1−β)/β`.
    Sup,
    /// MacQueen bounds: stop when `β/(1−β)·span(v_{k+1} − v_k)/2 ≤ tol` and
    /// return the midpoint of the bracket.
    #[default]
    Span,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    pub tol: f64,
    pub tie_eps: f64,
    pub max_iter: usize,
    pub stop: StopRule,
    pub parallelism: Parallelism,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            tie_eps: DEFAULT_TIE_EPS,
            max_iter: 2_000_000,
            stop: StopRule::Span,
            parallelism: Parallelism::Parallel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueFunction {
    pub grid: GridSpec,
    pub beta: f64,
    pub variant: ValueVariant,
    pub values: Vec<f64>,
}

impl ValueFunction {
    pub fn sup(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn inf(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PolicyTag {
    Discounted { beta: f64 },
    Average { beta: f64 },
}

/// Impulse region and target node for every grid state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub grid: GridSpec,
    pub tag: PolicyTag,
    pub impulse: Vec<bool>,
    pub target: Vec<usize>,
}

impl Policy {
    pub fn has_wealth_axis(&self) -> bool {
        self.grid.wealth.is_some()
    }

    pub fn impulse_count(&self) -> usize {
        self.impulse.iter().filter(|&&b| b).count()
    }

    /// Fraction of states where impulse flag or target differ.
    pub fn disagreement(&self, other: &Policy) -> f64 {
        let n = self.impulse.len().min(other.impulse.len());
        if n == 0 {
            return 0.0;
        }
        let diff = (0..n)
            .filter(|&s| self.impulse[s] != other.impulse[s] || self.target[s] != other.target[s])
            .count();
        diff as f64 / n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub beta: f64,
    pub init_iterations: usize,
    pub iterations: usize,
    pub sup_delta: f64,
    pub span_delta: f64,
    /// Guaranteed `‖v − v_β‖∞` on the grid model.
    pub error_bound: f64,
    pub stop: StopRule,
    pub impulse_states: usize,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub value: ValueFunction,
    pub policy: Policy,
    pub report: IterationReport,
}

#[derive(Debug, Clone, Copy)]
struct Impulse {
    log_e: f64,
    j0: u32,
    w: f64,
}

/// A discounted problem with all β-independent tables precomputed.
#[derive(Debug, Clone)]
pub struct DiscountedProblem {
    model: MarketModel,
    spec: CostSpec,
    grid: StateGrid,
    variant: ValueVariant,
    /// `h(k, z)` at `k·n_z + z`.
    h: Vec<f64>,
    row_start: Vec<usize>,
    cols: Vec<u32>,
    coefs: Vec<f64>,
    /// `(a·n_w + j)·K + b`.
    impulses: Vec<Impulse>,
    mode: Parallelism,
}

impl DiscountedProblem {
    /// Builds the problem. A grid without a wealth axis gives the
    /// proportional-only problem and the fixed charge is dropped.
    pub fn new(
        model: &MarketModel,
        spec: &CostSpec,
        grid: &StateGrid,
        mode: Parallelism,
    ) -> Result<Self, DpError> {
        spec.check()?;
        let d = model.n_assets();
        if spec.n_assets() != d || grid.simplex.dim() != d {
            return Err(DpError::Mismatch(format!(
                "model has {d} assets, costs {}, grid {}",
                spec.n_assets(),
                grid.simplex.dim()
            )));
        }
        if grid.n_factors != model.n_factors() {
            return Err(DpError::Mismatch(format!(
                "model has {} factor states, grid {}",
                model.n_factors(),
                grid.n_factors
            )));
        }
        let (variant, spec) = match grid.wealth {
            Some(_) => (ValueVariant::WithFixed, spec.clone()),
            None => (ValueVariant::Proportional, spec.proportional_only()),
        };
        let k_nodes = grid.n_nodes();
        let nz = grid.n_factors;
        let nw = grid.n_wealth();
        let n_xi = model.n_shocks();
        let ln_r = grid.wealth.as_ref().map(|w| w.ln_ratio());

        let h = exec::map_indexed(mode, k_nodes * nz, |i| {
            model.expected_log_return_unchecked(grid.simplex.point(i / nz), i % nz)
        });

        // Stencils of π ⋄ ζ(z′, ξ) and wealth shift ln(π·ζ)/ln r per (k, z′, ξ).
        let moves: Vec<(Vec<(usize, f64)>, f64)> =
            exec::map_indexed(mode, k_nodes * nz * n_xi, |i| {
                let k = i / (nz * n_xi);
                let zn = (i / n_xi) % nz;
                let xi = i % n_xi;
                let mut next = vec![0.0; d];
                let g = diamond_into(grid.simplex.point(k), model.returns(zn, xi), &mut next);
                let shift = ln_r.map_or(0.0, |lr| g.ln() / lr);
                (grid.simplex.stencil(&next, grid.interp), shift)
            });

        let rows: Vec<Vec<(u32, f64)>> = exec::map_indexed(mode, grid.n_states(), |s| {
            let (k, j, z) = grid.unpack(s);
            let mut row: Vec<(u32, f64)> = Vec::new();
            for zn in 0..nz {
                let p = model.transition(z, zn);
                if p == 0.0 {
                    continue;
                }
                for (xi, &nu) in model.shock_probs().iter().enumerate() {
                    if nu == 0.0 {
                        continue;
                    }
                    let (stencil, shift) = &moves[(k * nz + zn) * n_xi + xi];
                    let (j0, wt) = if nw > 1 { split_coordinate(j as f64 + shift, nw) } else { (0, 0.0) };
                    for &(node, ws) in stencil {
                        let c = p * nu * ws;
                        row.push((grid.index(node, j0, zn) as u32, c * (1.0 - wt)));
                        if wt > 0.0 {
                            row.push((grid.index(node, j0 + 1, zn) as u32, c * wt));
                        }
                    }
                }
            }
            row.sort_by_key(|&(c, _)| c);
            let mut merged: Vec<(u32, f64)> = Vec::with_capacity(row.len());
            for (c, w) in row {
                match merged.last_mut() {
                    Some(last) if last.0 == c => last.1 += w,
                    _ => merged.push((c, w)),
                }
            }
            merged
        });
        let mut row_start = Vec::with_capacity(rows.len() + 1);
        let mut cols = Vec::new();
        let mut coefs = Vec::new();
        row_start.push(0);
        for row in rows {
            for (c, w) in row {
                cols.push(c);
                coefs.push(w);
            }
            row_start.push(cols.len());
        }

        let impulses = exec::map_indexed(mode, k_nodes * nw * k_nodes, |i| {
            let b = i % k_nodes;
            let j = (i / k_nodes) % nw;
            let a = i / (k_nodes * nw);
            let pa = grid.simplex.point(a);
            let pb = grid.simplex.point(b);
            let e = match grid.wealth_at(j) {
                Some(x) => spec.solve_e(pa, pb, x),
                None => spec.solve_e_prop(pa, pb),
            };
            if e <= 0.0 {
                return Impulse { log_e: f64::NEG_INFINITY, j0: 0, w: 0.0 };
            }
            let log_e = e.ln();
            let (j0, w) = match ln_r {
                Some(lr) => split_coordinate(j as f64 + log_e / lr, nw),
                None => (0, 0.0),
            };
            Impulse { log_e, j0: j0 as u32, w }
        });

        Ok(Self {
            model: model.clone(),
            spec,
            grid: grid.clone(),
            variant,
            h,
            row_start,
            cols,
            coefs,
            impulses,
            mode,
        })
    }

    pub fn model(&self) -> &MarketModel {
        &self.model
    }

    pub fn spec(&self) -> &CostSpec {
        &self.spec
    }

    pub fn grid(&self) -> &StateGrid {
        &self.grid
    }

    pub fn variant(&self) -> ValueVariant {
        self.variant
    }

    pub fn parallelism(&self) -> Parallelism {
        self.mode
    }

    pub fn set_parallelism(&mut self, mode: Parallelism) {
        self.mode = mode;
    }

    pub fn n_states(&self) -> usize {
        self.grid.n_states()
    }

    /// `h(π_k, z)`.
    pub fn h(&self, k: usize, z: usize) -> f64 {
        self.h[k * self.grid.n_factors + z]
    }

    pub fn h_table(&self) -> &[f64] {
        &self.h
    }

    /// `ln e(π_a, π_b, x_j)`, `−∞` when unaffordable.
    pub fn log_e(&self, a: usize, b: usize, j: usize) -> f64 {
        self.impulse(a, b, j).log_e
    }

    #[inline]
    fn impulse(&self, a: usize, b: usize, j: usize) -> &Impulse {
        let k = self.grid.n_nodes();
        &self.impulses[(a * self.grid.n_wealth() + j) * k + b]
    }

    /// `Σ q(s, s′) f(s′)` for the post-decision state `s`: one period of
    /// returns and factor move, with the grid's interpolation.
    #[inline]
    pub fn expect_next(&self, f: &[f64], s: usize) -> f64 {
        let (lo, hi) = (self.row_start[s], self.row_start[s + 1]);
        self.cols[lo..hi]
            .iter()
            .zip(&self.coefs[lo..hi])
            .map(|(&c, &w)| w * f[c as usize])
            .sum()
    }

    /// The transition row of post-decision state `s` as `(state, probability)`.
    pub fn kernel_row(&self, s: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (lo, hi) = (self.row_start[s], self.row_start[s + 1]);
        self.cols[lo..hi].iter().zip(&self.coefs[lo..hi]).map(|(&c, &w)| (c as usize, w))
    }

    /// Continuation `N = h + β·Q v` on every grid state.
    pub fn continuation(&self, v: &[f64], beta: f64, out: &mut [f64]) {
        let nz = self.grid.n_factors;
        let nw = self.grid.n_wealth();
        exec::fill_indexed(self.mode, out, |s| {
            let k = s / (nw * nz);
            let z = s % nz;
            self.h[k * nz + z] + beta * self.expect_next(v, s)
        });
    }

    /// `f(b, coordinate, z)` with linear interpolation between wealth nodes.
    #[inline]
    fn at_coordinate(&self, f: &[f64], b: usize, imp: &Impulse, z: usize) -> f64 {
        let j0 = imp.j0 as usize;
        let lo = f[self.grid.index(b, j0, z)];
        if imp.w > 0.0 {
            (1.0 - imp.w) * lo + imp.w * f[self.grid.index(b, j0 + 1, z)]
        } else {
            lo
        }
    }

    /// Best single transaction from state `s` against the post-decision
    /// function `f`: `max_{b ≠ a} ln e + f(b, x_j·e, z)`. Lowest index wins ties.
    pub fn best_transaction(&self, f: &[f64], s: usize) -> (f64, Option<usize>) {
        let (a, j, z) = self.grid.unpack(s);
        let mut best = INFEASIBLE;
        let mut arg = None;
        for b in 0..self.grid.n_nodes() {
            if b == a {
                continue;
            }
            let imp = self.impulse(a, b, j);
            if imp.log_e == f64::NEG_INFINITY {
                continue;
            }
            let val = imp.log_e + self.at_coordinate(f, b, imp, z);
            if val > best {
                best = val;
                arg = Some(b);
            }
        }
        (best, arg)
    }

    /// Impulse operator `Mv(s) = max_π ln e(π₋, π, x₋) + v(π, x₋·e, z)` over
    /// every node, the current one included. Returns the sentinel and `None`
    /// when no target is affordable.
    pub fn impulse_operator(&self, v: &[f64], s: usize) -> (f64, Option<usize>) {
        let (a, j, z) = self.grid.unpack(s);
        let mut best = INFEASIBLE;
        let mut arg = None;
        for b in 0..self.grid.n_nodes() {
            let imp = self.impulse(a, b, j);
            if imp.log_e == f64::NEG_INFINITY {
                continue;
            }
            let val = imp.log_e + self.at_coordinate(v, b, imp, z);
            if val > best {
                best = val;
                arg = Some(b);
            }
        }
        (best, arg)
    }

    /// Bellman update from a precomputed continuation.
    fn apply_from_continuation(&self, n: &[f64], out: &mut [f64]) {
        exec::fill_indexed(self.mode, out, |s| n[s].max(self.best_transaction(n, s).0));
    }

    /// One application of the Bellman operator.
    pub fn bellman_step(&self, v: &[f64], beta: f64) -> Vec<f64> {
        let mut n = vec![0.0; v.len()];
        self.continuation(v, beta, &mut n);
        let mut out = vec![0.0; v.len()];
        self.apply_from_continuation(&n, &mut out);
        out
    }

    /// Greedy policy of `v`: transact only when the best target beats staying
    /// put by more than `tie_eps`.
    pub fn greedy_policy(&self, v: &[f64], beta: f64, tie_eps: f64, tag: PolicyTag) -> Policy {
        let mut n = vec![0.0; v.len()];
        self.continuation(v, beta, &mut n);
        let choices = exec::map_indexed(self.mode, v.len(), |s| {
            let (tx, arg) = self.best_transaction(&n, s);
            match arg {
                Some(b) if tx > n[s] + tie_eps => (true, b),
                _ => (false, self.grid.unpack(s).0),
            }
        });
        Policy {
            grid: self.grid.spec(),
            tag,
            impulse: choices.iter().map(|c| c.0).collect(),
            target: choices.iter().map(|c| c.1).collect(),
        }
    }

    /// One-period reward and post-decision state under action `b` at state `s`.
    pub fn action_reward(&self, s: usize, b: usize) -> Option<(f64, usize, f64)> {
        let (a, j, z) = self.grid.unpack(s);
        if a == b {
            return Some((self.h(a, z), s, 0.0));
        }
        let imp = self.impulse(a, b, j);
        if imp.log_e == f64::NEG_INFINITY {
            return None;
        }
        Some((imp.log_e + self.h(b, z), self.grid.index(b, imp.j0 as usize, z), imp.w))
    }

    /// `Σ q(s, f(s))(s′) u(s′)` with the post-trade wealth interpolated.
    pub fn expect_after_action(&self, u: &[f64], s: usize, b: usize) -> Option<f64> {
        let (_, post, w) = self.action_reward(s, b)?;
        let lo = self.expect_next(u, post);
        Some(if w > 0.0 {
            (1.0 - w) * lo + w * self.expect_next(u, post + self.grid.n_factors)
        } else {
            lo
        })
    }

    /// The value of never trading, by iterating the no-transaction branch.
    pub fn no_transaction_value(
        &self,
        beta: f64,
        opts: &SolveOptions,
    ) -> Result<(Vec<f64>, usize), DpError> {
        let n = self.n_states();
        let mut v = vec![0.0; n];
        let mut next = vec![0.0; n];
        for it in 1..=opts.max_iter {
            self.continuation(&v, beta, &mut next);
            let (sup, lo, hi) = delta_stats(&next, &v);
            std::mem::swap(&mut v, &mut next);
            if let Some(shift) = stop_shift(opts.stop, beta, opts.tol, sup, lo, hi) {
                v.iter_mut().for_each(|x| *x += shift);
                return Ok((v, it));
            }
        }
        let (sup, lo, hi) = delta_stats(&next, &v);
        Err(DpError::IterationCap { beta, iterations: opts.max_iter, sup_delta: sup, span_delta: hi - lo })
    }

    /// Value iteration from the no-transaction value to tolerance.
    pub fn solve(&self, beta: f64, opts: &SolveOptions) -> Result<Solution, DpError> {
        if !(beta > 0.0 && beta < 1.0) {
            return Err(DpError::BadBeta(beta));
        }
        let (mut v, init_iterations) = self.no_transaction_value(beta, opts)?;
        let n = self.n_states();
        let mut cont = vec![0.0; n];
        let mut next = vec![0.0; n];
        let mut last = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY);
        for it in 1..=opts.max_iter {
            self.continuation(&v, beta, &mut cont);
            self.apply_from_continuation(&cont, &mut next);
            let (sup, lo, hi) = delta_stats(&next, &v);
            last = (sup, lo, hi);
            std::mem::swap(&mut v, &mut next);
            if let Some(shift) = stop_shift(opts.stop, beta, opts.tol, sup, lo, hi) {
                v.iter_mut().for_each(|x| *x += shift);
                let policy =
                    self.greedy_policy(&v, beta, opts.tie_eps, PolicyTag::Discounted { beta });
                let error_bound = match opts.stop {
                    StopRule::Sup => beta / (1.0 - beta) * sup,
                    StopRule::Span => beta / (1.0 - beta) * (hi - lo) / 2.0,
                };
                let report = IterationReport {
                    beta,
                    init_iterations,
                    iterations: it,
                    sup_delta: sup,
                    span_delta: hi - lo,
                    error_bound,
                    stop: opts.stop,
                    impulse_states: policy.impulse_count(),
                };
                let value = ValueFunction {
                    grid: self.grid.spec(),
                    beta,
                    variant: self.variant,
                    values: v,
                };
                return Ok(Solution { value, policy, report });
            }
        }
        Err(DpError::IterationCap {
            beta,
            iterations: opts.max_iter,
            sup_delta: last.0,
            span_delta: last.2 - last.1,
        })
    }

    /// Largest improvement of two back-to-back transactions over the best of
    /// "stay" and "one transaction" on the continuation of `v`. The second
    /// trade is priced at the actual post-trade wealth.
    pub fn double_transaction_gain(&self, v: &[f64], beta: f64) -> f64 {
        let mut n = vec![0.0; v.len()];
        self.continuation(v, beta, &mut n);
        let k_nodes = self.grid.n_nodes();
        let ln_r = self.grid.wealth.as_ref().map(|w| w.ln_ratio());
        let nw = self.grid.n_wealth();
        let gains = exec::map_indexed(self.mode, v.len(), |s| {
            let (a, j, z) = self.grid.unpack(s);
            let single = n[s].max(self.best_transaction(&n, s).0);
            let mut double = f64::NEG_INFINITY;
            for b in (0..k_nodes).filter(|&b| b != a) {
                let first = self.impulse(a, b, j);
                if first.log_e == f64::NEG_INFINITY {
                    continue;
                }
                let x_mid = self.grid.wealth_at(j).map(|x| x * first.log_e.exp());
                for c in (0..k_nodes).filter(|&c| c != b) {
                    let (pb, pc) = (self.grid.simplex.point(b), self.grid.simplex.point(c));
                    let e2 = match x_mid {
                        Some(x) => self.spec.solve_e(pb, pc, x),
                        None => self.spec.solve_e_prop(pb, pc),
                    };
                    if e2 <= 0.0 {
                        continue;
                    }
                    let log_total = first.log_e + e2.ln();
                    let (j0, w) = match ln_r {
                        Some(lr) => split_coordinate(j as f64 + log_total / lr, nw),
                        None => (0, 0.0),
                    };
                    let imp = Impulse { log_e: log_total, j0: j0 as u32, w };
                    double = double.max(log_total + self.at_coordinate(&n, c, &imp, z));
                }
            }
            (double - single).max(0.0)
        });
        gains.into_iter().fold(0.0, f64::max)
    }

    /// Smallest `ẽ` over pairs of mesh nodes.
    pub fn min_prop_e(&self) -> f64 {
        let k = self.grid.n_nodes();
        let mut m = 1.0f64;
        for a in 0..k {
            for b in 0..k {
                m = m.min(self.spec.solve_e_prop(self.grid.simplex.point(a), self.grid.simplex.point(b)));
            }
        }
        m
    }

    /// `(n‖h‖_sp − (n + 2) ln e̲)/(1 − κ_n)` with `n` the first step at which
    /// the factor chain contracts and `e̲` the smallest mesh `ẽ`.
    pub fn span_bound(&self, n_max: usize) -> Option<SpanBound> {
        let (n, kappa) = self.model.first_contracting_step(n_max)?;
        let h_span = span(&self.h);
        let e_low = self.min_prop_e();
        let bound = (n as f64 * h_span - (n as f64 + 2.0) * e_low.ln()) / (1.0 - kappa);
        Some(SpanBound { n, kappa, h_span, e_low, bound })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanBound {
    pub n: usize,
    pub kappa: f64,
    pub h_span: f64,
    pub e_low: f64,
    pub bound: f64,
}

/// Solve one discounted problem.
pub fn solve_discounted(
    model: &MarketModel,
    spec: &CostSpec,
    grid: &StateGrid,
    beta: f64,
    opts: &SolveOptions,
) -> Result<Solution, DpError> {
    DiscountedProblem::new(model, spec, grid, opts.parallelism)?.solve(beta, opts)
}

/// `sup f − inf f`.
pub fn span(f: &[f64]) -> f64 {
    let (lo, hi) = f
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    if f.is_empty() { 0.0 } else { hi - lo }
}

/// Span seminorm of a proportional-only value function.
pub fn span_seminorm(v: &ValueFunction) -> Result<f64, DpError> {
    if v.variant != ValueVariant::Proportional {
        return Err(DpError::Mismatch("span seminorm is taken on the proportional-only value".into()));
    }
    Ok(span(&v.values))
}

fn delta_stats(new: &[f64], old: &[f64]) -> (f64, f64, f64) {
    new.iter().zip(old).fold((0.0f64, f64::INFINITY, f64::NEG_INFINITY), |(s, lo, hi), (a, b)| {
        let d = a - b;
        (s.max(d.abs()), lo.min(d), hi.max(d))
    })
}

fn stop_shift(rule: StopRule, beta: f64, tol: f64, sup: f64, lo: f64, hi: f64) -> Option<f64> {
    let factor = beta / (1.0 - beta);
    match rule {
        StopRule::Sup => (sup <= tol * (1.0 - beta) / beta).then_some(0.0),
        StopRule::Span => (factor * (hi - lo) / 2.0 <= tol).then(|| factor * (hi + lo) / 2.0),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapLevel {
    pub wealth: f64,
    pub max_gap: f64,
    pub min_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub levels: Vec<GapLevel>,
    pub negative_gaps: usize,
    pub monotonicity_violations: usize,
    pub passed: bool,
}

/// Compare `ṽ_β(π₋, z)` with `v_β(π₋, x₋, z)`: the gap must be non-negative
/// and non-increasing in wealth, both up to `tol`.
pub fn value_gap_check(
    v_fixed: &ValueFunction,
    v_prop: &ValueFunction,
    tol: f64,
) -> Result<GapReport, DpError> {
    let gf = &v_fixed.grid;
    let gp = &v_prop.grid;
    let Some(wealth) = gf.wealth.as_ref() else {
        return Err(DpError::Mismatch("fixed-cost value needs a wealth axis".into()));
    };
    if gp.wealth.is_some()
        || gf.n_assets != gp.n_assets
        || gf.simplex_order != gp.simplex_order
        || gf.n_factors != gp.n_factors
    {
        return Err(DpError::Mismatch("value functions live on different axes".into()));
    }
    let full = StateGrid::from_spec(gf)?;
    let nz = gf.n_factors;
    let mut levels = Vec::with_capacity(wealth.n_x);
    let mut negative = 0;
    let mut non_monotone = 0;
    for j in 0..wealth.n_x {
        let mut lvl = GapLevel { wealth: wealth.node(j), max_gap: f64::NEG_INFINITY, min_gap: f64::INFINITY };
        for k in 0..full.n_nodes() {
            for z in 0..nz {
                let gap = v_prop.values[k * nz + z] - v_fixed.values[full.index(k, j, z)];
                if gap < -tol {
                    negative += 1;
                }
                if j > 0 {
                    let prev = v_prop.values[k * nz + z] - v_fixed.values[full.index(k, j - 1, z)];
                    if gap > prev + tol {
                        non_monotone += 1;
                    }
                }
                lvl.max_gap = lvl.max_gap.max(gap);
                lvl.min_gap = lvl.min_gap.min(gap);
            }
        }
        levels.push(lvl);
    }
    Ok(GapReport {
        levels,
        negative_gaps: negative,
        monotonicity_violations: non_monotone,
        passed: negative == 0 && non_monotone == 0,
    })
}

/// Count of `(k, j, z)` where the value drops by more than `tol` from wealth node `j` to `j + 1`.
pub fn wealth_monotonicity_violations(grid: &StateGrid, v: &[f64], tol: f64) -> usize {
    let mut count = 0;
    for k in 0..grid.n_nodes() {
        for z in 0..grid.n_factors {
            for j in 1..grid.n_wealth() {
                if v[grid.index(k, j, z)] < v[grid.index(k, j - 1, z)] - tol {
                    count += 1;
                }
            }
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{SimplexInterp, WealthMesh};
    use rand::Rng;

    fn two_asset_model() -> MarketModel {
        MarketModel::new(
            vec![vec![0.9, 0.1], vec![0.2, 0.8]],
            vec![0.5, 0.5],
            vec![
                vec![vec![1.12, 1.03], vec![1.00, 1.06]],
                vec![vec![1.02, 1.09], vec![1.05, 0.99]],
            ],
        )
        .unwrap()
    }

    fn one_asset_model(r: f64) -> MarketModel {
        MarketModel::new(vec![vec![1.0]], vec![1.0], vec![vec![vec![r]]]).unwrap()
    }

    #[test]
    fn single_asset_value_is_geometric_series() {
        let model = one_asset_model(1.05);
        let spec = CostSpec::uniform(1, 0.0, 0.0).unwrap();
        let grid = StateGrid::new(1, 1, None, 1, SimplexInterp::Barycentric).unwrap();
        let sol = solve_discounted(&model, &spec, &grid, 0.9, &SolveOptions::default()).unwrap();
        assert!((sol.value.values[0] - 1.05f64.ln() / 0.1).abs() < 1e-8);
        assert_eq!(sol.policy.impulse_count(), 0);
    }

    #[test]
    fn contraction_on_random_pairs() {
        let model = two_asset_model();
        let spec = CostSpec::uniform(2, 0.002, 0.5).unwrap();
        let grid = StateGrid::new(
            2,
            4,
            Some(WealthMesh::new(0.01, 1e3, 6).unwrap()),
            2,
            SimplexInterp::Barycentric,
        )
        .unwrap();
        let p = DiscountedProblem::new(&model, &spec, &grid, Parallelism::Sequential).unwrap();
        let mut rng = crate::market::path_rng(3, 0);
        for _ in 0..20 {
            let v: Vec<f64> = (0..p.n_states()).map(|_| rng.random_range(-5.0..5.0)).collect();
            let w: Vec<f64> = (0..p.n_states()).map(|_| rng.random_range(-5.0..5.0)).collect();
            let (tv, tw) = (p.bellman_step(&v, 0.95), p.bellman_step(&w, 0.95));
            let lhs = tv.iter().zip(&tw).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            let rhs = v.iter().zip(&w).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(lhs <= 0.95 * rhs + 1e-12);
        }
    }

    #[test]
    fn impulse_operator_on_constant_value_is_identity_without_fixed_cost() {
        let model = two_asset_model();
        let spec = CostSpec::uniform(2, 0.01, 0.0).unwrap();
        let grid = StateGrid::new(2, 4, None, 2, SimplexInterp::Barycentric).unwrap();
        let p = DiscountedProblem::new(&model, &spec, &grid, Parallelism::Sequential).unwrap();
        let v = vec![3.0; p.n_states()];
        for s in 0..p.n_states() {
            let (val, arg) = p.impulse_operator(&v, s);
            assert_eq!(val, 3.0);
            assert_eq!(arg, Some(grid.unpack(s).0));
        }
    }

    #[test]
    fn first_step_from_zero_matches_hand_evaluation() {
        let model = two_asset_model();
        let spec = CostSpec::uniform(2, 0.01, 0.0).unwrap();
        let grid = StateGrid::new(2, 1, None, 2, SimplexInterp::Barycentric).unwrap();
        let p = DiscountedProblem::new(&model, &spec, &grid, Parallelism::Sequential).unwrap();
        let tv = p.bellman_step(&vec![0.0; p.n_states()], 0.9);
        for s in 0..p.n_states() {
            let (a, _, z) = grid.unpack(s);
            let b = 1 - a;
            let e = spec.solve_e_prop(grid.simplex.point(a), grid.simplex.point(b));
            let expect = p.h(a, z).max(e.ln() + p.h(b, z));
            assert!((tv[s] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn fixed_cost_solution_properties() {
        let model = two_asset_model();
        let spec = CostSpec::uniform(2, 0.002, 0.5).unwrap();
        let grid = StateGrid::new(
            2,
            8,
            Some(WealthMesh::new(0.005, 1e4, 12).unwrap()),
            2,
            SimplexInterp::Barycentric,
        )
        .unwrap();
        let opts = SolveOptions::default();
        let fixed = solve_discounted(&model, &spec, &grid, 0.95, &opts).unwrap();
        let prop = solve_discounted(&model, &spec, &grid.without_wealth(), 0.95, &opts).unwrap();
        assert_eq!(wealth_monotonicity_violations(&grid, &fixed.value.values, 1e-7), 0);
        let gap = value_gap_check(&fixed.value, &prop.value, 1e-7).unwrap();
        assert!(gap.passed, "{gap:?}");
        assert!(gap.levels[0].max_gap > 0.0);
        let p = DiscountedProblem::new(&model, &spec, &grid, Parallelism::Sequential).unwrap();
        for s in 0..p.n_states() {
            if fixed.policy.impulse[s] {
                let (a, j, _) = grid.unpack(s);
                assert!(p.log_e(a, fixed.policy.target[s], j).is_finite());
            } else {
                assert_eq!(fixed.policy.target[s], grid.unpack(s).0);
            }
        }
        assert!(p.double_transaction_gain(&fixed.value.values, 0.95) <= DEFAULT_TIE_EPS);
    }

    #[test]
    fn stop_rules_agree() {
        let model = two_asset_model();
        let spec = CostSpec::uniform(2, 0.005, 0.0).unwrap();
        let grid = StateGrid::new(2, 6, None, 2, SimplexInterp::Barycentric).unwrap();
        let sup = SolveOptions { stop: StopRule::Sup, ..SolveOptions::default() };
        let a = solve_discounted(&model, &spec, &grid, 0.9, &sup).unwrap();
        let b = solve_discounted(&model, &spec, &grid, 0.9, &SolveOptions::default()).unwrap();
        for (x, y) in a.value.values.iter().zip(&b.value.values) {
            assert!((x - y).abs() < 2e-8);
        }
        assert_eq!(a.policy, b.policy);
    }

    #[test]
    fn sequential_and_parallel_are_identical() {
        let model = two_asset_model();
        let spec = CostSpec::uniform(2, 0.002, 0.5).unwrap();
        let grid = StateGrid::new(
            2,
            6,
            Some(WealthMesh::new(0.01, 1e3, 8).unwrap()),
            2,
            SimplexInterp::Nearest,
        )
        .unwrap();
        let seq = SolveOptions { parallelism: Parallelism::Sequential, ..SolveOptions::default() };
        let a = solve_discounted(&model, &spec, &grid, 0.9, &seq).unwrap();
        let b = solve_discounted(&model, &spec, &grid, 0.9, &SolveOptions::default()).unwrap();
        assert_eq!(a.value.values, b.value.values);
        assert_eq!(a.policy, b.policy);
    }

    #[test]
    fn iteration_cap_is_reported() {
        let model = two_asset_model();
        let spec = CostSpec::uniform(2, 0.002, 0.0).unwrap();
        let grid = StateGrid::new(2, 4, None, 2, SimplexInterp::Barycentric).unwrap();
        let opts = SolveOptions { max_iter: 3, stop: StopRule::Sup, ..SolveOptions::default() };
        let err = solve_discounted(&model, &spec, &grid, 0.99, &opts).unwrap_err();
        assert!(matches!(err, DpError::IterationCap { iterations: 3, .. }));
        assert!(matches!(
            solve_discounted(&model, &spec, &grid, 1.0, &SolveOptions::default()),
            Err(DpError::BadBeta(_))
        ));
    }
}
