//! Discretised state space: simplex mesh × log-wealth mesh × factor states.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("invalid grid: {0}")]
    Invalid(String),
}

/// How off-mesh simplex points are resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimplexInterp {
    /// Piecewise-linear interpolation on the Freudenthal triangulation of the mesh.
    #[default]
    Barycentric,
    /// Snap to the nearest mesh node.
    Nearest,
}

/// All compositions of `m` into `d` non-negative parts, scaled by `1/m`.
/// Nodes are numbered in lexicographic order of their integer counts.
#[derive(Debug, Clone)]
pub struct SimplexMesh {
    d: usize,
    m: u32,
    counts: Vec<u32>,
    points: Vec<f64>,
    index: HashMap<Vec<u32>, usize>,
}

fn compositions(d: usize, m: u32, prefix: &mut Vec<u32>, out: &mut Vec<u32>) {
    if prefix.len() == d - 1 {
        let used: u32 = prefix.iter().sum();
        out.extend_from_slice(prefix);
        out.push(m - used);
        return;
    }
    let used: u32 = prefix.iter().sum();
    for k in 0..=(m - used) {
        prefix.push(k);
        compositions(d, m, prefix, out);
        prefix.pop();
    }
}

impl SimplexMesh {
    pub fn new(d: usize, m: u32) -> Result<Self, GridError> {
        if d == 0 {
            return Err(GridError::Invalid("simplex dimension must be >= 1".into()));
        }
        if m == 0 {
            return Err(GridError::Invalid("simplex order must be >= 1".into()));
        }
        let mut counts = Vec::new();
        compositions(d, m, &mut Vec::with_capacity(d), &mut counts);
        let points = counts.iter().map(|&c| f64::from(c) / f64::from(m)).collect();
        let index = counts
            .chunks(d)
            .enumerate()
            .map(|(k, c)| (c.to_vec(), k))
            .collect();
        Ok(Self { d, m, counts, points, index })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn order(&self) -> u32 {
        self.m
    }

    pub fn len(&self) -> usize {
        self.counts.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn point(&self, k: usize) -> &[f64] {
        &self.points[k * self.d..(k + 1) * self.d]
    }

    pub fn counts(&self, k: usize) -> &[u32] {
        &self.counts[k * self.d..(k + 1) * self.d]
    }

    pub fn index_of(&self, counts: &[u32]) -> Option<usize> {
        self.index.get(counts).copied()
    }

    /// Nearest node by largest-remainder rounding of `m·π`.
    pub fn nearest(&self, pi: &[f64]) -> usize {
        let m = f64::from(self.m);
        let scaled: Vec<f64> = pi.iter().map(|p| (p * m).max(0.0)).collect();
        let mut counts: Vec<u32> = scaled.iter().map(|s| s.floor() as u32).collect();
        let used: u32 = counts.iter().sum();
        let mut order: Vec<usize> = (0..self.d).collect();
        order.sort_by(|&a, &b| {
            let fa = scaled[a] - scaled[a].floor();
            let fb = scaled[b] - scaled[b].floor();
            fb.total_cmp(&fa).then(a.cmp(&b))
        });
        if used <= self.m {
            for &i in order.iter().take((self.m - used) as usize) {
                counts[i] += 1;
            }
        } else {
            // Only reachable when π sums above 1 by rounding.
            let mut excess = used - self.m;
            for &i in order.iter().rev() {
                if excess == 0 {
                    break;
                }
                let take = counts[i].min(excess);
                counts[i] -= take;
                excess -= take;
            }
        }
        self.index_of(&counts).expect("rounded composition is on the mesh")
    }

    /// Barycentric stencil `[(node, weight)]` of `π` on the Freudenthal
    /// triangulation; weights are non-negative and reproduce `π` exactly.
    pub fn barycentric(&self, pi: &[f64]) -> Vec<(usize, f64)> {
        let d = self.d;
        if d == 1 {
            return vec![(0, 1.0)];
        }
        let m = f64::from(self.m);
        let mi = self.m as i64;
        // Cumulative coordinates sₖ = m Σ_{i≤k} πⁱ, monotone in k.
        let mut s = Vec::with_capacity(d - 1);
        let mut acc = 0.0;
        for p in &pi[..d - 1] {
            acc += p * m;
            let prev = s.last().copied().unwrap_or(0.0);
            s.push(acc.clamp(prev, m));
        }
        let base: Vec<i64> = s.iter().map(|x| (x.floor() as i64).min(mi)).collect();
        let frac: Vec<f64> = s.iter().zip(&base).map(|(x, b)| x - *b as f64).collect();
        let mut order: Vec<usize> = (0..d - 1).collect();
        order.sort_by(|&a, &b| frac[b].total_cmp(&frac[a]).then(b.cmp(&a)));

        let mut out = Vec::with_capacity(d);
        let mut vertex = base.clone();
        for r in 0..d {
            let hi = if r == 0 { 1.0 } else { frac[order[r - 1]] };
            let lo = if r < d - 1 { frac[order[r]] } else { 0.0 };
            let w = hi - lo;
            if r > 0 {
                vertex[order[r - 1]] += 1;
            }
            if w > 0.0 {
                out.push((self.node_from_cumulative(&vertex), w));
            }
        }
        out
    }

    fn node_from_cumulative(&self, cumulative: &[i64]) -> usize {
        let mut counts = Vec::with_capacity(self.d);
        let mut prev = 0i64;
        for &c in cumulative {
            counts.push((c - prev) as u32);
            prev = c;
        }
        counts.push((self.m as i64 - prev) as u32);
        self.index_of(&counts).expect("Freudenthal vertex is on the mesh")
    }

    /// Stencil according to `mode`.
    pub fn stencil(&self, pi: &[f64], mode: SimplexInterp) -> Vec<(usize, f64)> {
        match mode {
            SimplexInterp::Barycentric => self.barycentric(pi),
            SimplexInterp::Nearest => vec![(self.nearest(pi), 1.0)],
        }
    }
}

/// Geometric wealth nodes `x_min · rʲ`, `j = 0..n_x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WealthMesh {
    pub x_min: f64,
    pub x_max: f64,
    pub n_x: usize,
}

impl WealthMesh {
    pub fn new(x_min: f64, x_max: f64, n_x: usize) -> Result<Self, GridError> {
        if !(x_min > 0.0 && x_max > x_min && x_max.is_finite()) {
            return Err(GridError::Invalid(format!(
                "wealth mesh needs 0 < x_min < x_max, got [{x_min}, {x_max}]"
            )));
        }
        if n_x < 2 {
            return Err(GridError::Invalid("wealth mesh needs at least 2 nodes".into()));
        }
        Ok(Self { x_min, x_max, n_x })
    }

    pub fn ln_ratio(&self) -> f64 {
        (self.x_max / self.x_min).ln() / (self.n_x - 1) as f64
    }

    pub fn node(&self, j: usize) -> f64 {
        if j == self.n_x - 1 {
            self.x_max
        } else {
            self.x_min * (self.ln_ratio() * j as f64).exp()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n_x).map(|j| self.node(j)).collect()
    }

    /// Fractional node coordinate of `x`, clamped to `[0, n_x − 1]`.
    pub fn coordinate(&self, x: f64) -> f64 {
        ((x / self.x_min).ln() / self.ln_ratio()).clamp(0.0, (self.n_x - 1) as f64)
    }

    /// Nearest node in log-wealth.
    pub fn nearest(&self, x: f64) -> usize {
        self.coordinate(x).round() as usize
    }
}

/// Linear interpolation weights at a fractional coordinate: `(j0, w)` with
/// value `(1 − w)·f[j0] + w·f[j0 + 1]`.
#[inline]
pub fn split_coordinate(t: f64, n_x: usize) -> (usize, f64) {
    let last = (n_x - 1) as f64;
    let t = t.clamp(0.0, last);
    if n_x == 1 {
        return (0, 0.0);
    }
    let j0 = (t.floor() as usize).min(n_x - 2);
    (j0, t - j0 as f64)
}

/// `𝕊_m × wealth × E`. A missing wealth mesh means the proportional-only problem.
#[derive(Debug, Clone)]
pub struct StateGrid {
    pub simplex: SimplexMesh,
    pub wealth: Option<WealthMesh>,
    pub n_factors: usize,
    pub interp: SimplexInterp,
}

/// Serializable description used in file headers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n_assets: usize,
    pub simplex_order: u32,
    pub wealth: Option<WealthMesh>,
    pub n_factors: usize,
    pub interpolation: SimplexInterp,
}

impl StateGrid {
    pub fn new(
        n_assets: usize,
        simplex_order: u32,
        wealth: Option<WealthMesh>,
        n_factors: usize,
        interp: SimplexInterp,
    ) -> Result<Self, GridError> {
        if n_factors == 0 {
            return Err(GridError::Invalid("need at least one factor state".into()));
        }
        Ok(Self { simplex: SimplexMesh::new(n_assets, simplex_order)?, wealth, n_factors, interp })
    }

    pub fn from_spec(spec: &GridSpec) -> Result<Self, GridError> {
        Self::new(
            spec.n_assets,
            spec.simplex_order,
            spec.wealth.clone(),
            spec.n_factors,
            spec.interpolation,
        )
    }

    pub fn spec(&self) -> GridSpec {
        GridSpec {
            n_assets: self.simplex.dim(),
            simplex_order: self.simplex.order(),
            wealth: self.wealth.clone(),
            n_factors: self.n_factors,
            interpolation: self.interp,
        }
    }

    /// The same simplex and factor axes without the wealth mesh.
    pub fn without_wealth(&self) -> Self {
        Self { wealth: None, ..self.clone() }
    }

    pub fn n_nodes(&self) -> usize {
        self.simplex.len()
    }

    pub fn n_wealth(&self) -> usize {
        self.wealth.as_ref().map_or(1, |w| w.n_x)
    }

    pub fn n_states(&self) -> usize {
        self.n_nodes() * self.n_wealth() * self.n_factors
    }

    /// Flat index of `(node, wealth node, factor)`.
    #[inline]
    pub fn index(&self, k: usize, j: usize, z: usize) -> usize {
        (k * self.n_wealth() + j) * self.n_factors + z
    }

    /// Inverse of [`StateGrid::index`].
    pub fn unpack(&self, s: usize) -> (usize, usize, usize) {
        let z = s % self.n_factors;
        let rest = s / self.n_factors;
        (rest / self.n_wealth(), rest % self.n_wealth(), z)
    }

    pub fn wealth_at(&self, j: usize) -> Option<f64> {
        self.wealth.as_ref().map(|w| w.node(j))
    }
}
