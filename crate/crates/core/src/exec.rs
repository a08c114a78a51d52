//! Execution mode for the data-parallel loops (Bellman sweeps, Monte Carlo
//! paths, β sweeps).
//!
//! With the `parallel` feature enabled the loops run on the rayon global pool.
//! Without it, or when [`Parallelism::Sequential`] is requested, the same
//! closures run on the calling thread in index order. Results never depend on
//! the mode: every helper writes to a slot chosen by index, and reductions are
//! performed by the caller over the ordered output.

use serde::{Deserialize, Serialize};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// How the inner loops are executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parallelism {
    Sequential,
    #[default]
    Parallel,
}

impl Parallelism {
    /// The mode that will actually run: `Parallel` degrades to `Sequential`
    /// when the crate is built without the `parallel` feature.
    pub fn effective(self) -> Self {
        if cfg!(feature = "parallel") {
            self
        } else {
            Parallelism::Sequential
        }
    }

    pub fn is_parallel(self) -> bool {
        self.effective() == Parallelism::Parallel
    }
}

/// Evaluate `f(i)` for `i in 0..n` and collect the results in index order.
pub fn map_indexed<T, F>(mode: Parallelism, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = mode;
    (0..n).map(f).collect()
}

/// Overwrite every slot of `out` with `f(index)`.
pub fn fill_indexed<T, F>(mode: Parallelism, out: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        out.par_iter_mut()
            .with_min_len(64)
            .enumerate()
            .for_each(|(i, slot)| *slot = f(i));
        return;
    }
    let _ = mode;
    for (i, slot) in out.iter_mut().enumerate() {
        *slot = f(i);
    }
}

/// Pairwise (cascade) summation. The result depends only on the order of
/// `xs`, so means over per-path results are reproducible across thread counts.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BLOCK: usize = 16;
    if xs.len() <= BLOCK {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}
