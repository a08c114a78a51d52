//! Growth-optimal portfolio selection on a finite Markov-modulated market with
//! fixed plus proportional transaction costs.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod average;
pub mod cost;
pub mod dp;
pub mod exec;
pub mod grid;
pub mod io;
pub mod market;
pub mod sim;
pub mod verify;

pub use cost::{CostConstants, CostError, CostSpec, CostVariant};
pub use exec::Parallelism;
pub use grid::{GridError, SimplexInterp, SimplexMesh, StateGrid, WealthMesh};
pub use market::{MarketError, MarketModel};
pub use dp::{DiscountedProblem, DpError, Policy, PolicyTag, Solution, SolveOptions, StopRule, ValueFunction, ValueVariant};
