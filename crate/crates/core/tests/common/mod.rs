#![allow(dead_code)]

use growthopt::{CostSpec, MarketModel, SimplexInterp, StateGrid, WealthMesh};

pub fn two_asset_model() -> MarketModel {
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

pub fn costs(fixed: f64) -> CostSpec {
    CostSpec::uniform(2, 0.002, fixed).unwrap()
}

pub fn grid(m: u32, wealth: Option<(f64, f64, usize)>) -> StateGrid {
    let w = wealth.map(|(lo, hi, n)| WealthMesh::new(lo, hi, n).unwrap());
    StateGrid::new(2, m, w, 2, SimplexInterp::Barycentric).unwrap()
}
