mod common;

use common::two_asset_model;
use growthopt::market::path_rng;
use growthopt::sim::{self, ConstantMix, InitialState, NoTransaction};
use growthopt::{CostSpec, CostVariant, MarketModel, Parallelism};
use proptest::prelude::*;

fn simplex(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, d).prop_map(|mut v| {
        if v.iter().sum::<f64>() == 0.0 {
            v[0] = 1.0;
        }
        let s: f64 = v.iter().sum();
        v.iter_mut().for_each(|x| *x /= s);
        v
    })
}

fn stochastic_matrix(n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(0.01f64..1.0, n), n).prop_map(|rows| {
        rows.into_iter()
            .map(|r| {
                let s: f64 = r.iter().sum();
                r.into_iter().map(|x| x / s).collect()
            })
            .collect()
    })
}

fn spec3() -> impl Strategy<Value = CostSpec> {
    (
        prop::collection::vec(0.0f64..0.05, 3),
        prop::collection::vec(0.0f64..0.05, 3),
        0.0f64..2.0,
        any::<bool>(),
    )
        .prop_map(|(b, s, c, max)| {
            let v = if max { CostVariant::Max } else { CostVariant::Additive };
            CostSpec::new(b, s, c, v).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn e_is_monotone_in_wealth(spec in spec3(), pm in simplex(3), p in simplex(3), x in 0.1f64..100.0, k in 1.0f64..50.0) {
        let lo = spec.solve_e(&pm, &p, x);
        let hi = spec.solve_e(&pm, &p, x * k);
        prop_assert!(lo <= hi + 1e-12);
        prop_assert!(hi <= spec.solve_e_prop(&pm, &p) + 1e-12);
    }

    #[test]
    fn e_agrees_with_bisection(spec in spec3(), pm in simplex(3), p in simplex(3), x in 0.05f64..100.0) {
        let e = spec.solve_e(&pm, &p, x);
        let o = growthopt::verify::bisection_e(&spec, &pm, &p, x, 200);
        prop_assert!((e - o).abs() <= 1e-10, "{} vs {}", e, o);
    }

    #[test]
    fn proportional_cost_is_subadditive(spec in spec3(), a in simplex(3), b in simplex(3), c in simplex(3)) {
        let direct = spec.proportional_cost(&a, &c).unwrap();
        let via = spec.proportional_cost(&a, &b).unwrap() + spec.proportional_cost(&b, &c).unwrap();
        prop_assert!(direct <= via + 1e-12);
    }

    #[test]
    fn dobrushin_is_submultiplicative(p in stochastic_matrix(3)) {
        let m = MarketModel::new(p, vec![1.0], vec![vec![vec![1.0, 1.1]]; 3]).unwrap();
        for a in 1..5 {
            for b in 1..5 {
                prop_assert!(m.dobrushin(a + b) <= m.dobrushin(a) * m.dobrushin(b) + 1e-12);
            }
        }
        let q = m.transition_power(1);
        prop_assert!((growthopt::verify::dobrushin_by_subsets(&q, 3) - m.dobrushin(1)).abs() < 1e-12);
    }

    #[test]
    fn h_is_concave_and_bounded(a in simplex(2), b in simplex(2), t in 0.0f64..1.0, z in 0usize..2) {
        let m = two_asset_model();
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| t * x + (1.0 - t) * y).collect();
        let (ha, hb, hm) = (
            m.expected_log_return(&a, z).unwrap(),
            m.expected_log_return(&b, z).unwrap(),
            m.expected_log_return(&mix, z).unwrap(),
        );
        prop_assert!(hm >= t * ha + (1.0 - t) * hb - 1e-12);
        prop_assert!(ha >= m.min_return().ln() - 1e-12 && ha <= m.max_return().ln() + 1e-12);
    }

    #[test]
    fn runs_are_reproducible(seed in any::<u64>(), stream in 0u64..1000) {
        let m = two_asset_model();
        let spec = CostSpec::uniform(2, 0.003, 0.1).unwrap();
        let mix = ConstantMix { target: vec![0.4, 0.6] };
        let init = InitialState { pi_minus: vec![0.5, 0.5], x_minus: 10.0, z: 1 };
        let a = sim::run(&m, &spec, &mix, &init, 50, seed, stream).unwrap();
        let b = sim::run(&m, &spec, &mix, &init, 50, seed, stream).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn path_streams_differ() {
    use rand::Rng;
    let a: u64 = path_rng(7, 0).random();
    let b: u64 = path_rng(7, 1).random();
    assert_ne!(a, b);
}

#[test]
fn single_asset_growth_matches_stationary_mean() {
    let m = MarketModel::new(
        vec![vec![0.7, 0.3], vec![0.4, 0.6]],
        vec![0.5, 0.5],
        vec![vec![vec![1.05], vec![0.97]], vec![vec![1.01], vec![1.02]]],
    )
    .unwrap();
    let spec = CostSpec::uniform(1, 0.0, 0.0).unwrap();
    let init = InitialState { pi_minus: vec![1.0], x_minus: 1.0, z: 0 };
    let est = sim::average_growth(&m, &spec, &NoTransaction, &init, 2000, 200, 5, Parallelism::Parallel).unwrap();
    let target = m.stationary_expectation(|z, xi| m.returns(z, xi)[0].ln()).unwrap();
    assert!((est.mean - target).abs() <= 3.0 * est.std_error, "{} vs {target}", est.mean);
}
