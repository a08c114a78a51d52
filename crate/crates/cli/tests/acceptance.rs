//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use growthopt::average::{VanishingOptions, build_mimicking, cross_check_costs, vanishing_discount};
use growthopt::cost::general_cost_check;
use growthopt::io::{csv_body, load_model_file};
use growthopt::market::path_rng;
use growthopt::sim::{self, FloorForm, GridPolicyStrategy, InitialState, MimickingStrategy};
use growthopt::verify;
use growthopt::{
    CostSpec, CostVariant, DiscountedProblem, MarketModel, Parallelism, SimplexInterp, SolveOptions, StateGrid,
    WealthMesh,
};
use rand::Rng;
use serde_json::Value;

type Criterion = (&'static str, fn() -> Line);

struct Line {
    ok: bool,
    detail: String,
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

fn bundled() -> (MarketModel, CostSpec) {
    let f = load_model_file(&data("model.json")).unwrap();
    (f.to_model().unwrap(), f.cost_spec().unwrap().unwrap())
}

fn grid(model: &MarketModel, m: u32, wealth: Option<(f64, f64, usize)>) -> StateGrid {
    let w = wealth.map(|(a, b, n)| WealthMesh::new(a, b, n).unwrap());
    StateGrid::new(model.n_assets(), m, w, model.n_factors(), SimplexInterp::Barycentric).unwrap()
}

fn scratch(name: &str) -> PathBuf {
    let p = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = std::fs::remove_dir_all(&p);
    std::fs::create_dir_all(&p).unwrap();
    p
}

fn cli(out: &Path, args: &[&str]) -> (i32, Value) {
    let o = Command::new(env!("CARGO_BIN_EXE_growthopt"))
        .arg("--config")
        .arg(data("config.json"))
        .arg("--output-dir")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs");
    let code = o.status.code().unwrap_or(-1);
    let v = serde_json::from_slice(&o.stdout).unwrap_or_else(|_| {
        serde_json::json!({ "stderr": String::from_utf8_lossy(&o.stderr).to_string() })
    });
    (code, v)
}

fn e_solver() -> Line {
    let t = Instant::now();
    let r = verify::e_solver_suite(10_000, 1);
    let secs = t.elapsed().as_secs_f64();
    Line {
        ok: r.passed && secs < 5.0,
        detail: format!("{} checks, {} violations, max |e - bisection| = {:.1e}, {secs:.2} s", r.cases, r.violations, r.max_error),
    }
}

fn cost_bounds() -> Line {
    let r = verify::cost_bounds_suite(10_000, 2);
    Line { ok: r.passed, detail: format!("{} checks, {} violations", r.cases, r.violations) }
}

fn solver_oracle() -> Line {
    let (model, spec) = bundled();
    let g = grid(&model, 8, None);
    let mut ok = true;
    let mut err = 0.0f64;
    for beta in [0.9, 0.95, 0.99] {
        let r = verify::cost_free_oracle_suite(&model, &g, beta, 1e-6);
        ok &= r.passed;
        err = err.max(r.max_error);
    }
    // Contraction on random pairs, with and without costs.
    let mut rng = path_rng(3, 0);
    let mut worst = 0.0f64;
    let free = CostSpec::uniform(2, 0.0, 0.0).unwrap();
    let gw = grid(&model, 8, Some((0.005, 1e4, 16)));
    for (s, gr) in [(&free, &g), (&spec, &gw)] {
        let p = DiscountedProblem::new(&model, s, gr, Parallelism::Parallel).unwrap();
        let n = p.n_states();
        for _ in 0..100 {
            let beta = rng.random_range(0.5..0.999);
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let (tv, tw) = (p.bellman_step(&v, beta), p.bellman_step(&w, beta));
            let lhs = tv.iter().zip(&tw).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            let rhs = v.iter().zip(&w).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            worst = worst.max(lhs - beta * rhs);
        }
    }
    ok &= worst <= 1e-12;
    Line { ok, detail: format!("sup |v - oracle| = {err:.1e}, max(||Tv - Tw|| - beta ||v - w||) = {worst:.1e} over 200 pairs") }
}

fn span_bound() -> Line {
    let (model, spec) = bundled();
    let g = grid(&model, 8, None);
    let p = DiscountedProblem::new(&model, &spec, &g, Parallelism::Parallel).unwrap();
    let bound = p.span_bound(64).unwrap();
    let mut spans = Vec::new();
    let mut sups = Vec::new();
    for beta in [0.9, 0.99, 0.999, 0.9999] {
        let sol = p.solve(beta, &SolveOptions::default()).unwrap();
        spans.push(sol.value.sup() - sol.value.inf());
        sups.push(sol.value.sup_norm());
    }
    let within = spans.iter().all(|&s| s <= bound.bound);
    let blow_up = sups.windows(2).all(|w| w[1] > w[0]) && sups[3] > 100.0 * spans[3];
    Line {
        ok: within && blow_up,
        detail: format!(
            "spans {:?} vs bound {:.4} (n = {}, kappa = {}), sup norms {:?}",
            spans.iter().map(|s| format!("{s:.4}")).collect::<Vec<_>>(),
            bound.bound,
            bound.n,
            bound.kappa,
            sups.iter().map(|s| format!("{s:.2}")).collect::<Vec<_>>()
        ),
    }
}

fn free_rebalancing() -> Line {
    let (model, _) = bundled();
    let g = grid(&model, 16, None);
    let free = CostSpec::uniform(2, 0.0, 0.0).unwrap();
    let out = vanishing_discount(&model, &free, &g, &VanishingOptions::default()).unwrap();
    let oracle = verify::free_rebalancing_lambda(&model, &g);
    let diff = (out.report.lambda - oracle).abs();
    Line { ok: diff <= 1e-4, detail: format!("lambda = {:.6}, oracle = {oracle:.6}, |diff| = {diff:.1e}", out.report.lambda) }
}

fn fixed_vs_proportional() -> Line {
    let (model, spec) = bundled();
    let opts = VanishingOptions::default();
    let a = cross_check_costs(&model, &spec, &grid(&model, 16, Some((0.005, 1e4, 16))), &opts, 5e-3).unwrap();
    let b = cross_check_costs(&model, &spec, &grid(&model, 16, Some((0.005, 1e5, 16))), &opts, 5e-3).unwrap();
    Line {
        ok: a.passed && b.difference < a.difference,
        detail: format!(
            "|lambda_fixed - lambda_prop| = {:.2e} at x_max 1e4, {:.2e} at x_max 1e5",
            a.difference, b.difference
        ),
    }
}

fn closed_loop() -> Line {
    let out = scratch("closed_loop");
    let (c0, opt) = cli(&out, &["optimal"]);
    if c0 != 0 {
        return Line { ok: false, detail: format!("optimal exited {c0}: {opt}") };
    }
    let lambda = opt["lambda"].as_f64().unwrap();
    let mut ok = true;
    let mut parts = vec![format!("lambda = {lambda:.6}")];
    for (label, args) in [
        ("policy", vec!["simulate", "--policy", "policy.csv"]),
        ("mimicking", vec!["simulate", "--policy", "policy_prop.csv", "--mimicking"]),
    ] {
        let args: Vec<String> =
            args.iter().map(|a| if a.ends_with(".csv") { out.join(a).display().to_string() } else { a.to_string() }).collect();
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let (code, rep) = cli(&out, &args);
        let est = &rep["estimate"];
        let (mean, se) = (est["mean"].as_f64().unwrap_or(f64::NAN), est["std_error"].as_f64().unwrap_or(f64::NAN));
        let tol = (3.0 * se).max(1e-2);
        let good = code == 0 && (mean - lambda).abs() <= tol;
        ok &= good;
        parts.push(format!("{label} {mean:.6} (se {se:.1e}, T = {}, paths = {})", est["horizon"], est["n_paths"]));
    }
    Line { ok, detail: parts.join(", ") }
}

fn iid_model() -> MarketModel {
    MarketModel::new(
        vec![vec![1.0]],
        vec![0.25; 4],
        vec![vec![vec![1.08, 1.02], vec![0.97, 1.04], vec![1.03, 0.99], vec![1.01, 1.06]]],
    )
    .unwrap()
}

fn large_deviations() -> Line {
    let (model, _) = bundled();
    let eps = growthopt_cli::default_ld_eps(&model).unwrap();
    let rep = sim::ld_tail(&model, &[10, 20, 40, 80, 160], eps, 20_000, 8, Parallelism::Parallel).unwrap();
    let decays = rep.slope_ci95.is_some_and(|(_, hi)| hi < 0.0);

    let iid = iid_model();
    let eps_iid = growthopt_cli::default_ld_eps(&iid).unwrap();
    let floor = iid.growth_floor().unwrap();
    let rep_iid = sim::ld_tail(&iid, &[10, 20, 40, 60, 80], eps_iid, 100_000, 9, Parallelism::Parallel).unwrap();
    let values: Vec<f64> = floor.zeta_hat.iter().map(|z| z.ln()).collect();
    let rate = verify::cramer_rate(&values, iid.shock_probs(), floor.p_hat - eps_iid);
    let ratio = rep_iid.slope.map_or(f64::NAN, |s| -s / rate);
    let ok = decays && rep_iid.slope_ci95.is_some_and(|(_, hi)| hi < 0.0) && (0.5..=2.0).contains(&ratio);
    Line {
        ok,
        detail: format!(
            "bundled slope {:.4} CI {:?}; i.i.d. slope {:.4} vs Cramer rate {rate:.4} (ratio {ratio:.2})",
            rep.slope.unwrap_or(f64::NAN),
            rep.slope_ci95.map(|(a, b)| (format!("{a:.4}"), format!("{b:.4}"))),
            rep_iid.slope.unwrap_or(f64::NAN)
        ),
    }
}

fn pathwise_floor() -> Line {
    let (model, spec) = bundled();
    let p_hat = model.growth_floor().unwrap().p_hat;
    let prop_spec = spec.proportional_only();
    let g = grid(&model, 16, None);
    let beta = 0.999;
    let pol = DiscountedProblem::new(&model, &prop_spec, &g, Parallelism::Parallel)
        .unwrap()
        .solve(beta, &SolveOptions::default())
        .unwrap()
        .policy;
    let init = InitialState { pi_minus: vec![0.5, 0.5], x_minus: 10.0, z: 0 };
    let prop_consts = prop_spec.constants(p_hat, None).unwrap();
    let fixed_consts = spec.constants(p_hat, None).unwrap();
    let strat = GridPolicyStrategy::new(&pol).unwrap();
    let mimic = MimickingStrategy::new(&build_mimicking(&pol, &fixed_consts).unwrap()).unwrap();
    let (mut viol_p, mut viol_m, mut trades) = (0, 0, 0);
    for stream in 0..1000 {
        let tr = sim::run(&model, &prop_spec, &strat, &init, 500, 10, stream).unwrap();
        trades += tr.records.iter().filter(|r| r.transacted).count();
        viol_p += sim::wealth_floor_check(&tr, &model, &prop_consts, FloorForm::Proportional).violations;
        let tr = sim::run(&model, &spec, &mimic, &init, 500, 11, stream).unwrap();
        viol_m += sim::wealth_floor_check(&tr, &model, &fixed_consts, FloorForm::Mimicking).violations;
    }
    Line {
        ok: viol_p == 0 && viol_m == 0 && trades > 0,
        detail: format!(
            "1000 proportional-cost paths: {viol_p} violations ({trades} trades); 1000 mimicking paths: {viol_m} violations"
        ),
    }
}

fn max_variant() -> Line {
    let (model, spec) = bundled();
    let max_spec = spec.with_variant(CostVariant::Max);
    let sandwich = general_cost_check(
        &spec.proportional_only(),
        |a, b, s| max_spec.share_cost(a, b, s),
        &spec,
        10_000,
        12,
    );
    let g = grid(&model, 16, Some((0.005, 1e4, 16)));
    let opts = VanishingOptions::default();
    let add = vanishing_discount(&model, &spec, &g, &opts).unwrap().report.lambda;
    let max = vanishing_discount(&model, &max_spec, &g, &opts).unwrap().report.lambda;
    let diff = (add - max).abs();
    Line {
        ok: sandwich.passed && diff <= 5e-3,
        detail: format!(
            "sandwich violations {}/{}/{} (lower/upper/subadditivity); lambda additive {add:.6}, max {max:.6}, |diff| = {diff:.1e}",
            sandwich.lower_violations, sandwich.upper_violations, sandwich.subadditivity_violations
        ),
    }
}

fn reproducibility() -> Line {
    let mut bodies = Vec::new();
    for run in ["repro_a", "repro_b"] {
        let out = scratch(run);
        let (c1, _) = cli(&out, &["optimal"]);
        let policy = out.join("policy.csv").display().to_string();
        let (c2, _) = cli(&out, &["--paths", "50", "--horizon", "500", "simulate", "--policy", &policy]);
        if c1 != 0 || c2 != 0 {
            return Line { ok: false, detail: format!("{run}: exit codes {c1}, {c2}") };
        }
        let read = |f: &str| std::fs::read_to_string(out.join(f)).unwrap();
        bodies.push((read("policy.csv"), read("policy_prop.csv"), read("trajectory.csv")));
    }
    let (a, b) = (&bodies[0], &bodies[1]);
    let same = csv_body(&a.0) == csv_body(&b.0) && csv_body(&a.1) == csv_body(&b.1) && csv_body(&a.2) == csv_body(&b.2);
    Line {
        ok: same,
        detail: format!("policy, proportional policy and trajectory bodies identical: {same} ({} trajectory bytes)", a.2.len()),
    }
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("e-solver exactness", e_solver),
        ("cost bound suite", cost_bounds),
        ("discounted solver oracle", solver_oracle),
        ("span bound", span_bound),
        ("free-rebalancing growth oracle", free_rebalancing),
        ("fixed vs proportional growth rate", fixed_vs_proportional),
        ("closed loop", closed_loop),
        ("large deviations", large_deviations),
        ("pathwise wealth floor", pathwise_floor),
        ("max-variant sandwich", max_variant),
        ("reproducibility", reproducibility),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let line = f();
        if !line.ok {
            failed += 1;
        }
        println!(
            "criterion {:>2} {:<36} {}  {} [{:.1} s]",
            i + 1,
            name,
            if line.ok { "PASS" } else { "FAIL" },
            line.detail,
            t.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} of {} criteria pass", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
