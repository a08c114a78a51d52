//! Batch front end: configuration, subcommands and artifact writing.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{Value, json};
use thiserror::Error;

use growthopt::average::{
    DEFAULT_BETAS, DEFAULT_CROSS_TOL, DEFAULT_RESIDUAL_TOL, VanishingOptions, build_mimicking, vanishing_discount,
};
use growthopt::dp::DEFAULT_TIE_EPS;
use growthopt::io::{self as gio, CostsFile, GridFileHeader, ModelFile};
use growthopt::sim::{self, FloorForm, GridPolicyStrategy, InitialState, MimickingStrategy};
use growthopt::verify;
use growthopt::{
    CostSpec, DiscountedProblem, MarketModel, Parallelism, PolicyTag, SimplexInterp, SolveOptions, StateGrid,
    ValueVariant, WealthMesh,
};

pub const THREADS_ENV: &str = "GROWTHOPT_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Domain(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Domain(_) => 1,
        }
    }

    pub fn to_json(&self) -> Value {
        let kind = match self {
            CliError::Usage(_) => "usage",
            CliError::Domain(_) => "domain",
        };
        json!({ "error": { "kind": kind, "message": self.to_string() } })
    }
}

fn domain(e: impl std::fmt::Display) -> CliError {
    CliError::Domain(e.to_string())
}

fn io_err(e: gio::IoError) -> CliError {
    match e {
        gio::IoError::File { .. } | gio::IoError::Json(_) => CliError::Usage(e.to_string()),
        _ => CliError::Domain(e.to_string()),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CostsInput {
    Path(PathBuf),
    Inline(CostsFile),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WealthConfig {
    pub x_min: f64,
    pub x_max: f64,
    pub n_x: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridConfig {
    pub simplex_order: u32,
    #[serde(default)]
    pub wealth: Option<WealthConfig>,
    #[serde(default)]
    pub interpolation: SimplexInterp,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tolerances {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_tie_eps")]
    pub tie_eps: f64,
    #[serde(default = "default_cross_tol")]
    pub cross_tol: f64,
    #[serde(default = "default_residual_tol")]
    pub residual_tol: f64,
}

fn default_tol() -> f64 {
    1e-8
}
fn default_tie_eps() -> f64 {
    DEFAULT_TIE_EPS
}
fn default_cross_tol() -> f64 {
    DEFAULT_CROSS_TOL
}
fn default_residual_tol() -> f64 {
    DEFAULT_RESIDUAL_TOL
}
fn default_betas() -> Vec<f64> {
    DEFAULT_BETAS.to_vec()
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { tol: default_tol(), tie_eps: default_tie_eps(), cross_tol: default_cross_tol(), residual_tol: default_residual_tol() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub horizon: usize,
    pub n_paths: usize,
    pub seed: u64,
    #[serde(default = "one")]
    pub x0: f64,
    /// Defaults to equal weights.
    #[serde(default)]
    pub pi0: Option<Vec<f64>>,
    #[serde(default)]
    pub z0: usize,
}

fn one() -> f64 {
    1.0
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self { horizon: 1000, n_paths: 100, seed: 0, x0: 1.0, pi0: None, z0: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LdConfig {
    pub horizons: Vec<usize>,
    pub n_paths: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for LdConfig {
    fn default() -> Self {
        Self { horizons: vec![10, 20, 40, 80, 160], n_paths: 10_000, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(alias = "model_path")]
    pub model: PathBuf,
    #[serde(default)]
    pub costs: Option<CostsInput>,
    pub grid: GridConfig,
    #[serde(default = "default_betas")]
    pub betas: Vec<f64>,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub ldcheck: LdConfig,
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn check(&self) -> Result<(), CliError> {
        let t = &self.tolerances;
        if [t.tol, t.tie_eps, t.cross_tol, t.residual_tol].iter().any(|&x| !(x > 0.0)) {
            return Err(CliError::Usage("all tolerances must be positive".into()));
        }
        if self.grid.simplex_order < 1 {
            return Err(CliError::Usage("grid.simplex_order must be at least 1".into()));
        }
        if let Some(w) = &self.grid.wealth
            && (!(w.x_min > 0.0 && w.x_min < w.x_max) || w.n_x < 2)
        {
            return Err(CliError::Usage("grid.wealth needs 0 < x_min < x_max and n_x >= 2".into()));
        }
        if self.betas.is_empty() {
            return Err(CliError::Usage("betas must not be empty".into()));
        }
        if self.simulation.horizon == 0 || self.simulation.n_paths == 0 {
            return Err(CliError::Usage("simulation horizon and n_paths must be positive".into()));
        }
        Ok(())
    }
}

/// Everything a subcommand needs, with paths resolved against the config directory.
pub struct Loaded {
    pub config: RunConfig,
    pub config_path: PathBuf,
    pub config_sha256: String,
    pub model_path: PathBuf,
    pub model_file_sha256: String,
    pub model: MarketModel,
    pub model_hash: String,
    pub spec: CostSpec,
    pub grid: StateGrid,
    pub output_dir: PathBuf,
    pub parallelism: Parallelism,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() { p.to_path_buf() } else { base.join(p) }
}

pub fn load(config_path: &Path, overrides: &Overrides) -> Result<Loaded, CliError> {
    let text = gio::read_text(config_path).map_err(io_err)?;
    if text.trim().is_empty() {
        return Err(CliError::Usage(format!("config {} is empty", config_path.display())));
    }
    let mut config: RunConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("config {}: {e}", config_path.display())))?;
    overrides.apply(&mut config);
    config.check()?;
    let base = config_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let model_path = resolve(&base, &config.model);
    let model_text = gio::read_text(&model_path).map_err(io_err)?;
    let model_file: ModelFile = serde_json::from_str(&model_text)
        .map_err(|e| CliError::Usage(format!("model {}: {e}", model_path.display())))?;
    let model = model_file.to_model().map_err(domain)?;
    let d = model.n_assets();
    let spec = match &config.costs {
        Some(CostsInput::Inline(c)) => c.to_spec(d).map_err(domain)?,
        Some(CostsInput::Path(p)) => {
            let p = resolve(&base, p);
            let t = gio::read_text(&p).map_err(io_err)?;
            let c: CostsFile =
                serde_json::from_str(&t).map_err(|e| CliError::Usage(format!("costs {}: {e}", p.display())))?;
            c.to_spec(d).map_err(domain)?
        }
        None => model_file
            .cost_spec()
            .map_err(domain)?
            .ok_or_else(|| CliError::Usage("no costs in the config or the model file".into()))?,
    };
    let wealth = match &config.grid.wealth {
        Some(w) => Some(WealthMesh::new(w.x_min, w.x_max, w.n_x).map_err(|e| CliError::Usage(e.to_string()))?),
        None => None,
    };
    let grid = StateGrid::new(d, config.grid.simplex_order, wealth, model.n_factors(), config.grid.interpolation)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    // A flag is relative to the working directory, the config field to the config file.
    let output_dir = match &overrides.output_dir {
        Some(p) => p.clone(),
        None => resolve(&base, &config.output_dir),
    };
    let parallelism = if overrides.sequential { Parallelism::Sequential } else { Parallelism::Parallel };
    Ok(Loaded {
        config_sha256: gio::sha256_hex(text.as_bytes()),
        model_file_sha256: gio::sha256_hex(model_text.as_bytes()),
        model_hash: gio::model_hash(&model),
        config,
        config_path: config_path.to_path_buf(),
        model_path,
        model,
        spec,
        grid,
        output_dir,
        parallelism,
    })
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    /// Simulation seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Number of Monte Carlo paths.
    #[arg(long, global = true)]
    pub paths: Option<usize>,
    /// Simulation horizon T.
    #[arg(long, global = true)]
    pub horizon: Option<usize>,
    /// Simplex mesh order m.
    #[arg(long, global = true)]
    pub simplex_order: Option<u32>,
    /// Upper end of the wealth mesh.
    #[arg(long, global = true)]
    pub x_max: Option<f64>,
    /// Comma-separated discount factors for the vanishing-discount sweep.
    #[arg(long, global = true, value_delimiter = ',')]
    pub betas: Option<Vec<f64>>,
    /// Run every loop on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,
}

impl Overrides {
    fn apply(&self, c: &mut RunConfig) {
        if let Some(v) = &self.output_dir {
            c.output_dir = v.clone();
        }
        if let Some(v) = self.seed {
            c.simulation.seed = v;
        }
        if let Some(v) = self.paths {
            c.simulation.n_paths = v;
        }
        if let Some(v) = self.horizon {
            c.simulation.horizon = v;
        }
        if let Some(v) = self.simplex_order {
            c.grid.simplex_order = v;
        }
        if let (Some(v), Some(w)) = (self.x_max, c.grid.wealth.as_mut()) {
            w.x_max = v;
        }
        if let Some(v) = &self.betas {
            c.betas = v.clone();
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "growthopt", version, about = "Growth-optimal portfolios with transaction costs")]
pub struct Cli {
    /// Run configuration (JSON).
    #[arg(long, short)]
    pub config: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the model assumptions and cost constants.
    Validate,
    /// Solve the discounted problem at one discount factor.
    Solve {
        #[arg(long)]
        beta: f64,
    },
    /// Vanishing-discount sweep: growth rate and average-optimal policy.
    Optimal,
    /// Monte Carlo growth estimate for a policy file.
    Simulate {
        #[arg(long)]
        policy: PathBuf,
        /// Wrap a proportional-cost policy in the wealth-threshold rule.
        #[arg(long)]
        mimicking: bool,
    },
    /// Large-deviation tail of the worst-asset growth.
    Ldcheck {
        #[arg(long)]
        eps: Option<f64>,
    },
    /// Run the property suites; exit 0 iff all pass.
    Verify {
        /// Random samples for the cost suites.
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
    },
}

/// Outcome of a subcommand: the report printed to stdout and whether the
/// run counts as a success.
pub struct Outcome {
    pub report: Value,
    pub ok: bool,
}

struct Artifacts<'a> {
    loaded: &'a Loaded,
    command: &'static str,
    files: Vec<Value>,
    started: Instant,
}

impl<'a> Artifacts<'a> {
    fn new(loaded: &'a Loaded, command: &'static str) -> Result<Self, CliError> {
        std::fs::create_dir_all(&loaded.output_dir)
            .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", loaded.output_dir.display())))?;
        Ok(Self { loaded, command, files: Vec::new(), started: Instant::now() })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.loaded.output_dir.join(name);
        gio::write_atomic(&path, bytes).map_err(io_err)?;
        self.files.push(json!({ "file": name, "sha256": gio::sha256_hex(bytes) }));
        Ok(path)
    }

    fn write_json(&mut self, name: &str, v: &Value) -> Result<PathBuf, CliError> {
        let mut s = serde_json::to_string_pretty(v).map_err(domain)?;
        s.push('\n');
        self.write(name, s.as_bytes())
    }

    fn finish(self, extra: Value) -> Result<(), CliError> {
        let l = self.loaded;
        let manifest = json!({
            "command": self.command,
            "version": env!("CARGO_PKG_VERSION"),
            "config": { "path": l.config_path.display().to_string(), "sha256": l.config_sha256 },
            "model": { "path": l.model_path.display().to_string(), "file_sha256": l.model_file_sha256, "hash": l.model_hash },
            "costs": l.spec,
            "grid": l.grid.spec(),
            "parallelism": l.parallelism,
            "inputs": extra,
            "artifacts": self.files,
            "wall_time_s": self.started.elapsed().as_secs_f64(),
        });
        let mut s = serde_json::to_string_pretty(&manifest).map_err(domain)?;
        s.push('\n');
        let path = l.output_dir.join(format!("{}.manifest.json", self.command));
        gio::write_atomic(&path, s.as_bytes()).map_err(io_err)
    }
}

fn solve_options(l: &Loaded) -> SolveOptions {
    SolveOptions {
        tol: l.config.tolerances.tol,
        tie_eps: l.config.tolerances.tie_eps,
        parallelism: l.parallelism,
        ..SolveOptions::default()
    }
}

pub fn cmd_validate(l: &Loaded) -> Result<Outcome, CliError> {
    let mut art = Artifacts::new(l, "validate")?;
    let market = l.model.validate(growthopt::market::DEFAULT_DOBRUSHIN_MAX_STEP);
    let floor = l.model.growth_floor().ok();
    let p_hat = floor.as_ref().map(|f| f.p_hat);
    let constants = p_hat.map(|p| l.spec.constants(p, None));
    let a6 = match &constants {
        Some(Ok(_)) => "pass",
        _ => "fail",
    };
    let ok = market.passed && a6 == "pass";
    let report = json!({
        "passed": ok,
        "a2": market.a2_bounded_log_return,
        "a3": market.a3_uniform_ergodicity,
        "a5": market.a5_positive_returns,
        "a6": a6,
        "dobrushin_n": market.dobrushin_n,
        "kappa": market.kappa,
        "p_hat": p_hat,
        "eta": l.spec.eta(),
        "c_hat": l.spec.c_hat(),
        "constants": constants.as_ref().and_then(|c| c.as_ref().ok()),
        "violations": market.violations.iter().cloned()
            .chain(constants.iter().filter_map(|c| c.as_ref().err().map(|e| e.to_string())))
            .collect::<Vec<_>>(),
    });
    art.write_json("validate.json", &report)?;
    art.finish(json!({}))?;
    Ok(Outcome { report, ok })
}

fn require_valid(l: &Loaded) -> Result<growthopt::CostConstants, CliError> {
    let v = l.model.validate(growthopt::market::DEFAULT_DOBRUSHIN_MAX_STEP);
    if !v.passed {
        return Err(CliError::Domain(format!("model assumptions fail: {}", v.violations.join("; "))));
    }
    let p_hat = l.model.growth_floor().map_err(domain)?.p_hat;
    l.spec.constants(p_hat, None).map_err(domain)
}

fn header(l: &Loaded, grid: &StateGrid, beta: f64, variant: ValueVariant, tag: PolicyTag, column: &str) -> GridFileHeader {
    GridFileHeader {
        kind: "solution".into(),
        grid: grid.spec(),
        beta,
        variant,
        tag,
        model_hash: l.model_hash.clone(),
        value_column: column.into(),
    }
}

pub fn cmd_solve(l: &Loaded, beta: f64) -> Result<Outcome, CliError> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(CliError::Usage(format!("--beta must lie in (0, 1), got {beta}")));
    }
    require_valid(l)?;
    let mut art = Artifacts::new(l, "solve")?;
    let problem = DiscountedProblem::new(&l.model, &l.spec, &l.grid, l.parallelism).map_err(domain)?;
    let sol = problem.solve(beta, &solve_options(l)).map_err(domain)?;
    let h = header(l, &l.grid, beta, problem.variant(), sol.policy.tag, "v_beta");
    let csv = gio::solution_csv(&h, &sol.value.values, &sol.policy).map_err(io_err)?;
    let name = format!("solution_beta_{beta}.csv");
    art.write(&name, csv.as_bytes())?;
    let report = json!({
        "beta": beta,
        "variant": problem.variant(),
        "sup": sol.value.sup(),
        "inf": sol.value.inf(),
        "span": sol.value.sup() - sol.value.inf(),
        "impulse_states": sol.policy.impulse_count(),
        "iterations": sol.report,
        "solution_file": name,
    });
    art.write_json("solve.json", &report)?;
    art.finish(json!({ "beta": beta }))?;
    Ok(Outcome { report, ok: true })
}

pub fn cmd_optimal(l: &Loaded) -> Result<Outcome, CliError> {
    let constants = require_valid(l)?;
    let mut art = Artifacts::new(l, "optimal")?;
    let opts = VanishingOptions {
        betas: l.config.betas.clone(),
        solve: solve_options(l),
        residual_tol: l.config.tolerances.residual_tol,
    };
    let out = vanishing_discount(&l.model, &l.spec, &l.grid, &opts).map_err(domain)?;
    let beta_max = *opts.betas.last().expect("checked non-empty");
    let h = header(l, &l.grid, beta_max, out.problem.variant(), out.policy.tag, "w_beta");
    let csv = gio::solution_csv(&h, &out.relative_value, &out.policy).map_err(io_err)?;
    art.write("policy.csv", csv.as_bytes())?;

    // Proportional-cost policy on the simplex axis alone, the base of the mimicking rule.
    let mut prop_file = None;
    if l.grid.wealth.is_some() {
        let pg = l.grid.without_wealth();
        let pp = DiscountedProblem::new(&l.model, &l.spec, &pg, l.parallelism).map_err(domain)?;
        let sol = pp.solve(beta_max, &opts.solve).map_err(domain)?;
        let m = sol.value.sup();
        let w: Vec<f64> = sol.value.values.iter().map(|v| m - v).collect();
        let mut policy = sol.policy;
        policy.tag = PolicyTag::Average { beta: beta_max };
        let h = header(l, &pg, beta_max, pp.variant(), policy.tag, "w_beta");
        let csv = gio::solution_csv(&h, &w, &policy).map_err(io_err)?;
        art.write("policy_prop.csv", csv.as_bytes())?;
        prop_file = Some("policy_prop.csv");
    }
    let ok = out.report.converged;
    let report = json!({
        "lambda": out.report.lambda,
        "lambda_richardson": out.report.lambda_richardson,
        "constants": constants,
        "vanishing_discount": out.report,
        "policy_file": "policy.csv",
        "proportional_policy_file": prop_file,
    });
    art.write_json("optimal.json", &report)?;
    art.finish(json!({ "betas": opts.betas }))?;
    Ok(Outcome { report, ok })
}

pub fn initial_state(l: &Loaded) -> Result<InitialState, CliError> {
    let d = l.model.n_assets();
    let s = &l.config.simulation;
    let pi = s.pi0.clone().unwrap_or_else(|| vec![1.0 / d as f64; d]);
    growthopt::market::check_simplex(&pi, d).map_err(|e| CliError::Usage(format!("simulation.pi0: {e}")))?;
    if s.z0 >= l.model.n_factors() || !(s.x0 > 0.0) {
        return Err(CliError::Usage("simulation.z0 must be a factor state and x0 positive".into()));
    }
    Ok(InitialState { pi_minus: pi, x_minus: s.x0, z: s.z0 })
}

pub fn cmd_simulate(l: &Loaded, policy_path: &Path, mimicking: bool) -> Result<Outcome, CliError> {
    let constants = require_valid(l)?;
    let (h, policy) = gio::load_policy(policy_path).map_err(io_err)?;
    if h.model_hash != l.model_hash {
        return Err(CliError::Usage(format!("{} was computed for a different model", policy_path.display())));
    }
    let init = initial_state(l)?;
    let s = &l.config.simulation;
    let mut art = Artifacts::new(l, "simulate")?;
    let (estimate, path0, floor_form) = if mimicking {
        let mp = build_mimicking(&policy, &constants).map_err(domain)?;
        let strat = MimickingStrategy::new(&mp).map_err(domain)?;
        let est = sim::average_growth(&l.model, &l.spec, &strat, &init, s.horizon, s.n_paths, s.seed, l.parallelism)
            .map_err(domain)?;
        let tr = sim::run(&l.model, &l.spec, &strat, &init, s.horizon, s.seed, 0).map_err(domain)?;
        (est, tr, Some(FloorForm::Mimicking))
    } else {
        let strat = GridPolicyStrategy::new(&policy).map_err(domain)?;
        let est = sim::average_growth(&l.model, &l.spec, &strat, &init, s.horizon, s.n_paths, s.seed, l.parallelism)
            .map_err(domain)?;
        let tr = sim::run(&l.model, &l.spec, &strat, &init, s.horizon, s.seed, 0).map_err(domain)?;
        let form = (l.spec.fixed == 0.0).then_some(FloorForm::Proportional);
        (est, tr, form)
    };
    let csv = gio::trajectory_csv(&path0, l.model.n_assets()).map_err(io_err)?;
    art.write("trajectory.csv", csv.as_bytes())?;
    let floor = floor_form.map(|f| sim::wealth_floor_check(&path0, &l.model, &constants, f));
    let ok = estimate.is_clean() && floor.as_ref().is_none_or(|f| f.passed);
    let report = json!({
        "policy_file": policy_path.display().to_string(),
        "mimicking": mimicking,
        "estimate": estimate,
        "floor_check_path0": floor,
        "trajectory_file": "trajectory.csv",
    });
    art.write_json("simulate.json", &report)?;
    art.finish(json!({
        "policy": policy_path.display().to_string(),
        "mimicking": mimicking,
        "initial": init,
        "horizon": s.horizon,
        "n_paths": s.n_paths,
        "seed": s.seed,
    }))?;
    if !estimate.is_clean() {
        return Err(CliError::Domain(format!("{} of {} paths annihilated", estimate.annihilated, estimate.n_paths)));
    }
    Ok(Outcome { report, ok })
}

/// `ε = (p̂ − min ln ζ̂)/4`.
pub fn default_ld_eps(model: &MarketModel) -> Result<f64, CliError> {
    let f = model.growth_floor().map_err(domain)?;
    let lo = f.zeta_hat.iter().fold(f64::INFINITY, |m, z| m.min(z.ln()));
    Ok(0.25 * (f.p_hat - lo))
}

pub fn cmd_ldcheck(l: &Loaded, eps: Option<f64>) -> Result<Outcome, CliError> {
    let eps = match eps {
        Some(e) => e,
        None => default_ld_eps(&l.model)?,
    };
    if !(eps > 0.0) {
        return Err(CliError::Usage("--eps must be positive".into()));
    }
    let c = &l.config.ldcheck;
    let mut art = Artifacts::new(l, "ldcheck")?;
    let rep = sim::ld_tail(&l.model, &c.horizons, eps, c.n_paths, c.seed, l.parallelism).map_err(domain)?;
    art.write("ld_tail.csv", gio::ld_tail_csv(&rep).as_bytes())?;
    let ok = rep.slope_ci95.is_some_and(|(_, hi)| hi < 0.0);
    let report = json!({ "eps": eps, "tail": rep, "decay_significant": ok });
    art.write_json("ldcheck.json", &report)?;
    art.finish(json!({ "eps": eps, "horizons": c.horizons, "n_paths": c.n_paths, "seed": c.seed }))?;
    Ok(Outcome { report, ok })
}

pub fn cmd_verify(l: &Loaded, samples: usize) -> Result<Outcome, CliError> {
    let mut art = Artifacts::new(l, "verify")?;
    let seed = l.config.simulation.seed;
    let opts = solve_options(l);
    let mut suites = vec![
        verify::e_solver_suite(samples, seed),
        verify::cost_bounds_suite(samples, seed),
        verify::market_suite(&l.model, seed),
    ];
    if l.model.validate(growthopt::market::DEFAULT_DOBRUSHIN_MAX_STEP).passed {
        suites.push(verify::dp_suite(&l.model, &l.spec, &l.grid, 0.95, &opts, seed));
        suites.push(verify::cost_free_oracle_suite(&l.model, &l.grid, 0.95, 1e-6));
        let prop = DiscountedProblem::new(&l.model, &l.spec, &l.grid.without_wealth(), l.parallelism)
            .and_then(|p| p.solve(0.95, &opts))
            .map_err(domain)?;
        suites.push(verify::simulation_suite(&l.model, &l.spec, &prop.policy, &initial_state(l)?, seed));
    }
    let ok = suites.iter().all(|s| s.passed);
    let report = json!({ "passed": ok, "suites": suites });
    art.write_json("verify.json", &report)?;
    art.finish(json!({ "samples": samples, "seed": seed }))?;
    Ok(Outcome { report, ok })
}

/// Size the rayon pool from the environment, if asked.
pub fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v.trim().parse().map_err(|_| CliError::Usage(format!("{THREADS_ENV}={v:?} is not a count")))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(domain)?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

pub fn run(cli: &Cli) -> Result<Outcome, CliError> {
    configure_threads()?;
    let l = load(&cli.config, &cli.overrides)?;
    match &cli.command {
        Command::Validate => cmd_validate(&l),
        Command::Solve { beta } => cmd_solve(&l, *beta),
        Command::Optimal => cmd_optimal(&l),
        Command::Simulate { policy, mimicking } => cmd_simulate(&l, policy, *mimicking),
        Command::Ldcheck { eps } => cmd_ldcheck(&l, *eps),
        Command::Verify { samples } => cmd_verify(&l, *samples),
    }
}
