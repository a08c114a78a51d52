//! File formats: model JSON, value/policy CSV with a JSON header line,
//! trajectory and tail-probability CSV, and atomic writes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cost::{CostError, CostSpec, CostVariant};
use crate::dp::{Policy, PolicyTag, ValueVariant};
use crate::grid::{GridSpec, StateGrid};
use crate::market::{MarketError, MarketModel};
use crate::sim::{LdTailReport, Trajectory};

/// Rows off by more than this are rejected rather than renormalised.
pub const RENORMALIZE_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File { path: String, source: std::io::Error },
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] MarketError),
    #[error(transparent)]
    Cost(#[from] CostError),
}

/// A probability given either as a number or as a decimal string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Prob {
    Num(f64),
    Text(String),
}

impl Prob {
    fn value(&self) -> Result<f64, IoError> {
        match self {
            Prob::Num(x) => Ok(*x),
            Prob::Text(s) => s
                .trim()
                .parse::<f64>()
                .map_err(|_| IoError::Format(format!("{s:?} is not a decimal number"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Assets {
    Count(usize),
    Names(Vec<String>),
}

impl Assets {
    pub fn count(&self) -> usize {
        match self {
            Assets::Count(n) => *n,
            Assets::Names(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Rates {
    Uniform(f64),
    PerAsset(Vec<f64>),
}

impl Rates {
    fn expand(&self, d: usize) -> Vec<f64> {
        match self {
            Rates::Uniform(r) => vec![*r; d],
            Rates::PerAsset(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostsFile {
    pub buy: Rates,
    pub sell: Rates,
    #[serde(default)]
    pub fixed: f64,
    #[serde(default)]
    pub variant: CostVariant,
}

impl CostsFile {
    pub fn to_spec(&self, d: usize) -> Result<CostSpec, CostError> {
        CostSpec::new(self.buy.expand(d), self.sell.expand(d), self.fixed, self.variant)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorsFile {
    pub transition: Vec<Vec<Prob>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShocksFile {
    pub probs: Vec<Prob>,
}

/// On-disk model: `returns[z][ξ][i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub assets: Assets,
    pub factors: FactorsFile,
    pub shocks: ShocksFile,
    pub returns: Vec<Vec<Vec<f64>>>,
    #[serde(default)]
    pub costs: Option<CostsFile>,
}

fn normalize_row(row: &[Prob], what: &str) -> Result<Vec<f64>, IoError> {
    let vals: Vec<f64> = row.iter().map(Prob::value).collect::<Result<_, _>>()?;
    if vals.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(IoError::Format(format!("{what} has a negative or non-finite entry")));
    }
    let sum: f64 = vals.iter().sum();
    if (sum - 1.0).abs() > RENORMALIZE_TOL {
        return Err(IoError::Format(format!("{what} sums to {sum}, off by more than {RENORMALIZE_TOL:e}")));
    }
    Ok(vals.into_iter().map(|p| p / sum).collect())
}

impl ModelFile {
    pub fn to_model(&self) -> Result<MarketModel, IoError> {
        let transition = self
            .factors
            .transition
            .iter()
            .enumerate()
            .map(|(z, row)| normalize_row(row, &format!("transition row {z}")))
            .collect::<Result<Vec<_>, _>>()?;
        let shocks = normalize_row(&self.shocks.probs, "shock probabilities")?;
        let model = MarketModel::new(transition, shocks, self.returns.clone())?;
        if model.n_assets() != self.assets.count() {
            return Err(IoError::Format(format!(
                "assets declares {} but returns have {} columns",
                self.assets.count(),
                model.n_assets()
            )));
        }
        Ok(model)
    }

    pub fn cost_spec(&self) -> Result<Option<CostSpec>, IoError> {
        Ok(match &self.costs {
            Some(c) => Some(c.to_spec(self.assets.count())?),
            None => None,
        })
    }
}

pub fn read_text(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|source| IoError::File { path: path.display().to_string(), source })
}

pub fn load_model_file(path: &Path) -> Result<ModelFile, IoError> {
    Ok(serde_json::from_str(&read_text(path)?)?)
}

/// Hex SHA-256 of the model's canonical JSON.
pub fn model_hash(model: &MarketModel) -> String {
    let bytes = serde_json::to_vec(model).expect("model serialises");
    let digest = Sha256::digest(&bytes);
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Write through a temporary sibling and rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let err = |source| IoError::File { path: path.display().to_string(), source };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(err)?;
    }
    let name = path.file_name().ok_or_else(|| IoError::Format(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes).map_err(err)?;
    fs::rename(&tmp, path).map_err(err)
}

/// Shortest round-trip decimal form.
pub fn fmt_f64(x: f64) -> String {
    let a = x.abs();
    if x == 0.0 || (1e-5..1e15).contains(&a) || !x.is_finite() {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

fn join(xs: &[f64]) -> String {
    xs.iter().map(|&x| fmt_f64(x)).collect::<Vec<_>>().join(",")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFileHeader {
    pub kind: String,
    pub grid: GridSpec,
    pub beta: f64,
    pub variant: ValueVariant,
    pub tag: PolicyTag,
    pub model_hash: String,
    pub value_column: String,
}

/// One row per grid state: indices, `π₋`, wealth, value, impulse flag and target.
pub fn solution_csv(header: &GridFileHeader, values: &[f64], policy: &Policy) -> Result<String, IoError> {
    let grid = StateGrid::from_spec(&header.grid).map_err(|e| IoError::Format(e.to_string()))?;
    if values.len() != grid.n_states() || policy.impulse.len() != grid.n_states() {
        return Err(IoError::Format("values and policy must cover the grid".into()));
    }
    let d = grid.simplex.dim();
    let mut out = format!("# {}\n", serde_json::to_string(header)?);
    let pi_cols: Vec<String> = (0..d).map(|i| format!("pi_minus_{i}")).collect();
    let tg_cols: Vec<String> = (0..d).map(|i| format!("target_{i}")).collect();
    let _ = writeln!(
        out,
        "state,node,wealth_node,z,{},x,{},impulse,target_node,{}",
        pi_cols.join(","),
        header.value_column,
        tg_cols.join(",")
    );
    for s in 0..grid.n_states() {
        let (k, j, z) = grid.unpack(s);
        let x = grid.wealth_at(j).map_or(String::new(), fmt_f64);
        let b = policy.target[s];
        let _ = writeln!(
            out,
            "{s},{k},{j},{z},{},{x},{},{},{b},{}",
            join(grid.simplex.point(k)),
            fmt_f64(values[s]),
            u8::from(policy.impulse[s]),
            join(grid.simplex.point(b)),
        );
    }
    Ok(out)
}

fn split_header(text: &str) -> Result<(&str, std::str::Lines<'_>), IoError> {
    let mut lines = text.lines();
    let first = lines.next().ok_or_else(|| IoError::Format("empty file".into()))?;
    let json = first
        .strip_prefix("# ")
        .ok_or_else(|| IoError::Format("missing '# {json}' header line".into()))?;
    Ok((json, lines))
}

/// Parse a file written by [`solution_csv`] back into its header, values and policy.
pub fn parse_solution_csv(text: &str) -> Result<(GridFileHeader, Vec<f64>, Policy), IoError> {
    let (json, mut lines) = split_header(text)?;
    let header: GridFileHeader = serde_json::from_str(json)?;
    let grid = StateGrid::from_spec(&header.grid).map_err(|e| IoError::Format(e.to_string()))?;
    let d = grid.simplex.dim();
    lines.next().ok_or_else(|| IoError::Format("missing column line".into()))?;
    let n = grid.n_states();
    let mut values = vec![0.0; n];
    let mut impulse = vec![false; n];
    let mut target = vec![0usize; n];
    let mut seen = 0;
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 + d + 4 + d {
            return Err(IoError::Format(format!("bad row: {line}")));
        }
        let parse_usize =
            |s: &str| s.parse::<usize>().map_err(|_| IoError::Format(format!("bad integer {s:?}")));
        let s = parse_usize(cols[0])?;
        if s >= n {
            return Err(IoError::Format(format!("state {s} outside the grid")));
        }
        values[s] = cols[5 + d]
            .parse::<f64>()
            .map_err(|_| IoError::Format(format!("bad value {:?}", cols[5 + d])))?;
        impulse[s] = cols[6 + d] == "1";
        target[s] = parse_usize(cols[7 + d])?;
        if target[s] >= grid.n_nodes() {
            return Err(IoError::Format(format!("target node {} outside the mesh", target[s])));
        }
        seen += 1;
    }
    if seen != n {
        return Err(IoError::Format(format!("expected {n} rows, found {seen}")));
    }
    let policy = Policy { grid: header.grid.clone(), tag: header.tag, impulse, target };
    Ok((header, values, policy))
}

pub fn load_policy(path: &Path) -> Result<(GridFileHeader, Policy), IoError> {
    let (h, _, p) = parse_solution_csv(&read_text(path)?)?;
    Ok((h, p))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrajectoryHeader {
    kind: String,
    seed: u64,
    stream: u64,
    model_hash: String,
    annihilated: bool,
}

pub fn trajectory_csv(tr: &Trajectory, n_assets: usize) -> Result<String, IoError> {
    let header = TrajectoryHeader {
        kind: "trajectory".into(),
        seed: tr.seed,
        stream: tr.stream,
        model_hash: tr.model_hash.clone(),
        annihilated: tr.annihilated,
    };
    let mut out = format!("# {}\n", serde_json::to_string(&header)?);
    let pm: Vec<String> = (0..n_assets).map(|i| format!("pi_minus_{i}")).collect();
    let pp: Vec<String> = (0..n_assets).map(|i| format!("pi_{i}")).collect();
    let _ = writeln!(out, "t,z,xi,{},transacted,{},e_applied,x_minus,x,log_x_minus", pm.join(","), pp.join(","));
    for r in &tr.records {
        let xi = r.xi.map_or_else(|| "-1".to_string(), |x| x.to_string());
        let _ = writeln!(
            out,
            "{},{},{xi},{},{},{},{},{},{},{}",
            r.t,
            r.z,
            join(&r.pi_minus),
            u8::from(r.transacted),
            join(&r.pi),
            fmt_f64(r.e_applied),
            fmt_f64(r.x_minus),
            fmt_f64(r.x),
            fmt_f64(r.log_x_minus),
        );
    }
    Ok(out)
}

pub fn ld_tail_csv(rep: &LdTailReport) -> String {
    let mut out = String::from("T,p_hat,eps,tail_prob,n_paths,hits\n");
    for r in &rep.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.horizon,
            fmt_f64(r.p_hat),
            fmt_f64(r.eps),
            fmt_f64(r.tail_prob),
            r.n_paths,
            r.hits
        );
    }
    out
}

/// Body of a CSV file: everything after the `#` header line, if any.
pub fn csv_body(text: &str) -> &str {
    match text.strip_prefix("# ") {
        Some(rest) => rest.split_once('\n').map_or("", |(_, body)| body),
        None => text,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dp::{SolveOptions, solve_discounted};
    use crate::grid::{SimplexInterp, WealthMesh};

    const MODEL: &str = r#"{
        "assets": ["a", "b"],
        "factors": {"transition": [["0.9", "0.1"], [0.2, 0.8]]},
        "shocks": {"probs": ["0.5", "0.5000000000001"]},
        "returns": [[[1.12, 1.03], [1.0, 1.06]], [[1.02, 1.09], [1.05, 0.99]]],
        "costs": {"buy": 0.002, "sell": [0.002, 0.003], "fixed": 0.5, "variant": "max"}
    }"#;

    #[test]
    fn model_json_with_decimal_strings() {
        let f: ModelFile = serde_json::from_str(MODEL).unwrap();
        let m = f.to_model().unwrap();
        assert_eq!(m.transition(0, 0), 0.9);
        assert!((m.shock_probs().iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let c = f.cost_spec().unwrap().unwrap();
        assert_eq!(c.sell, vec![0.002, 0.003]);
        assert_eq!(c.variant, CostVariant::Max);
        assert_eq!(model_hash(&m), model_hash(&f.to_model().unwrap()));
        assert_eq!(model_hash(&m).len(), 64);
    }

    #[test]
    fn rows_off_by_more_than_tolerance_are_rejected() {
        let bad = MODEL.replace("\"0.1\"", "\"0.11\"");
        let f: ModelFile = serde_json::from_str(&bad).unwrap();
        assert!(matches!(f.to_model(), Err(IoError::Format(_))));
        let bad = MODEL.replace("\"0.1\"", "\"zero\"");
        let f: ModelFile = serde_json::from_str(&bad).unwrap();
        assert!(f.to_model().is_err());
    }

    #[test]
    fn solution_csv_round_trips() {
        let f: ModelFile = serde_json::from_str(MODEL).unwrap();
        let m = f.to_model().unwrap();
        let spec = f.cost_spec().unwrap().unwrap();
        let grid = StateGrid::new(
            2,
            4,
            Some(WealthMesh::new(0.01, 1e3, 5).unwrap()),
            2,
            SimplexInterp::Barycentric,
        )
        .unwrap();
        let sol = solve_discounted(&m, &spec, &grid, 0.9, &SolveOptions::default()).unwrap();
        let header = GridFileHeader {
            kind: "solution".into(),
            grid: grid.spec(),
            beta: 0.9,
            variant: sol.value.variant,
            tag: sol.policy.tag,
            model_hash: model_hash(&m),
            value_column: "value".into(),
        };
        let text = solution_csv(&header, &sol.value.values, &sol.policy).unwrap();
        let (h, v, p) = parse_solution_csv(&text).unwrap();
        assert_eq!(h, header);
        assert_eq!(v, sol.value.values);
        assert_eq!(p, sol.policy);
    }

    #[test]
    fn float_format_round_trips() {
        for x in [0.0, 1.0, -2.5, 1e-18, 123456.789, 1e300, -1e18, 0.1 + 0.2] {
            assert_eq!(fmt_f64(x).parse::<f64>().unwrap(), x);
        }
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = std::env::temp_dir().join(format!("growthopt-io-{}", std::process::id()));
        let p = dir.join("a.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "two");
        fs::remove_dir_all(&dir).unwrap();
        assert_eq!(csv_body("# {}\na,b\n1,2\n"), "a,b\n1,2\n");
    }
}
