//! Experiment runner: one TOML config, one command per invocation.
//!
//! ```toml
//! command = "train"
//! seed = 7
//! output = "runs/train"
//!
//! [density]
//! kind = "uniform_interval"
//! a = 0.0
//! b = 1.0
//!
//! [init]
//! kind = "random"
//! count = 2
//!
//! [neighborhood]
//! kind = "kmeans_winner"
//!
//! [schedule]
//! kind = "inverse_time"
//! alpha0 = 0.5
//! tau = 1000.0
//!
//! [train]
//! iterations = 200000
//! snapshot_every = 1000
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value as Json};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::counterexample::{self, CounterexampleConfig};
use crate::density::{Density, DensitySpec, SeededStream};
use crate::energy;
use crate::error::Error;
use crate::geometry::{perturbation_bound, CellularParams, PrototypeSet};
use crate::integrator::{Integrator, IntegratorSpec};
use crate::neighborhoods::{GraphSpec, NeighborhoodSpec};
use crate::report::{csv_bytes, json_bytes, write_atomic, Table, Value};
use crate::training::{self, EnergyProbe, InitSpec, Schedule, TrainOptions};

/// Stream ids by role, all derived from the master seed.
pub mod streams {
    pub const TRAIN: u64 = 1;
    pub const INIT: u64 = 2;
    pub const MONTE_CARLO: u64 = 3;
    pub const INVARIANCE: u64 = 4;
}

const DEFAULT_COUNTEREXAMPLE_PANELS: usize = 1_000_000;

#[derive(Debug, Parser)]
#[command(name = "vqlab", version, about = "Vector-quantization energy experiments")]
pub struct Args {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `output` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replace existing output files.
    #[arg(long)]
    pub overwrite: bool,
    /// Master seed; overrides `seed` in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for integration.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("runtime error: {0}")]
    Runtime(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

fn config_err(e: Error) -> CliError {
    CliError::Config(e.to_string())
}

fn missing(section: &str) -> CliError {
    CliError::Config(format!("missing section `{section}`"))
}

/// Prefixes a parameter name with its config section unless already there.
fn scoped(prefix: &str, e: Error) -> CliError {
    match e {
        Error::InvalidParameter { name, reason } => {
            let name = if name.starts_with(prefix) { name } else { format!("{prefix}.{name}") };
            CliError::Config(Error::InvalidParameter { name, reason }.to_string())
        }
        other => CliError::Config(format!("{prefix}: {other}")),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Train,
    EnergyScan,
    GradientCheck,
    Invariance,
    Counterexample,
    TubeScan,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::EnergyScan => "energy-scan",
            Command::GradientCheck => "gradient-check",
            Command::Invariance => "invariance",
            Command::Counterexample => "counterexample",
            Command::TubeScan => "tube-scan",
        }
    }

    /// Files written into the output directory, manifest excluded.
    pub fn outputs(&self, with_sup: bool) -> Vec<&'static str> {
        match self {
            Command::Train => vec!["trajectory.csv", "final.json"],
            Command::EnergyScan if with_sup => vec!["energy_scan.csv", "energy_scan.json", "sup_gap.csv"],
            Command::EnergyScan => vec!["energy_scan.csv", "energy_scan.json"],
            Command::GradientCheck => vec!["gradient.csv", "gradient.json"],
            Command::Invariance => vec!["invariance.json"],
            Command::Counterexample => vec!["counterexample.csv", "verdict.json"],
            Command::TubeScan => vec!["tube_scan.csv", "tube_scan.json"],
        }
    }
}

/// Config form of [`NeighborhoodSpec`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NeighborhoodConfig {
    KmeansWinner,
    KmeansAllWinners,
    Som { graph: GraphSpec, sigma: f64 },
    NeuralGas { sigma: f64 },
    RecruitingNg { sigma: f64, epsilons: Vec<f64> },
    RecruitingSom { graph: GraphSpec, sigmas: Vec<f64> },
}

impl NeighborhoodConfig {
    pub fn build(&self) -> crate::Result<NeighborhoodSpec> {
        Ok(match self {
            NeighborhoodConfig::KmeansWinner => NeighborhoodSpec::KMeansWinner,
            NeighborhoodConfig::KmeansAllWinners => NeighborhoodSpec::KMeansAllWinners,
            NeighborhoodConfig::Som { graph, sigma } => NeighborhoodSpec::Som {
                graph: graph.build()?,
                sigma: *sigma,
            },
            NeighborhoodConfig::NeuralGas { sigma } => NeighborhoodSpec::NeuralGas { sigma: *sigma },
            NeighborhoodConfig::RecruitingNg { sigma, epsilons } => NeighborhoodSpec::RecruitingNg {
                sigma: *sigma,
                epsilons: epsilons.clone(),
            },
            NeighborhoodConfig::RecruitingSom { graph, sigmas } => NeighborhoodSpec::RecruitingSom {
                graph: graph.build()?,
                sigmas: sigmas.clone(),
            },
        })
    }
}

fn default_snapshot_every() -> u64 {
    1000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub iterations: u64,
    #[serde(default = "default_snapshot_every")]
    pub snapshot_every: u64,
    /// Attach an energy estimate (using `[integrator]`) to every snapshot.
    #[serde(default)]
    pub energy: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanSection {
    /// Strictly descending tube parameters.
    pub etas: Vec<f64>,
    /// Extra prototype configurations for probing the largest gap.
    #[serde(default)]
    pub configurations: Vec<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradientSection {
    pub eta: f64,
    /// Finite-difference step; defaults to `ν/2`.
    pub h: Option<f64>,
    /// 1-based prototype indices; empty means all.
    #[serde(default)]
    pub prototypes: Vec<usize>,
}

fn default_adversarial_factor() -> f64 {
    10.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvarianceSection {
    pub eta: f64,
    pub trials: usize,
    /// Perturbation radius; defaults to `ν`.
    pub radius: Option<f64>,
    #[serde(default)]
    pub adversarial_trials: usize,
    /// Minimum adversarial displacement in units of `ν`.
    #[serde(default = "default_adversarial_factor")]
    pub adversarial_factor: f64,
}

fn default_panels() -> usize {
    DEFAULT_COUNTEREXAMPLE_PANELS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CounterexampleSection {
    pub w1: f64,
    pub w2: f64,
    pub eta: f64,
    pub lambda: f64,
    pub beta: f64,
    pub zeta1: Vec<f64>,
    #[serde(default = "default_panels")]
    pub panels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub command: Command,
    #[serde(default)]
    pub seed: u64,
    pub output: Option<PathBuf>,
    /// For `counterexample`, replaces the construction's own density in the
    /// quadrature column.
    pub density: Option<DensitySpec>,
    pub init: Option<InitSpec>,
    pub neighborhood: Option<NeighborhoodConfig>,
    pub schedule: Option<Schedule>,
    pub train: Option<TrainSection>,
    pub integrator: Option<IntegratorSpec>,
    pub scan: Option<ScanSection>,
    pub gradient: Option<GradientSection>,
    pub invariance: Option<InvarianceSection>,
    pub counterexample: Option<CounterexampleSection>,
}

/// Parses a config, applies the seed override and hashes the result.
pub fn parse_config(text: &str, seed: Option<u64>) -> Result<(ExperimentConfig, String), CliError> {
    let de = toml::de::Deserializer::parse(text).map_err(|e| CliError::Config(e.to_string()))?;
    let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::Config(format!("{path}: {}", e.into_inner()))
    })?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    // canonical form: the parsed config re-serialized with sorted keys
    let canonical: BTreeMap<String, Json> =
        serde_json::from_value(serde_json::to_value(&cfg).map_err(|e| CliError::Config(e.to_string()))?)
            .map_err(|e| CliError::Config(e.to_string()))?;
    let bytes = serde_json::to_vec(&canonical).map_err(|e| CliError::Config(e.to_string()))?;
    let hash = hex::encode(Sha256::digest(&bytes));
    Ok((cfg, hash))
}

pub fn load_config(path: &Path, seed: Option<u64>) -> Result<(ExperimentConfig, String), CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    pub duration_seconds: f64,
    pub outputs: Vec<String>,
}

/// Fully validated experiment, ready to run.
enum Plan {
    Train {
        density: Density,
        w0: PrototypeSet,
        spec: NeighborhoodSpec,
        schedule: Schedule,
        opts: TrainOptions,
    },
    EnergyScan {
        density: Density,
        w: PrototypeSet,
        spec: NeighborhoodSpec,
        etas: Vec<f64>,
        configs: Vec<PrototypeSet>,
        integ: Integrator,
    },
    TubeScan {
        density: Density,
        w: PrototypeSet,
        spec: NeighborhoodSpec,
        etas: Vec<f64>,
        integ: Integrator,
    },
    Gradient {
        density: Density,
        w: PrototypeSet,
        spec: NeighborhoodSpec,
        cp: CellularParams,
        h: f64,
        prototypes: Vec<usize>,
        integ: Integrator,
    },
    Invariance {
        density: Density,
        w: PrototypeSet,
        cp: CellularParams,
        section: InvarianceSection,
        radius: f64,
    },
    Counterexample {
        cfg: CounterexampleConfig,
        density: Option<Density>,
        grid: Vec<f64>,
        panels: usize,
    },
}

struct Inputs<'a> {
    cfg: &'a ExperimentConfig,
}

impl Inputs<'_> {
    fn density(&self) -> Result<Density, CliError> {
        let spec = self.cfg.density.as_ref().ok_or_else(|| missing("density"))?;
        Density::from_spec(spec).map_err(|e| scoped("density", e))
    }

    fn prototypes(&self, density: &Density) -> Result<PrototypeSet, CliError> {
        let init = self.cfg.init.as_ref().ok_or_else(|| missing("init"))?;
        let mut stream = SeededStream::new(self.cfg.seed, streams::INIT);
        init.build(density, &mut stream).map_err(|e| scoped("init", e))
    }

    fn neighborhood(&self, n: usize, default_kmeans: bool) -> Result<NeighborhoodSpec, CliError> {
        let spec = match &self.cfg.neighborhood {
            Some(c) => c.build().map_err(|e| scoped("neighborhood", e))?,
            None if default_kmeans => NeighborhoodSpec::KMeansWinner,
            None => return Err(missing("neighborhood")),
        };
        spec.validate(n).map_err(|e| scoped("neighborhood", e))?;
        Ok(spec)
    }

    fn integrator(&self, density: &Density) -> Result<Integrator, CliError> {
        let spec = self.cfg.integrator.as_ref().ok_or_else(|| missing("integrator"))?;
        let integ = spec.build(self.cfg.seed).map_err(|e| scoped("integrator", e))?;
        integ.check_density(density).map_err(|e| scoped("integrator", e))?;
        Ok(integ)
    }

    fn cellular(&self, prefix: &str, eta: f64, density: &Density) -> Result<CellularParams, CliError> {
        perturbation_bound(eta, density.diameter()).map_err(|e| scoped(prefix, e))
    }
}

fn check_etas(etas: &[f64]) -> Result<(), CliError> {
    if etas.is_empty() {
        return Err(CliError::Config("invalid parameter `scan.etas`: need at least one value".into()));
    }
    for (i, e) in etas.iter().enumerate() {
        if !(e.is_finite() && *e > 0.0) {
            return Err(CliError::Config(format!("invalid parameter `scan.etas[{i}]`: must be > 0, got {e}")));
        }
    }
    if etas.windows(2).any(|p| p[1] >= p[0]) {
        return Err(CliError::Config("invalid parameter `scan.etas`: must be strictly descending".into()));
    }
    Ok(())
}

fn check_inside(density: &Density, w: &PrototypeSet, field: &str) -> Result<(), CliError> {
    if w.dim() != density.dim() {
        return Err(config_err(Error::DimensionMismatch {
            expected: density.dim(),
            got: w.dim(),
        }));
    }
    for (p, x) in w.points().enumerate() {
        if !density.support_bounds().contains(x) {
            return Err(CliError::Config(format!(
                "invalid parameter `{field}[{p}]`: must lie inside the density's bounding box"
            )));
        }
    }
    Ok(())
}

fn plan(cfg: &ExperimentConfig) -> Result<Plan, CliError> {
    let inputs = Inputs { cfg };
    Ok(match cfg.command {
        Command::Train => {
            let density = inputs.density()?;
            let w0 = inputs.prototypes(&density)?;
            let spec = inputs.neighborhood(w0.n(), false)?;
            let schedule = cfg.schedule.clone().ok_or_else(|| missing("schedule"))?;
            schedule.validate().map_err(config_err)?;
            let section = cfg.train.as_ref().ok_or_else(|| missing("train"))?;
            if section.iterations == 0 {
                return Err(CliError::Config("invalid parameter `train.iterations`: must be ≥ 1".into()));
            }
            if section.snapshot_every == 0 {
                return Err(CliError::Config("invalid parameter `train.snapshot_every`: must be ≥ 1".into()));
            }
            let energy = if section.energy {
                Some(EnergyProbe { integrator: inputs.integrator(&density)? })
            } else {
                None
            };
            Plan::Train {
                opts: TrainOptions {
                    iterations: section.iterations,
                    snapshot_every: section.snapshot_every,
                    energy,
                },
                density,
                w0,
                spec,
                schedule,
            }
        }
        Command::EnergyScan | Command::TubeScan => {
            let density = inputs.density()?;
            let w = inputs.prototypes(&density)?;
            let spec = inputs.neighborhood(w.n(), cfg.command == Command::TubeScan)?;
            let integ = inputs.integrator(&density)?;
            let scan = cfg.scan.as_ref().ok_or_else(|| missing("scan"))?;
            check_etas(&scan.etas)?;
            if cfg.command == Command::TubeScan {
                Plan::TubeScan { density, w, spec, etas: scan.etas.clone(), integ }
            } else {
                let mut configs = Vec::with_capacity(scan.configurations.len());
                for (i, pts) in scan.configurations.iter().enumerate() {
                    let c = PrototypeSet::new(pts.clone())
                        .map_err(|e| scoped(&format!("scan.configurations[{i}]"), e))?;
                    if c.n() != w.n() || c.dim() != w.dim() {
                        return Err(CliError::Config(format!(
                            "invalid parameter `scan.configurations[{i}]`: expected {} points of dimension {}",
                            w.n(),
                            w.dim()
                        )));
                    }
                    configs.push(c);
                }
                Plan::EnergyScan { density, w, spec, etas: scan.etas.clone(), configs, integ }
            }
        }
        Command::GradientCheck => {
            let density = inputs.density()?;
            let w = inputs.prototypes(&density)?;
            let spec = inputs.neighborhood(w.n(), false)?;
            let integ = inputs.integrator(&density)?;
            let section = cfg.gradient.as_ref().ok_or_else(|| missing("gradient"))?;
            let cp = inputs.cellular("gradient", section.eta, &density)?;
            let h = section.h.unwrap_or(cp.nu() / 2.0);
            if !(h > 0.0 && h < cp.nu()) {
                return Err(CliError::Config(format!(
                    "invalid parameter `gradient.h`: must lie in (0, ν) = (0, {}), got {h}",
                    cp.nu()
                )));
            }
            let prototypes = if section.prototypes.is_empty() {
                (0..w.n()).collect()
            } else {
                let mut out = Vec::new();
                for (i, j) in section.prototypes.iter().enumerate() {
                    if *j == 0 || *j > w.n() {
                        return Err(CliError::Config(format!(
                            "invalid parameter `gradient.prototypes[{i}]`: 1-based index {j} out of range for {} prototypes",
                            w.n()
                        )));
                    }
                    out.push(j - 1);
                }
                out
            };
            Plan::Gradient { density, w, spec, cp, h, prototypes, integ }
        }
        Command::Invariance => {
            let density = inputs.density()?;
            let w = inputs.prototypes(&density)?;
            check_inside(&density, &w, "init.points")?;
            let section = cfg.invariance.clone().ok_or_else(|| missing("invariance"))?;
            let cp = inputs.cellular("invariance", section.eta, &density)?;
            if section.trials == 0 {
                return Err(CliError::Config("invalid parameter `invariance.trials`: must be ≥ 1".into()));
            }
            let radius = section.radius.unwrap_or(cp.nu());
            if !(radius.is_finite() && radius >= 0.0) {
                return Err(CliError::Config(format!(
                    "invalid parameter `invariance.radius`: must be ≥ 0, got {radius}"
                )));
            }
            if !(section.adversarial_factor.is_finite() && section.adversarial_factor > 0.0) {
                return Err(CliError::Config(format!(
                    "invalid parameter `invariance.adversarial_factor`: must be > 0, got {}",
                    section.adversarial_factor
                )));
            }
            if section.adversarial_trials > 0 && w.n() < 2 {
                return Err(CliError::Config(
                    "invalid parameter `invariance.adversarial_trials`: needs at least two prototypes".into(),
                ));
            }
            Plan::Invariance { density, w, cp, section, radius }
        }
        Command::Counterexample => {
            let s = cfg.counterexample.as_ref().ok_or_else(|| missing("counterexample"))?;
            let ce = CounterexampleConfig::new(s.w1, s.w2, s.eta, s.lambda, s.beta)
                .map_err(|e| scoped("counterexample", e))?;
            if s.zeta1.is_empty() {
                return Err(CliError::Config("invalid parameter `counterexample.zeta1`: grid is empty".into()));
            }
            for (i, z) in s.zeta1.iter().enumerate() {
                if !(*z > 0.0 && *z < s.eta) {
                    return Err(CliError::Config(format!(
                        "invalid parameter `counterexample.zeta1[{i}]`: must lie in (0, η) = (0, {}), got {z}",
                        s.eta
                    )));
                }
            }
            if s.panels < counterexample::MIN_PANELS {
                return Err(CliError::Config(format!(
                    "invalid parameter `counterexample.panels`: must be ≥ {}, got {}",
                    counterexample::MIN_PANELS,
                    s.panels
                )));
            }
            let density = match &cfg.density {
                Some(_) => {
                    let d = inputs.density()?;
                    if d.dim() != 1 {
                        return Err(CliError::Config("density: counterexample needs a 1-D density".into()));
                    }
                    Some(d)
                }
                None => None,
            };
            Plan::Counterexample { cfg: ce, density, grid: s.zeta1.clone(), panels: s.panels }
        }
    })
}

fn f(x: f64) -> Value {
    Value::F64(x)
}

fn opt(x: Option<f64>) -> Json {
    x.and_then(serde_json::Number::from_f64).map_or(Json::Null, Json::Number)
}

fn stamped(hash: &str, body: Map<String, Json>) -> Map<String, Json> {
    let mut out = Map::new();
    out.insert("config_hash".into(), Json::from(hash));
    out.extend(body);
    out
}

fn obj(v: Json) -> Map<String, Json> {
    match v {
        Json::Object(m) => m,
        _ => unreachable!("json! object literal"),
    }
}

fn energy_table(rows: &[energy::EnergyReport]) -> Table {
    let mut t = Table::new([
        "eta",
        "theta",
        "energy",
        "cellular_energy",
        "gap",
        "tube_mass",
        "stderr_energy",
        "stderr_gap",
    ]);
    for r in rows {
        t.push(vec![
            f(r.eta),
            f(r.theta),
            f(r.energy),
            f(r.cellular_energy),
            f(r.gap),
            f(r.tube_mass),
            f(r.stderr_energy),
            f(r.stderr_gap),
        ])
        .expect("fixed width");
    }
    t
}

/// Runs a plan and returns the bytes of each output file, in the order of
/// [`Command::outputs`].
fn execute(plan: Plan, seed: u64, hash: &str) -> crate::Result<Vec<Vec<u8>>> {
    match plan {
        Plan::Train { density, w0, spec, schedule, opts } => {
            let mut stream = SeededStream::new(seed, streams::TRAIN);
            let with_energy = opts.energy.is_some();
            let records = training::run(&density, &w0, &spec, &schedule, &opts, &mut stream)?;
            let (n, d) = (w0.n(), w0.dim());
            let mut columns = vec!["iteration".to_string()];
            for p in 1..=n {
                for k in 1..=d {
                    columns.push(format!("w{p}_{k}"));
                }
            }
            if with_energy {
                columns.push("energy".into());
            }
            let mut t = Table::new(columns);
            for r in &records {
                let mut row = vec![Value::U64(r.iteration)];
                row.extend(r.prototypes.as_flat().iter().map(|x| f(*x)));
                if let Some(e) = r.energy {
                    row.push(f(e));
                }
                t.push(row)?;
            }
            let last = records.last().expect("at least the initial record");
            let summary = stamped(
                hash,
                obj(json!({
                    "iterations": last.iteration,
                    "neighborhood": spec.name(),
                    "prototypes": last.prototypes.to_vecs(),
                    "initial_prototypes": w0.to_vecs(),
                    "final_energy": opt(last.energy),
                    "initial_energy": opt(records[0].energy),
                    "stream_counter": last.stream_counter,
                })),
            );
            Ok(vec![csv_bytes(&t)?, json_bytes(&summary)?])
        }
        Plan::EnergyScan { density, w, spec, etas, configs, integ } => {
            let rows = energy::energy_gap_scan(&density, &w, &spec, &etas, &integ)?;
            let table = energy_table(&rows);
            let mut body = table.to_json();
            body.insert(
                "stderr_cellular".into(),
                rows.iter().map(|r| r.stderr_cellular).collect::<Vec<_>>().into(),
            );
            body.insert("stderr_tube".into(), rows.iter().map(|r| r.stderr_tube).collect::<Vec<_>>().into());
            let mut out = vec![csv_bytes(&table)?, json_bytes(&stamped(hash, body))?];
            if !configs.is_empty() {
                let mut all = vec![w.clone()];
                all.extend(configs);
                let sup = energy::sup_gap_scan(&density, &all, &spec, &etas, &integ)?;
                let mut t = Table::new(["eta", "theta", "max_gap", "argmax"]);
                for s in sup {
                    t.push(vec![f(s.eta), f(s.theta), f(s.max_gap), Value::U64(s.argmax as u64)])?;
                }
                out.push(csv_bytes(&t)?);
            }
            Ok(out)
        }
        Plan::TubeScan { density, w, spec, etas, integ } => {
            let rows = energy::energy_gap_scan(&density, &w, &spec, &etas, &integ)?;
            let mut t = Table::new([
                "eta",
                "theta",
                "tube_mass",
                "stderr_tube",
                "tube_mass_over_theta",
                "gap",
                "gap_over_theta",
            ]);
            for r in &rows {
                t.push(vec![
                    f(r.eta),
                    f(r.theta),
                    f(r.tube_mass),
                    f(r.stderr_tube),
                    f(r.tube_mass / r.theta),
                    f(r.gap),
                    f(r.gap / r.theta),
                ])?;
            }
            let body = stamped(hash, t.to_json());
            Ok(vec![csv_bytes(&t)?, json_bytes(&body)?])
        }
        Plan::Gradient { density, w, spec, cp, h, prototypes, integ } => {
            let mut t = Table::new([
                "prototype",
                "coordinate",
                "analytic_cellular",
                "analytic_full",
                "finite_diff",
                "abs_error",
            ]);
            let (mut num, mut den): (f64, f64) = (0.0, 0.0);
            for j in prototypes {
                let cell = energy::analytic_gradient(&density, &w, &spec, j, Some(&cp), &integ)?;
                let full = energy::analytic_gradient(&density, &w, &spec, j, None, &integ)?;
                let fd = energy::finite_diff_gradient(&density, &w, &spec, &cp, j, h, &integ)?;
                for k in 0..w.dim() {
                    let err = (fd[k] - cell[k]).abs();
                    num += err * err;
                    den += cell[k] * cell[k];
                    t.push(vec![
                        Value::U64(j as u64 + 1),
                        Value::U64(k as u64 + 1),
                        f(cell[k]),
                        f(full[k]),
                        f(fd[k]),
                        f(err),
                    ])?;
                }
            }
            let rel = if den > 0.0 { (num / den).sqrt() } else { num.sqrt() };
            let body = stamped(
                hash,
                obj(json!({
                    "eta": cp.eta(),
                    "theta": cp.theta(),
                    "nu": cp.nu(),
                    "h": h,
                    "relative_error": rel,
                })),
            );
            Ok(vec![csv_bytes(&t)?, json_bytes(&body)?])
        }
        Plan::Invariance { density, w, cp, section, radius } => {
            let mut stream = SeededStream::new(seed, streams::INVARIANCE);
            let probe =
                energy::invariance_probe_with_radius(&density, &w, &cp, section.trials, radius, &mut stream)?;
            let adversarial = if section.adversarial_trials > 0 {
                let mut s = stream.fork(1);
                let a = energy::adversarial_probe(
                    &density,
                    &w,
                    &cp,
                    section.adversarial_trials,
                    section.adversarial_factor,
                    &mut s,
                )?;
                json!({"trials": a.trials, "violations": a.violations, "min_zeta": a.min_zeta, "max_zeta": a.max_zeta})
            } else {
                Json::Null
            };
            let body = stamped(
                hash,
                obj(json!({
                    "eta": cp.eta(),
                    "nu": cp.nu(),
                    "mu": cp.mu(),
                    "delta": cp.delta(),
                    "radius": radius,
                    "trials": probe.trials,
                    "violations": probe.violations,
                    "max_zeta": probe.max_zeta,
                    "adversarial": adversarial,
                })),
            );
            Ok(vec![json_bytes(&body)?])
        }
        Plan::Counterexample { cfg, density, grid, panels } => {
            let density = density.unwrap_or_else(|| cfg.density());
            let mut t = Table::new(["zeta1", "delta_analytic", "delta_numeric", "branch"]);
            let mut samples = Vec::with_capacity(grid.len());
            for &z in &grid {
                let a = counterexample::delta_analytic(&cfg, z)?;
                let n = counterexample::delta_numeric_with(&cfg, &density, z, panels)?;
                samples.push((z, n));
                t.push(vec![f(z), f(a), f(n), Value::U64(cfg.branch(z) as u64)])?;
            }
            let fit = counterexample::slope_break_at(&cfg, &samples, cfg.break_point())?;
            let body = stamped(
                hash,
                obj(json!({
                    "L1_hat": opt(fit.l1_hat()),
                    "L2_hat": opt(fit.l2_hat()),
                    "L1_paper": cfg.l1_paper(),
                    "L2_paper": cfg.l2_paper(),
                    "L1_stderr": opt(fit.upper.map(|b| b.slope_stderr)),
                    "L2_stderr": opt(fit.lower.map(|b| b.slope_stderr)),
                    "distinct": fit.distinct,
                    "break_point": cfg.break_point(),
                    "p": cfg.p(),
                })),
            );
            Ok(vec![csv_bytes(&t)?, json_bytes(&body)?])
        }
    }
}

/// Validates, runs and writes outputs plus `manifest.json` into `out_dir`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    hash: &str,
    out_dir: &Path,
    overwrite: bool,
) -> Result<RunManifest, CliError> {
    let start = Instant::now();
    let with_sup = cfg.scan.as_ref().is_some_and(|s| !s.configurations.is_empty());
    let names = cfg.command.outputs(with_sup);
    let plan = plan(cfg)?;
    if !overwrite {
        for name in names.iter().chain(["manifest.json"].iter()) {
            let path = out_dir.join(name);
            if path.exists() {
                return Err(CliError::Config(format!(
                    "output {} already exists (pass --overwrite to replace it)",
                    path.display()
                )));
            }
        }
    }
    let files = execute(plan, cfg.seed, hash)?;
    fs::create_dir_all(out_dir).map_err(|source| Error::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    let mut outputs = Vec::with_capacity(names.len());
    for (name, bytes) in names.iter().zip(&files) {
        write_atomic(&out_dir.join(name), bytes)?;
        outputs.push(name.to_string());
    }
    let manifest = RunManifest {
        config_hash: hash.to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: cfg.command.name().to_string(),
        seed: cfg.seed,
        duration_seconds: start.elapsed().as_secs_f64(),
        outputs,
    };
    let bytes = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Serialization(e.to_string()))?;
    write_atomic(&out_dir.join("manifest.json"), &bytes)?;
    Ok(manifest)
}

pub fn run(args: &Args) -> Result<RunManifest, CliError> {
    let (cfg, hash) = load_config(&args.config, args.seed)?;
    let out = args
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .ok_or_else(|| CliError::Config("no output directory: set `output` or pass --out".into()))?;
    if let Some(n) = args.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be ≥ 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    run_experiment(&cfg, &hash, &out, args.overwrite)
}

pub fn main_with(args: Args) -> ExitCode {
    match run(&args) {
        Ok(m) => {
            eprintln!("{} finished in {:.3} s: {}", m.command, m.duration_seconds, m.outputs.join(", "));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("vqlab: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TRAIN: &str = r#"
command = "train"
seed = 7

[density]
kind = "uniform_interval"
a = 0.0
b = 1.0

[init]
kind = "random"
count = 2

[neighborhood]
kind = "kmeans_winner"

[schedule]
kind = "inverse_time"
alpha0 = 0.5
tau = 100.0

[train]
iterations = 3000
snapshot_every = 500
"#;

    const UNIT: &str = "[density]\nkind = \"uniform_interval\"\na = 0.0\nb = 1.0\n";
    const SQUARE: &str = "[density]\nkind = \"uniform_box\"\nlo = [0.0, 0.0]\nhi = [1.0, 1.0]\n";
    const QUAD1: &str = "[integrator]\nkind = \"quadrature1d\"\npanels = 2000\n";

    fn run_text(text: &str, dir: &Path) -> Result<RunManifest, CliError> {
        let (cfg, hash) = parse_config(text, None)?;
        run_experiment(&cfg, &hash, dir, false)
    }

    fn read(dir: &Path, name: &str) -> Vec<u8> {
        fs::read(dir.join(name)).unwrap()
    }

    fn json_file(dir: &Path, name: &str) -> Json {
        serde_json::from_slice(&read(dir, name)).unwrap()
    }

    #[test]
    fn train_rerun_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = run_text(TRAIN, a.path()).unwrap();
        let mb = run_text(TRAIN, b.path()).unwrap();
        assert_eq!(ma.config_hash, mb.config_hash);
        for name in ["trajectory.csv", "final.json"] {
            assert_eq!(read(a.path(), name), read(b.path(), name), "{name}");
        }
        let csv = String::from_utf8(read(a.path(), "trajectory.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "iteration,w1_1,w2_1");
        // iteration 0, every 500th, last
        assert_eq!(lines.len(), 1 + 7);
        let manifest: RunManifest = serde_json::from_slice(&read(a.path(), "manifest.json")).unwrap();
        assert_eq!(manifest.outputs, vec!["trajectory.csv", "final.json"]);
        assert_eq!(manifest.seed, 7);
    }

    #[test]
    fn seed_override_changes_hash_and_output() {
        let (c7, h7) = parse_config(TRAIN, None).unwrap();
        let (c8, h8) = parse_config(TRAIN, Some(8)).unwrap();
        assert_eq!(c7.seed, 7);
        assert_eq!(c8.seed, 8);
        assert_ne!(h7, h8);
        assert_eq!(h7.len(), 64);
        // key order and whitespace do not enter the hash
        let shuffled = TRAIN.replace("a = 0.0\nb = 1.0", "b = 1.0\na   = 0.0");
        assert_eq!(parse_config(&shuffled, None).unwrap().1, h7);
    }

    #[test]
    fn negative_sigma_names_the_field() {
        let text = TRAIN.replace(
            "kind = \"kmeans_winner\"",
            "kind = \"neural_gas\"\nsigma = -1.0",
        );
        let dir = tempfile::tempdir().unwrap();
        let err = run_text(&text, dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("neighborhood.sigma"), "{err}");
        assert!(fs::read_dir(dir.path()).unwrap().next().is_none());
    }

    #[test]
    fn unknown_and_mistyped_fields_report_their_path() {
        let err = parse_config(&TRAIN.replace("iterations = 3000", "iterations = \"many\""), None).unwrap_err();
        assert!(err.to_string().contains("train.iterations"), "{err}");
        let err = parse_config(&TRAIN.replace("tau = 100.0", "tau = 100.0\ntua = 1.0"), None).unwrap_err();
        assert!(err.to_string().contains("tua"), "{err}");
        assert_eq!(err.exit_code(), 2);
        let err = parse_config("command = \"train\"\nseed = [", None).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let cases = [
            (TRAIN.replace("alpha0 = 0.5", "alpha0 = 1.5"), "schedule.alpha0"),
            (TRAIN.replace("iterations = 3000", "iterations = 0"), "train.iterations"),
            (TRAIN.replace("count = 2", "count = 0"), "init"),
            (TRAIN.replace("b = 1.0", "b = -1.0"), "density"),
            (TRAIN.replace("[train]\niterations = 3000\nsnapshot_every = 500\n", ""), "train"),
        ];
        for (text, needle) in cases {
            let err = run_text(&text, dir.path()).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{err}");
            assert!(err.to_string().contains(needle), "{needle}: {err}");
        }
    }

    #[test]
    fn existing_outputs_need_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        run_text(TRAIN, dir.path()).unwrap();
        let before = read(dir.path(), "trajectory.csv");
        let err = run_text(TRAIN, dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("--overwrite"), "{err}");
        assert_eq!(read(dir.path(), "trajectory.csv"), before);
        let (cfg, hash) = parse_config(TRAIN, None).unwrap();
        run_experiment(&cfg, &hash, dir.path(), true).unwrap();
        assert_eq!(read(dir.path(), "trajectory.csv"), before);
    }

    #[test]
    fn runtime_failures_exit_with_three() {
        let blocker = tempfile::NamedTempFile::new().unwrap();
        let (cfg, hash) = parse_config(TRAIN, None).unwrap();
        // output "directory" is an existing regular file
        let err = run_experiment(&cfg, &hash, blocker.path(), true).unwrap_err();
        assert!(matches!(err, CliError::Runtime(_)), "{err}");
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn args_drive_a_run_and_missing_config_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("exp.toml");
        fs::write(&cfg_path, TRAIN).unwrap();
        let out = dir.path().join("out");
        let args = Args::try_parse_from([
            "vqlab",
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "3",
        ])
        .unwrap();
        let m = run(&args).unwrap();
        assert_eq!(m.seed, 3);
        assert!(out.join("manifest.json").exists());

        let args = Args::try_parse_from(["vqlab", "--config", "/nonexistent/exp.toml", "--out", "x"]).unwrap();
        assert_eq!(run(&args).unwrap_err().exit_code(), 2);

        let args = Args::try_parse_from(["vqlab", "--config", cfg_path.to_str().unwrap()]).unwrap();
        assert!(run(&args).unwrap_err().to_string().contains("output"));
    }

    #[test]
    fn energy_scan_header_is_exact() {
        let text = format!(
            "command = \"energy-scan\"\n{UNIT}{QUAD1}\
             [init]\nkind = \"explicit\"\npoints = [[0.3], [0.8]]\n\
             [neighborhood]\nkind = \"kmeans_winner\"\n\
             [scan]\netas = [0.2, 0.1, 0.05]\nconfigurations = [[[0.2], [0.7]]]\n"
        );
        let dir = tempfile::tempdir().unwrap();
        let m = run_text(&text, dir.path()).unwrap();
        assert_eq!(m.outputs, vec!["energy_scan.csv", "energy_scan.json", "sup_gap.csv"]);
        let csv = String::from_utf8(read(dir.path(), "energy_scan.csv")).unwrap();
        assert_eq!(
            csv.lines().next().unwrap(),
            "eta,theta,energy,cellular_energy,gap,tube_mass,stderr_energy,stderr_gap"
        );
        assert_eq!(csv.lines().count(), 4);
        let j = json_file(dir.path(), "energy_scan.json");
        assert_eq!(j["config_hash"], Json::from(m.config_hash));
        let gaps: Vec<f64> = j["gap"].as_array().unwrap().iter().map(|g| g.as_f64().unwrap()).collect();
        assert!(gaps.windows(2).all(|p| p[1] <= p[0]));
        let sup = String::from_utf8(read(dir.path(), "sup_gap.csv")).unwrap();
        assert_eq!(sup.lines().next().unwrap(), "eta,theta,max_gap,argmax");
    }

    #[test]
    fn ascending_etas_are_rejected() {
        let text = format!(
            "command = \"tube-scan\"\n{UNIT}{QUAD1}\
             [init]\nkind = \"explicit\"\npoints = [[0.3], [0.8]]\n[scan]\netas = [0.1, 0.2]\n"
        );
        let dir = tempfile::tempdir().unwrap();
        let err = run_text(&text, dir.path()).unwrap_err();
        assert!(err.to_string().contains("scan.etas"), "{err}");
    }

    #[test]
    fn counterexample_verdict_reports_distinct_slopes() {
        let text = "command = \"counterexample\"\n\
             [counterexample]\nw1 = -1.0\nw2 = 1.0\neta = 0.4\nlambda = 0.1\nbeta = 10.0\n\
             zeta1 = [0.03, 0.06, 0.09, 0.12, 0.15, 0.18, 0.21, 0.24, 0.27, 0.30, 0.33, 0.36]\n\
             panels = 20000\n";
        let dir = tempfile::tempdir().unwrap();
        run_text(text, dir.path()).unwrap();
        let v = json_file(dir.path(), "verdict.json");
        assert_eq!(v["distinct"], Json::Bool(true));
        let l1 = v["L1_hat"].as_f64().unwrap();
        let l1_paper = v["L1_paper"].as_f64().unwrap();
        assert!((l1 - l1_paper).abs() / l1_paper < 0.01);
        let csv = String::from_utf8(read(dir.path(), "counterexample.csv")).unwrap();
        assert_eq!(csv.lines().next().unwrap(), "zeta1,delta_analytic,delta_numeric,branch");
        assert_eq!(csv.lines().count(), 13);

        let bad = text.replace("zeta1 = [0.03", "zeta1 = [0.5, 0.03");
        let err = run_text(&bad, tempfile::tempdir().unwrap().path()).unwrap_err();
        assert!(err.to_string().contains("counterexample.zeta1[0]"), "{err}");
    }

    #[test]
    fn gradient_and_invariance_commands_run() {
        let gaussian = "[density]\nkind = \"gaussian_mixture\"\nlo = [0.0]\nhi = [1.0]\n\
             [[density.components]]\nmean = [0.5]\nvariance = [0.09]\nweight = 1.0\n";
        let text = format!(
            "command = \"gradient-check\"\n{gaussian}{QUAD1}\
             [init]\nkind = \"explicit\"\npoints = [[0.3], [0.8]]\n\
             [neighborhood]\nkind = \"kmeans_winner\"\n[gradient]\neta = 0.002\nprototypes = [2]\n"
        );
        let dir = tempfile::tempdir().unwrap();
        run_text(&text, dir.path()).unwrap();
        let g = json_file(dir.path(), "gradient.json");
        assert!(g["relative_error"].as_f64().unwrap() < 1e-3);
        let csv = String::from_utf8(read(dir.path(), "gradient.csv")).unwrap();
        assert_eq!(csv.lines().count(), 2);

        let err = run_text(&text.replace("prototypes = [2]", "prototypes = [3]"), tempfile::tempdir().unwrap().path())
            .unwrap_err();
        assert!(err.to_string().contains("gradient.prototypes[0]"), "{err}");

        let text = format!(
            "command = \"invariance\"\nseed = 5\n{SQUARE}\
             [init]\nkind = \"explicit\"\npoints = [[0.25, 0.25], [0.75, 0.25], [0.25, 0.75], [0.75, 0.75]]\n\
             [invariance]\neta = 0.1\ntrials = 500\nadversarial_trials = 20\n"
        );
        let dir = tempfile::tempdir().unwrap();
        run_text(&text, dir.path()).unwrap();
        let v = json_file(dir.path(), "invariance.json");
        assert_eq!(v["violations"], Json::from(0));
        assert_eq!(v["adversarial"]["violations"], Json::from(20));
    }

    #[test]
    fn shipped_configs_validate() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let mut seen = 0;
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.extension().is_some_and(|e| e == "toml") {
                let (cfg, _) = load_config(&path, None).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
                plan(&cfg).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
                seen += 1;
            }
        }
        assert!(seen >= 6);
    }

    /// One config per variant of every config enum, each run to completion.
    #[test]
    fn every_config_variant_runs() {
        let densities = [
            UNIT.to_string(),
            "[density]\nkind = \"piecewise_uniform\"\nnormalize = true\n\
             [[density.segments]]\na = 0.0\nb = 0.5\nheight = 3.0\n\
             [[density.segments]]\na = 0.5\nb = 1.0\nheight = 1.0\n"
                .to_string(),
            "[density]\nkind = \"gaussian_mixture\"\nlo = [0.0]\nhi = [1.0]\n\
             [[density.components]]\nmean = [0.3]\nvariance = [0.01]\nweight = 0.5\n\
             [[density.components]]\nmean = [0.7]\nvariance = [0.01]\nweight = 0.5\n"
                .to_string(),
        ];
        let neighborhoods = [
            "kind = \"kmeans_winner\"",
            "kind = \"kmeans_all_winners\"",
            "kind = \"som\"\nsigma = 0.5\ngraph = { kind = \"chain\", n = 3 }",
            "kind = \"som\"\nsigma = 0.5\ngraph = { kind = \"explicit\", n = 3, edges = [[1, 2], [2, 3]] }",
            "kind = \"neural_gas\"\nsigma = 0.5",
            "kind = \"recruiting_ng\"\nsigma = 0.5\nepsilons = [1.0, 0.5, 0.25]",
            "kind = \"recruiting_som\"\nsigmas = [0.5, 0.4, 0.3]\ngraph = { kind = \"chain\", n = 3 }",
        ];
        let schedules = [
            "kind = \"constant\"\nalpha = 0.05",
            "kind = \"linear\"\nalpha0 = 0.5\nalpha_final = 0.01\nsteps = 300",
            "kind = \"inverse_time\"\nalpha0 = 0.5\ntau = 50.0",
        ];
        let inits = ["kind = \"random\"\ncount = 3", "kind = \"explicit\"\npoints = [[0.1], [0.5], [0.9]]"];
        let mut runs = 0;
        for (i, density) in densities.iter().enumerate() {
            for (k, nb) in neighborhoods.iter().enumerate() {
                let text = format!(
                    "command = \"train\"\nseed = {k}\n{density}{QUAD1}\
                     [init]\n{}\n[neighborhood]\n{nb}\n[schedule]\n{}\n\
                     [train]\niterations = 500\nsnapshot_every = 100\nenergy = true\n",
                    inits[(i + k) % 2],
                    schedules[(i + k) % 3],
                );
                let dir = tempfile::tempdir().unwrap();
                run_text(&text, dir.path()).unwrap_or_else(|e| panic!("{text}\n{e}"));
                let fin = json_file(dir.path(), "final.json");
                assert!(fin["final_energy"].as_f64().unwrap() >= 0.0);
                runs += 1;
            }
        }
        assert_eq!(runs, 21);

        let planar = [
            (
                "[integrator]\nkind = \"quadrature2d\"\npanels = 200\n",
                "kind = \"som\"\nsigma = 0.3\ngraph = { kind = \"grid2d\", rows = 2, cols = 2 }",
            ),
            ("[integrator]\nkind = \"monte_carlo\"\nsamples = 20000\n", "kind = \"kmeans_winner\""),
        ];
        for (integ, nb) in planar {
            let text = format!(
                "command = \"tube-scan\"\nseed = 1\n{SQUARE}{integ}\
                 [init]\nkind = \"random\"\ncount = 4\n[neighborhood]\n{nb}\n\
                 [scan]\netas = [0.2, 0.1]\n"
            );
            let dir = tempfile::tempdir().unwrap();
            run_text(&text, dir.path()).unwrap_or_else(|e| panic!("{text}\n{e}"));
            let csv = String::from_utf8(read(dir.path(), "tube_scan.csv")).unwrap();
            assert_eq!(csv.lines().count(), 3);
        }
    }
}
