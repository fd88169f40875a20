//! Experiment configuration documents.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use shufflefl::fed::{Algorithm, FLConfig, LocalWork, Metric};
use shufflefl::synth::GeneratorKind;
use shufflefl::theory::{ConvergenceParams, ConvexityMode, SmoothnessChoice};

use crate::error::{CliError, CliResult};

/// Environment variable naming the directory with the four MNIST IDX files.
pub const MNIST_DIR_ENV: &str = "SHUFFLEFL_MNIST_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub problem: ProblemConfig,
    #[serde(default)]
    pub partition: PartitionConfig,
    #[serde(default)]
    pub shuffle: ShuffleConfig,
    pub fl: FlBlock,
    #[serde(default)]
    pub x0: InitConfig,
    #[serde(default)]
    pub target: Option<TargetConfig>,
    #[serde(default)]
    pub tune: Option<TuneConfig>,
    #[serde(default)]
    pub quantify: QuantifyConfig,
    #[serde(default)]
    pub outputs: OutputsConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemConfig {
    /// Distributed least squares; client `i` has curvature `i^2`.
    Quadratic {
        n_clients: usize,
        samples_per_client: usize,
        dim: usize,
        zeta2: f64,
        sigma2: f64,
    },
    /// Multinomial logistic regression on an MNIST subset.
    MnistSoftmax {
        #[serde(default)]
        data_dir: Option<PathBuf>,
        #[serde(default = "default_per_class")]
        per_class: usize,
        /// Variance of the Gaussian noise added to every gradient, before
        /// division by the pixel count.
        #[serde(default)]
        noise: f64,
    },
}

fn default_per_class() -> usize {
    1024
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionConfig {
    /// Keep the clients the problem generator produced.
    #[default]
    Natural,
    Iid { n_clients: usize },
    Dirichlet { n_clients: usize, alpha: f64 },
    SplitByClass { n_clients: usize },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ShuffleConfig {
    #[default]
    None,
    Real {
        p: f64,
        /// Defaults to the experiment seed.
        #[serde(default)]
        seed: Option<u64>,
    },
    Fedssyn {
        rho: f64,
        n_tilde: usize,
        #[serde(default = "default_generator")]
        generator: GeneratorKind,
        #[serde(default)]
        n_tilde_per_client: Option<Vec<usize>>,
    },
}

fn default_generator() -> GeneratorKind {
    GeneratorKind::Empirical
}

/// Federated training settings; the seed comes from the experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlBlock {
    #[serde(default = "default_algorithm")]
    pub algorithm: Algorithm,
    pub rounds: usize,
    pub local: LocalWork,
    pub eta: f64,
    #[serde(default = "one")]
    pub participation: f64,
    #[serde(default)]
    pub prox_mu: f64,
}

fn default_algorithm() -> Algorithm {
    Algorithm::FedAvg
}

fn one() -> f64 {
    1.0
}

impl FlBlock {
    pub fn to_config(&self, seed: u64) -> FLConfig {
        FLConfig {
            algorithm: self.algorithm,
            rounds: self.rounds,
            local: self.local.clone(),
            eta: self.eta,
            participation: self.participation,
            prox_mu: self.prox_mu,
            seed,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InitConfig {
    #[default]
    Zeros,
    Gaussian { variance: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    pub metric: Metric,
    /// The smallest threshold is the primary target.
    pub thresholds: Vec<f64>,
    #[serde(default)]
    pub stop_at_target: bool,
}

impl TargetConfig {
    pub fn primary(&self) -> f64 {
        self.thresholds.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneConfig {
    pub eta_grid: Vec<f64>,
    #[serde(default = "default_stall")]
    pub stall_window: Option<usize>,
}

fn default_stall() -> Option<usize> {
    Some(100)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantifyConfig {
    #[serde(default = "yes")]
    pub enabled: bool,
    /// Gaussian points added to the trajectory.
    #[serde(default = "default_extra")]
    pub extra_random: usize,
    /// Trajectories longer than this are thinned to evenly spaced rounds.
    #[serde(default = "default_max_points")]
    pub max_points: usize,
    #[serde(default = "default_draws")]
    pub draws: usize,
    #[serde(default = "one_usize")]
    pub batch_size: usize,
}

fn yes() -> bool {
    true
}

fn default_extra() -> usize {
    10
}

fn default_max_points() -> usize {
    50
}

fn default_draws() -> usize {
    1000
}

fn one_usize() -> usize {
    1
}

impl Default for QuantifyConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            extra_random: default_extra(),
            max_points: default_max_points(),
            draws: default_draws(),
            batch_size: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputsConfig {
    pub round_log: String,
    pub summary: String,
    /// Stem of the heterogeneity report (`.csv` and `.json` are appended).
    pub hetero: String,
    pub theory: String,
    pub trajectory: String,
    pub manifest: String,
}

impl Default for OutputsConfig {
    fn default() -> Self {
        Self {
            round_log: "rounds.csv".into(),
            summary: "summary.json".into(),
            hetero: "hetero".into(),
            theory: "theory.json".into(),
            trajectory: "trajectory.json".into(),
            manifest: "manifest.json".into(),
        }
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl ExperimentConfig {
    pub fn validate(&self) -> CliResult<()> {
        let fl = self.fl.to_config(self.seed);
        fl.validate().map_err(|e| config_err(format!("fl: {e}")))?;
        match (&self.problem, &self.partition) {
            (ProblemConfig::Quadratic { .. }, PartitionConfig::Natural) => {}
            (ProblemConfig::Quadratic { .. }, _) => {
                return Err(config_err("partition: quadratic problems only support the natural partition"))
            }
            (ProblemConfig::MnistSoftmax { .. }, PartitionConfig::Natural) => {
                return Err(config_err("partition: mnist_softmax needs iid, dirichlet or split_by_class"))
            }
            _ => {}
        }
        if let ProblemConfig::Quadratic { n_clients, samples_per_client, dim, zeta2, sigma2 } = self.problem {
            if n_clients == 0 || samples_per_client == 0 || dim == 0 {
                return Err(config_err("problem.quadratic: sizes must be positive"));
            }
            if !(zeta2 >= 0.0 && sigma2 >= 0.0) {
                return Err(config_err("problem.quadratic: variances must be nonnegative"));
            }
        }
        if let ProblemConfig::MnistSoftmax { per_class, noise, .. } = self.problem {
            if per_class == 0 || !(noise >= 0.0) {
                return Err(config_err("problem.mnist_softmax: per_class must be positive and noise nonnegative"));
            }
        }
        match self.partition {
            PartitionConfig::Iid { n_clients } | PartitionConfig::SplitByClass { n_clients } if n_clients == 0 => {
                return Err(config_err("partition: n_clients must be positive"))
            }
            PartitionConfig::Dirichlet { n_clients, alpha } if n_clients == 0 || !(alpha > 0.0) => {
                return Err(config_err("partition.dirichlet: n_clients and alpha must be positive"))
            }
            _ => {}
        }
        match &self.shuffle {
            ShuffleConfig::Real { p, .. } if !(0.0..=1.0).contains(p) => {
                return Err(config_err("shuffle.real.p: must lie in [0, 1]"))
            }
            ShuffleConfig::Fedssyn { rho, .. } => {
                if !matches!(self.problem, ProblemConfig::MnistSoftmax { .. }) {
                    return Err(config_err("shuffle.fedssyn: only supported for classification problems"));
                }
                if !(*rho > 0.0 && *rho <= 1.0) {
                    return Err(config_err("shuffle.fedssyn.rho: must lie in (0, 1]"));
                }
            }
            _ => {}
        }
        if let InitConfig::Gaussian { variance } = self.x0 {
            if !(variance >= 0.0) {
                return Err(config_err("x0.gaussian.variance: must be nonnegative"));
            }
        }
        if let Some(t) = &self.target {
            if t.thresholds.is_empty() || t.thresholds.iter().any(|v| !(*v > 0.0)) {
                return Err(config_err("target.thresholds: need at least one positive value"));
            }
            match (t.metric, &self.problem) {
                (Metric::DistServer, ProblemConfig::MnistSoftmax { .. }) => {
                    return Err(config_err("target.metric: dist_server needs a known optimum (quadratic only)"))
                }
                (Metric::TestLoss, ProblemConfig::Quadratic { .. }) => {
                    return Err(config_err("target.metric: quadratic problems have no test set"))
                }
                _ => {}
            }
        }
        if let Some(t) = &self.tune {
            if self.target.is_none() {
                return Err(config_err("tune: requires a target block"));
            }
            if t.eta_grid.is_empty() || t.eta_grid.iter().any(|v| !(*v > 0.0)) {
                return Err(config_err("tune.eta_grid: need at least one positive stepsize"));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn mnist_dir(&self) -> Option<PathBuf> {
        match &self.problem {
            ProblemConfig::MnistSoftmax { data_dir: Some(d), .. } => Some(d.clone()),
            ProblemConfig::MnistSoftmax { data_dir: None, .. } => Some(locate_mnist()),
            _ => None,
        }
    }
}

/// `$SHUFFLEFL_MNIST_DIR`, else the first `data/mnist` found walking up from
/// the working directory, else `data/mnist`.
pub fn locate_mnist() -> PathBuf {
    if let Some(dir) = std::env::var_os(MNIST_DIR_ENV) {
        return PathBuf::from(dir);
    }
    let rel = Path::new("data").join("mnist");
    if let Ok(cwd) = std::env::current_dir() {
        for dir in cwd.ancestors() {
            if dir.join(&rel).join("train-images-idx3-ubyte").is_file() {
                return dir.join(&rel);
            }
        }
    }
    rel
}

/// Deserializes with the failing field path in the message.
pub fn parse_json<T: serde::de::DeserializeOwned>(text: &str) -> CliResult<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| config_err(format!("{}: {}", e.path(), e.inner())))
}

pub fn load_experiment(path: &Path) -> CliResult<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    let cfg: ExperimentConfig = parse_json(&text)?;
    cfg.validate()?;
    Ok(cfg)
}

/// A base experiment and a grid of overrides addressed by dotted paths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub base: Value,
    #[serde(default)]
    pub grid: BTreeMap<String, Vec<Value>>,
}

/// One grid cell: the override values in key order.
pub type Cell = BTreeMap<String, Value>;

impl SweepConfig {
    /// Cartesian product of the grid, keys varying slowest-first in sorted order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = vec![Cell::new()];
        for (key, values) in &self.grid {
            cells = cells
                .into_iter()
                .flat_map(|c| {
                    values.iter().map(move |v| {
                        let mut c = c.clone();
                        c.insert(key.clone(), v.clone());
                        c
                    })
                })
                .collect();
        }
        cells
    }

    pub fn cell_config(&self, cell: &Cell) -> CliResult<ExperimentConfig> {
        let mut doc = self.base.clone();
        for (path, value) in cell {
            set_path(&mut doc, path, value.clone())?;
        }
        let cfg: ExperimentConfig = parse_json(&doc.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Sets `a.b.c` in a JSON document, creating objects along the way and
/// replacing non-object intermediates (e.g. `"none"` under `shuffle`).
pub fn set_path(doc: &mut Value, path: &str, value: Value) -> CliResult<()> {
    let mut cur = doc;
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("grid: malformed path {path:?}")));
    }
    for part in &parts[..parts.len() - 1] {
        if !cur.is_object() {
            *cur = Value::Object(Default::default());
        }
        cur = cur.as_object_mut().expect("object").entry(part.to_string()).or_insert(Value::Null);
    }
    if !cur.is_object() {
        *cur = Value::Object(Default::default());
    }
    cur.as_object_mut().expect("object").insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

pub fn load_sweep(path: &Path) -> CliResult<SweepConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    let value: Value = parse_json(&text)?;
    // a plain experiment is a one-cell sweep
    if value.get("base").is_none() {
        return Ok(SweepConfig { base: value, grid: BTreeMap::new() });
    }
    parse_json(&text)
}

/// Input of the `theory` subcommand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryConfig {
    /// Literal parameters; alternatively read from `report`.
    #[serde(default)]
    pub params: Option<ConvergenceParams<f64>>,
    #[serde(default)]
    pub report: Option<ReportSource>,
    pub epsilons: Vec<f64>,
    /// Shuffle fractions to tabulate; defaults to the `p` in the parameters.
    #[serde(default)]
    pub p_grid: Option<Vec<f64>>,
    #[serde(default = "default_mode")]
    pub mode: ConvexityMode,
    #[serde(default)]
    pub smoothness: SmoothnessChoice,
    /// `(epsilon, rounds)` measurements for the round predictor fit.
    #[serde(default)]
    pub observed_rounds: Option<Vec<(f64, f64)>>,
}

fn default_mode() -> ConvexityMode {
    ConvexityMode::StronglyConvex
}

/// A heterogeneity report JSON plus the values it does not contain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSource {
    pub path: PathBuf,
    pub tau: usize,
    pub n_clients: usize,
    #[serde(default = "one")]
    pub mu: f64,
}
