//! The `run`, `quantify` and `partition` workflows.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use shufflefl::data::{
    class_histogram, dirichlet_partition, iid_partition, load_idx_files, load_idx_files_per_class,
    shuffle_real_fraction, split_by_class, Dataset, FederatedDataset, LabeledExample, Manifest, ShufflePlan,
};
use shufflefl::fed::{
    local_steps, round_logs_csv, run_federated, tune_stepsize, FLConfig, Metric, RoundLog, RunOptions, RunSummary,
    Target,
};
use shufflefl::hetero::{
    quantify, smoothness_quadratic, EvalPointSet, HeterogeneityReport, QuadraticSmoothness, QuantifyOptions,
};
use shufflefl::objective::{gen_quadratic, LeastSquares, Objective, QuadraticSpec, SoftmaxRegression};
use shufflefl::rng::{fill_gaussian, rng_from, stream};
use shufflefl::synth::{fedssyn_pipeline, FedssynAudit, FedssynConfig};
use shufflefl::theory::{
    corollary1_t, fit_round_predictor, lemma1_bounds, predicted_speedup_ratio, speedup_ratio_closed_form,
    ConvergenceParams, ConvexityMode, RoundPredictorFit, ShuffledBounds, SmoothnessChoice, TheoryPrediction,
};

use crate::config::{ExperimentConfig, InitConfig, PartitionConfig, ProblemConfig, ShuffleConfig, MNIST_DIR_ENV};
use crate::error::{CliError, CliResult};
use crate::output::{read_file, write_file, Stamp};

/// Federation before and after shuffling, plus what the outputs need to know
/// about how it was built.
pub struct Setup<O: Objective<f64>> {
    pub objective: O,
    pub baseline: FederatedDataset<O::Example>,
    pub federation: FederatedDataset<O::Example>,
    pub synthetic: Option<Vec<O::Example>>,
    pub x_star: Option<Vec<f64>>,
    pub curvature: Option<QuadraticSmoothness<f64>>,
    pub shuffle: ShuffleRecord,
    /// Per-client one-off exchange, e.g. synthetic data.
    pub setup_bytes: u64,
}

pub enum Workload {
    Quadratic(Setup<LeastSquares>),
    Softmax(Setup<SoftmaxRegression<f64>>),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ShuffleRecord {
    pub mode: String,
    /// Fraction of non-local data over the whole federation.
    pub effective_p: f64,
    pub effective_p_per_client: Vec<f64>,
    #[serde(skip)]
    pub plan: Option<ShufflePlan>,
    #[serde(skip)]
    pub audit: Option<FedssynAudit>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn build(cfg: &ExperimentConfig) -> CliResult<Workload> {
    match &cfg.problem {
        ProblemConfig::Quadratic { n_clients, samples_per_client, dim, zeta2, sigma2 } => {
            let spec = QuadraticSpec {
                n_clients: *n_clients,
                samples_per_client: *samples_per_client,
                dim: *dim,
                zeta2: *zeta2,
                sigma2: *sigma2,
                seed: cfg.seed,
            };
            let problem = gen_quadratic::<f64>(&spec)?;
            let x_star = problem.optimum()?;
            let (federation, shuffle) = shuffle_real(cfg, &problem.data)?;
            let curvature = Some(smoothness_quadratic(&problem.data, shuffle.effective_p));
            Ok(Workload::Quadratic(Setup {
                objective: problem.objective,
                baseline: problem.data,
                federation,
                synthetic: None,
                x_star: Some(x_star),
                curvature,
                shuffle,
                setup_bytes: 0,
            }))
        }
        ProblemConfig::MnistSoftmax { per_class, noise, .. } => {
            let dir = cfg.mnist_dir().expect("mnist problem");
            let (train, test) = load_mnist(&dir, *per_class, cfg.seed)?;
            let d_in = train.examples[0].features.len();
            let baseline = partition(cfg, &train)?.with_test_set(Some(test));
            let objective = SoftmaxRegression::new(d_in, train.num_classes).with_noise(*noise);
            let (federation, synthetic, shuffle, setup_bytes) = match &cfg.shuffle {
                ShuffleConfig::Fedssyn { rho, n_tilde, generator, n_tilde_per_client } => {
                    let fcfg = FedssynConfig {
                        rho: *rho,
                        n_tilde: *n_tilde,
                        generator: *generator,
                        seed: cfg.seed,
                        n_tilde_per_client: n_tilde_per_client.clone(),
                    };
                    let out = fedssyn_pipeline(&baseline, &fcfg)?;
                    if !out.audit.real_locality {
                        return Err(CliError::Failed("fedssyn locality audit failed".into()));
                    }
                    let synthetic_total = out.synthetic_pool.len() as f64;
                    let record = ShuffleRecord {
                        mode: "fedssyn".into(),
                        effective_p: synthetic_total / out.augmented.total_examples() as f64,
                        effective_p_per_client: out.audit.effective_p.clone(),
                        plan: None,
                        audit: Some(out.audit),
                    };
                    let bytes = (*n_tilde * (d_in + 1) * std::mem::size_of::<f64>()) as u64;
                    (out.augmented, Some(out.synthetic_pool), record, bytes)
                }
                _ => {
                    let (fed, record) = shuffle_real(cfg, &baseline)?;
                    (fed, None, record, 0)
                }
            };
            Ok(Workload::Softmax(Setup {
                objective,
                baseline,
                federation,
                synthetic,
                x_star: None,
                curvature: None,
                shuffle,
                setup_bytes,
            }))
        }
    }
}

fn shuffle_real<E: Clone>(
    cfg: &ExperimentConfig,
    fed: &FederatedDataset<E>,
) -> CliResult<(FederatedDataset<E>, ShuffleRecord)> {
    match cfg.shuffle {
        ShuffleConfig::Real { p, seed } => {
            let (out, plan) = shuffle_real_fraction(fed, p, seed.unwrap_or(cfg.seed))?;
            let per_client: Vec<f64> = plan
                .moved_indices
                .iter()
                .zip(&fed.clients)
                .map(|(m, c)| m.len() as f64 / c.len() as f64)
                .collect();
            let record = ShuffleRecord {
                mode: "real".into(),
                effective_p: plan.pool_size() as f64 / fed.total_examples() as f64,
                effective_p_per_client: per_client,
                plan: Some(plan),
                audit: None,
            };
            Ok((out, record))
        }
        _ => {
            let record = ShuffleRecord {
                mode: "none".into(),
                effective_p: 0.0,
                effective_p_per_client: vec![0.0; fed.num_clients()],
                ..Default::default()
            };
            Ok((fed.clone(), record))
        }
    }
}

fn partition(
    cfg: &ExperimentConfig,
    train: &Dataset<LabeledExample<f64>>,
) -> CliResult<FederatedDataset<LabeledExample<f64>>> {
    Ok(match cfg.partition {
        PartitionConfig::Iid { n_clients } => iid_partition(train, n_clients, cfg.seed)?,
        PartitionConfig::Dirichlet { n_clients, alpha } => dirichlet_partition(train, n_clients, alpha, cfg.seed)?,
        PartitionConfig::SplitByClass { n_clients } => split_by_class(train, n_clients)?,
        PartitionConfig::Natural => unreachable!("rejected by validation"),
    })
}

const MNIST_FILES: [&str; 4] =
    ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"];

/// Training subset with `per_class` images per digit and the full test set.
pub fn load_mnist(
    dir: &Path,
    per_class: usize,
    seed: u64,
) -> CliResult<(Dataset<LabeledExample<f64>>, Vec<LabeledExample<f64>>)> {
    if let Some(missing) = MNIST_FILES.iter().find(|f| !dir.join(f).is_file()) {
        return Err(CliError::Config(format!(
            "problem.mnist_softmax.data_dir: {} not found in {} (set data_dir or {MNIST_DIR_ENV}, or run scripts/fetch_mnist.sh)",
            missing,
            dir.display()
        )));
    }
    let train = load_idx_files_per_class(dir.join(MNIST_FILES[0]), dir.join(MNIST_FILES[1]), per_class, seed)?;
    let test = load_idx_files(dir.join(MNIST_FILES[2]), dir.join(MNIST_FILES[3]))?;
    Ok((train, test.examples))
}

pub fn initial_point(cfg: &ExperimentConfig, dim: usize) -> Vec<f64> {
    let mut x = vec![0.0; dim];
    if let InitConfig::Gaussian { variance } = cfg.x0 {
        fill_gaussian(&mut rng_from(cfg.seed, &[stream::INIT]), variance, &mut x);
    }
    x
}

/// `count` evenly spaced points of `trajectory`, both ends included.
pub fn thin<T: Clone>(trajectory: &[T], count: usize) -> Vec<T> {
    let n = trajectory.len();
    if n <= count || count == 0 {
        return trajectory.to_vec();
    }
    if count == 1 {
        return vec![trajectory[n - 1].clone()];
    }
    let mut idx: Vec<usize> = (0..count)
        .map(|k| ((k * (n - 1)) as f64 / (count - 1) as f64).round() as usize)
        .collect();
    idx.dedup();
    idx.into_iter().map(|i| trajectory[i].clone()).collect()
}

fn metric_value(log: &RoundLog, metric: Metric) -> Option<f64> {
    match metric {
        Metric::DistServer => log.dist_server,
        Metric::TrainLoss => Some(log.train_loss),
        Metric::TestLoss => log.test_loss,
    }
}

/// First logged round whose metric is at or below `threshold`.
pub fn rounds_to(logs: &[RoundLog], metric: Metric, threshold: f64) -> Option<usize> {
    logs.iter().find(|l| metric_value(l, metric).is_some_and(|v| v <= threshold)).map(|l| l.round)
}

/// Mean client distance over the last fifth of the rounds.
pub fn plateau(logs: &[RoundLog]) -> Option<f64> {
    let tail = logs.len().div_ceil(5);
    let vals: Option<Vec<f64>> = logs[logs.len() - tail..].iter().map(|l| l.dist_clients_mean).collect();
    vals.filter(|v| !v.is_empty()).map(|v| mean(&v))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSummary {
    pub metric: Metric,
    pub threshold: f64,
    pub tuned_eta: Option<f64>,
    pub tuned_rounds: Option<usize>,
    pub per_eta: Vec<(f64, Option<usize>)>,
    /// Rounds to the threshold in the main run.
    pub rounds_in_run: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub problem: String,
    pub eta: f64,
    pub run: RunSummary,
    pub targets: Vec<TargetSummary>,
    /// `R = a / sqrt(eps) + b` over the tuned round counts.
    pub fit: Option<RoundPredictorFit<f64>>,
    pub plateau: Option<f64>,
    pub shuffle: ShuffleRecord,
    pub real_locality: Option<bool>,
    pub zeta2_hat: Option<f64>,
    pub sigma2_hat: Option<f64>,
    pub files: BTreeMap<String, String>,
}

/// Effective convergence parameters and what they predict.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryRecord {
    pub mode: ConvexityMode,
    pub params: ConvergenceParams<f64>,
    pub bounds: ShuffledBounds<f64>,
    pub measured_zeta2_p: f64,
    pub measured_sigma2_p: f64,
    pub predictions: Vec<TheoryPrediction<f64>>,
    /// `A_p / A_0` from the bounds.
    pub predicted_ratio: Option<f64>,
    /// `(1-p) sqrt((1-p) + p L_avg/L_max)`.
    pub closed_form_ratio: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub dir: PathBuf,
    pub round_log: PathBuf,
    pub hetero: Option<PathBuf>,
    pub theory: Option<PathBuf>,
    pub summary_path: PathBuf,
    pub summary: Summary,
}

pub fn stamp(cfg: &ExperimentConfig) -> Stamp {
    Stamp { config_hash: cfg.hash(), seed: cfg.seed }
}

/// Builds, optionally tunes, trains, measures and writes every output.
/// Divergence of the main run is reported after the outputs are written.
pub fn cmd_run(cfg: &ExperimentConfig, out: &Path) -> CliResult<ExperimentResult> {
    cfg.validate()?;
    match build(cfg)? {
        Workload::Quadratic(s) => run_setup(cfg, &s, "quadratic", out),
        Workload::Softmax(s) => run_setup(cfg, &s, "mnist_softmax", out),
    }
}

fn quantify_options(cfg: &ExperimentConfig, p: f64) -> QuantifyOptions {
    QuantifyOptions {
        batch_size: cfg.quantify.batch_size,
        draws: cfg.quantify.draws,
        seed: cfg.seed,
        p,
        smoothness: true,
    }
}

fn run_setup<O: Objective<f64>>(
    cfg: &ExperimentConfig,
    s: &Setup<O>,
    problem: &str,
    out: &Path,
) -> CliResult<ExperimentResult> {
    let stamp = stamp(cfg);
    let fl = cfg.fl.to_config(cfg.seed);
    let x0 = initial_point(cfg, s.objective.dim());

    let mut targets = Vec::new();
    if let Some(t) = &cfg.target {
        for &threshold in &t.thresholds {
            let target = Target { metric: t.metric, threshold };
            let tuned = match &cfg.tune {
                Some(tune) => Some(tune_stepsize(
                    &s.objective,
                    &s.federation,
                    &fl,
                    &tune.eta_grid,
                    &x0,
                    s.x_star.as_deref(),
                    target,
                    tune.stall_window,
                )?),
                None => None,
            };
            if tuned.as_ref().is_some_and(|r| r.censored()) {
                log::warn!("no stepsize reached {threshold} within {} rounds", fl.rounds);
            }
            targets.push(TargetSummary {
                metric: t.metric,
                threshold,
                tuned_eta: tuned.as_ref().and_then(|r| r.eta),
                tuned_rounds: tuned.as_ref().and_then(|r| r.rounds),
                per_eta: tuned.map(|r| r.per_eta).unwrap_or_default(),
                rounds_in_run: None,
            });
        }
    }

    let primary = cfg.target.as_ref().map(|t| Target { metric: t.metric, threshold: t.primary() });
    let eta = targets
        .iter()
        .filter(|t| Some(t.threshold) == primary.map(|p| p.threshold))
        .find_map(|t| t.tuned_eta)
        .unwrap_or(fl.eta);
    let main_cfg = FLConfig { eta, ..fl.clone() };
    let opts = RunOptions {
        x_star: s.x_star.clone(),
        target: primary,
        stop_at_target: cfg.target.as_ref().is_some_and(|t| t.stop_at_target),
        record_trajectory: true,
        setup_bytes: s.setup_bytes,
        stall_window: None,
    };
    let outcome = run_federated(&s.objective, &s.federation, &main_cfg, &x0, &opts)?;
    for t in &mut targets {
        t.rounds_in_run = rounds_to(&outcome.logs, t.metric, t.threshold);
    }

    let mut files = BTreeMap::new();
    let o = &cfg.outputs;
    let round_log = write_file(out, &o.round_log, &stamp.csv(&round_logs_csv(&outcome.logs)))?;
    files.insert("round_log".into(), o.round_log.clone());
    write_file(out, &o.trajectory, &stamp.json(TrajectoryFile { points: outcome.trajectory.clone() })?)?;
    files.insert("trajectory".into(), o.trajectory.clone());
    if let Some(audit) = &s.shuffle.audit {
        write_file(out, "fedssyn_audit.json", &stamp.json(audit)?)?;
        files.insert("fedssyn_audit".into(), "fedssyn_audit.json".into());
    }

    let mut hetero = None;
    let mut theory = None;
    let mut report = None;
    if cfg.quantify.enabled {
        let traj = thin(&outcome.trajectory, cfg.quantify.max_points);
        let points = EvalPointSet::from_trajectory(&traj, cfg.quantify.extra_random, cfg.seed)?;
        let pair = measure(cfg, s, &points)?;
        hetero = Some(write_reports(&stamp, out, &o.hetero, &pair, &mut files)?);
        if let Some(record) = theory_record(cfg, s, &pair, &targets) {
            theory = Some(write_file(out, &o.theory, &stamp.json(&record)?)?);
            files.insert("theory".into(), o.theory.clone());
        }
        report = Some(pair.shuffled);
    }

    let fit = fit_targets(&targets);
    let summary = Summary {
        problem: problem.into(),
        eta,
        run: outcome.summary(),
        targets,
        fit,
        plateau: plateau(&outcome.logs),
        shuffle: ShuffleRecord { plan: None, audit: None, ..s.shuffle.clone() },
        real_locality: s.shuffle.audit.as_ref().map(|a| a.real_locality),
        zeta2_hat: report.as_ref().map(|r| r.zeta2_hat),
        sigma2_hat: report.as_ref().map(|r| r.sigma2_hat),
        files,
    };
    let summary_path = write_file(out, &o.summary, &stamp.json(&summary)?)?;
    if outcome.diverged {
        return Err(CliError::Diverged(format!("main run with eta = {eta}; outputs in {}", out.display())));
    }
    Ok(ExperimentResult { dir: out.to_path_buf(), round_log, hetero, theory, summary_path, summary })
}

fn fit_targets(targets: &[TargetSummary]) -> Option<RoundPredictorFit<f64>> {
    let samples: Vec<(f64, f64)> =
        targets.iter().filter_map(|t| t.tuned_rounds.map(|r| (t.threshold, r as f64))).collect();
    if samples.len() < 2 {
        return None;
    }
    fit_round_predictor(&samples).ok()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrajectoryFile {
    pub points: Vec<Vec<f64>>,
}

/// Reports on the shuffled federation and, if it differs, on the baseline.
pub struct ReportPair {
    pub shuffled: HeterogeneityReport<f64>,
    pub baseline: Option<HeterogeneityReport<f64>>,
}

impl ReportPair {
    pub fn unshuffled(&self) -> &HeterogeneityReport<f64> {
        self.baseline.as_ref().unwrap_or(&self.shuffled)
    }
}

fn measure<O: Objective<f64>>(
    cfg: &ExperimentConfig,
    s: &Setup<O>,
    points: &EvalPointSet<f64>,
) -> CliResult<ReportPair> {
    let p = s.shuffle.effective_p;
    let shuffled = quantify(&s.objective, &s.federation, s.synthetic.as_deref(), points, &quantify_options(cfg, p))?;
    let baseline = if s.shuffle.mode == "none" {
        None
    } else {
        Some(quantify(&s.objective, &s.baseline, None, points, &quantify_options(cfg, 0.0))?)
    };
    Ok(ReportPair { shuffled, baseline })
}

fn write_reports(
    stamp: &Stamp,
    out: &Path,
    stem: &str,
    pair: &ReportPair,
    files: &mut BTreeMap<String, String>,
) -> CliResult<PathBuf> {
    let mut write = |name: String, r: &HeterogeneityReport<f64>| -> CliResult<PathBuf> {
        write_file(out, &format!("{name}.csv"), &stamp.csv(&r.to_csv()))?;
        let path = write_file(out, &format!("{name}.json"), &stamp.json(r)?)?;
        files.insert(name.clone(), format!("{name}.json"));
        Ok(path)
    };
    let path = write(stem.to_string(), &pair.shuffled)?;
    if let Some(b) = &pair.baseline {
        write(format!("{stem}_baseline"), b)?;
    }
    Ok(path)
}

fn tau_of(fl: &FLConfig, sizes: &[usize]) -> usize {
    let mean_n = sizes.iter().sum::<usize>().div_ceil(sizes.len().max(1));
    local_steps(&fl.local, mean_n).max(1)
}

/// Combines the unshuffled measurements with the effective shuffle fraction.
fn theory_record<O: Objective<f64>>(
    cfg: &ExperimentConfig,
    s: &Setup<O>,
    pair: &ReportPair,
    targets: &[TargetSummary],
) -> Option<TheoryRecord> {
    let base = pair.unshuffled();
    let fl = cfg.fl.to_config(cfg.seed);
    let (l_max, l_avg, l_avg_tilde, mu, mode) = match (&s.curvature, &base.smoothness) {
        (Some(c), _) => (c.l_max, c.l_avg, c.l_avg, c.l_avg, ConvexityMode::StronglyConvex),
        (None, Some(sm)) => {
            let tilde = pair.shuffled.smoothness.as_ref().map_or(sm.l_avg, |x| x.l_avg_tilde);
            (sm.l_max, sm.l_avg, tilde, 0.0, ConvexityMode::Nonconvex)
        }
        (None, None) => return None,
    };
    let params = ConvergenceParams {
        p: s.shuffle.effective_p,
        sigma2: base.sigma2_hat,
        sigma2_avg_tilde: base.sigma2_avg_hat,
        zeta2: base.zeta2_hat,
        delta2: pair.shuffled.delta2_hat.unwrap_or(0.0),
        l_max,
        l_avg_tilde,
        l: l_avg,
        mu,
        tau: tau_of(&fl, &s.baseline.client_sizes()),
        n_clients: s.baseline.num_clients(),
    };
    params.validate().ok()?;
    let predictions = targets
        .iter()
        .filter_map(|t| corollary1_t(&params, t.threshold, mode, SmoothnessChoice::Shuffled).ok())
        .collect();
    let closed_form_ratio = (s.shuffle.mode == "real" && l_max > 0.0)
        .then(|| speedup_ratio_closed_form(params.p, l_avg / l_max));
    Some(TheoryRecord {
        mode,
        params,
        bounds: lemma1_bounds(&params),
        measured_zeta2_p: pair.shuffled.zeta2_hat,
        measured_sigma2_p: pair.shuffled.sigma2_hat,
        predictions,
        predicted_ratio: predicted_speedup_ratio(&params, &params.at_p(0.0)).ok(),
        closed_form_ratio,
    })
}

/// Where `quantify` takes its evaluation points from.
#[derive(Clone, Debug, PartialEq)]
pub enum PointsSpec {
    /// Server models of a fresh unshuffled run with the configured settings.
    Trajectory,
    /// Gaussian points around the origin.
    Gaussian,
    /// A trajectory file written by `run`, or a bare JSON array of points.
    File(PathBuf),
}

impl std::str::FromStr for PointsSpec {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "trajectory" => PointsSpec::Trajectory,
            "gaussian" | "random" => PointsSpec::Gaussian,
            path => PointsSpec::File(path.into()),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantifySummary {
    pub points: usize,
    pub provenance: shufflefl::hetero::PointProvenance,
    pub effective_p: f64,
    pub zeta2_hat: f64,
    pub zeta2_hat_baseline: Option<f64>,
    /// `zeta2_hat / zeta2_hat_baseline`.
    pub zeta2_ratio: Option<f64>,
    /// `(1-p)^2`, the exact-mixture value of that ratio.
    pub zeta2_ratio_mixture: f64,
}

pub struct QuantifyResult {
    pub reports: ReportPair,
    pub summary: QuantifySummary,
    pub report_path: PathBuf,
}

pub fn cmd_quantify(cfg: &ExperimentConfig, points: &PointsSpec, out: &Path) -> CliResult<QuantifyResult> {
    cfg.validate()?;
    match build(cfg)? {
        Workload::Quadratic(s) => quantify_setup(cfg, &s, points, out),
        Workload::Softmax(s) => quantify_setup(cfg, &s, points, out),
    }
}

fn read_trajectory(path: &Path) -> CliResult<Vec<Vec<f64>>> {
    let text = read_file(path)?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))?;
    let points = value.get("points").cloned().unwrap_or(value);
    serde_json::from_value(points).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))
}

fn eval_points<O: Objective<f64>>(
    cfg: &ExperimentConfig,
    s: &Setup<O>,
    spec: &PointsSpec,
) -> CliResult<EvalPointSet<f64>> {
    let dim = s.objective.dim();
    let q = &cfg.quantify;
    let random = || EvalPointSet::gaussian(dim, q.max_points.max(2), 1.0, cfg.seed);
    let trajectory = match spec {
        PointsSpec::Gaussian => return Ok(random()?),
        PointsSpec::Trajectory => {
            let fl = cfg.fl.to_config(cfg.seed);
            let opts = RunOptions { x_star: s.x_star.clone(), record_trajectory: true, ..Default::default() };
            run_federated(&s.objective, &s.baseline, &fl, &initial_point(cfg, dim), &opts)?.trajectory
        }
        PointsSpec::File(path) => match read_trajectory(path) {
            Ok(t) if !t.is_empty() && t.iter().all(|p| p.len() == dim) => t,
            Ok(_) => {
                log::warn!("{}: no usable points, falling back to random points", path.display());
                return Ok(random()?);
            }
            Err(e) => {
                log::warn!("{e}; falling back to random points");
                return Ok(random()?);
            }
        },
    };
    Ok(EvalPointSet::from_trajectory(&thin(&trajectory, q.max_points), q.extra_random, cfg.seed)?)
}

fn quantify_setup<O: Objective<f64>>(
    cfg: &ExperimentConfig,
    s: &Setup<O>,
    spec: &PointsSpec,
    out: &Path,
) -> CliResult<QuantifyResult> {
    let stamp = stamp(cfg);
    let points = eval_points(cfg, s, spec)?;
    let reports = measure(cfg, s, &points)?;
    let mut files = BTreeMap::new();
    let report_path = write_reports(&stamp, out, &cfg.outputs.hetero, &reports, &mut files)?;
    let p = s.shuffle.effective_p;
    let base = reports.baseline.as_ref().map(|b| b.zeta2_hat);
    let summary = QuantifySummary {
        points: points.len(),
        provenance: points.provenance,
        effective_p: p,
        zeta2_hat: reports.shuffled.zeta2_hat,
        zeta2_hat_baseline: base,
        zeta2_ratio: base.filter(|b| *b > 0.0).map(|b| reports.shuffled.zeta2_hat / b),
        zeta2_ratio_mixture: (1.0 - p) * (1.0 - p),
    };
    write_file(out, "quantify.json", &stamp.json(&summary)?)?;
    Ok(QuantifyResult { reports, summary, report_path })
}

#[derive(Clone, Debug, Serialize)]
struct ManifestFile<'a> {
    shuffle: &'a ShuffleRecord,
    #[serde(flatten)]
    manifest: Manifest,
}

/// Writes the client manifest and a per-client size (and class) histogram.
pub fn cmd_partition(cfg: &ExperimentConfig, out: &Path) -> CliResult<PathBuf> {
    cfg.validate()?;
    let stamp = stamp(cfg);
    let (manifest, sizes, classes, record) = match build(cfg)? {
        Workload::Quadratic(s) => (s.federation.manifest(), s.federation.client_sizes(), None, s.shuffle),
        Workload::Softmax(s) => {
            (s.federation.manifest(), s.federation.client_sizes(), Some(class_histogram(&s.federation)), s.shuffle)
        }
    };
    let mut csv = String::from("client,size");
    if let Some(h) = &classes {
        for c in 0..h.first().map_or(0, Vec::len) {
            csv.push_str(&format!(",class_{c}"));
        }
    }
    csv.push('\n');
    for (i, n) in sizes.iter().enumerate() {
        csv.push_str(&format!("{i},{n}"));
        if let Some(h) = &classes {
            for c in &h[i] {
                csv.push_str(&format!(",{c}"));
            }
        }
        csv.push('\n');
    }
    write_file(out, "histogram.csv", &stamp.csv(&csv))?;
    if let Some(plan) = &record.plan {
        write_file(out, "shuffle_plan.json", &stamp.json(plan)?)?;
    }
    if let Some(audit) = &record.audit {
        write_file(out, "fedssyn_audit.json", &stamp.json(audit)?)?;
    }
    write_file(out, &cfg.outputs.manifest, &stamp.json(ManifestFile { shuffle: &record, manifest })?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_json;

    fn quadratic_cfg(rounds: usize, shuffle: &str) -> ExperimentConfig {
        parse_json(&format!(
            r#"{{
                "seed": 5,
                "problem": {{"quadratic": {{"n_clients": 4, "samples_per_client": 20, "dim": 3, "zeta2": 10.0, "sigma2": 1.0}}}},
                "shuffle": {shuffle},
                "fl": {{"rounds": {rounds}, "local": {{"steps": {{"tau": 2, "batch_size": 4}}}}, "eta": 0.01}},
                "target": {{"metric": "dist_server", "thresholds": [1e-3]}},
                "quantify": {{"max_points": 5, "extra_random": 2, "draws": 50}}
            }}"#
        ))
        .unwrap()
    }

    #[test]
    fn thin_keeps_ends() {
        let v: Vec<usize> = (0..11).collect();
        assert_eq!(thin(&v, 3), vec![0, 5, 10]);
        assert_eq!(thin(&v, 20), v);
        assert_eq!(thin(&v, 1), vec![10]);
    }

    #[test]
    fn plateau_averages_last_fifth() {
        let log = |round, d| RoundLog {
            round,
            train_loss: 0.0,
            test_loss: None,
            test_acc: None,
            dist_server: None,
            dist_clients_mean: Some(d),
            comm_bytes: 0,
            sampled: vec![],
        };
        let logs: Vec<RoundLog> = (1..=10).map(|r| log(r, r as f64)).collect();
        assert_eq!(plateau(&logs), Some(9.5));
        assert_eq!(plateau(&logs[..1]), Some(1.0));
        assert_eq!(plateau(&[]), None);
    }

    #[test]
    fn zero_rounds_gives_empty_log_and_report() {
        let dir = tempfile::tempdir().unwrap();
        let res = cmd_run(&quadratic_cfg(0, r#""none""#), dir.path()).unwrap();
        let csv = std::fs::read_to_string(&res.round_log).unwrap();
        assert_eq!(crate::output::strip_stamp(&csv).lines().count(), 1);
        assert!(res.hetero.unwrap().is_file());
        assert_eq!(res.summary.run.rounds_run, 0);
    }

    #[test]
    fn shuffled_run_reports_effective_p() {
        let dir = tempfile::tempdir().unwrap();
        let res = cmd_run(&quadratic_cfg(5, r#"{"real": {"p": 0.5}}"#), dir.path()).unwrap();
        assert_eq!(res.summary.shuffle.effective_p, 0.5);
        assert!(dir.path().join("hetero_baseline.json").is_file());
        let theory: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(res.theory.unwrap()).unwrap()).unwrap();
        let ratio = theory["closed_form_ratio"].as_f64().unwrap();
        let (l_max, l_avg): (f64, f64) = (16.0, 7.5);
        assert!((ratio - 0.5 * (0.5 + 0.5 * l_avg / l_max).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn quantify_falls_back_on_missing_trajectory() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = quadratic_cfg(3, r#"{"real": {"p": 0.25}}"#);
        let res = cmd_quantify(&cfg, &PointsSpec::File(dir.path().join("missing.json")), dir.path()).unwrap();
        assert_eq!(res.summary.provenance, shufflefl::hetero::PointProvenance::GaussianRandom);
        assert_eq!(res.summary.zeta2_ratio_mixture, 0.5625);
        assert!(res.summary.zeta2_ratio.is_some());
    }

    #[test]
    fn partition_histogram() {
        let dir = tempfile::tempdir().unwrap();
        cmd_partition(&quadratic_cfg(0, r#""none""#), dir.path()).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("histogram.csv")).unwrap();
        assert_eq!(crate::output::strip_stamp(&csv), "client,size\n0,20\n1,20\n2,20\n3,20\n");
    }
}
