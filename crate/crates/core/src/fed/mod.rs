//! Federated round engine: client sampling, local updates, aggregation and
//! per-round logging.

mod local;

pub use local::{local_steps, local_update, local_update_fedavg, local_update_fedprox, local_update_scaffold};

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::FederatedDataset;
use crate::error::{Error, Result};
use crate::linalg;
use crate::objective::{evaluate, federated_loss, Objective};
use crate::rng::{rng_from, sample_indices, stream};
use crate::Scalar;

/// Losses above this count as divergence.
pub const DIVERGENCE_LOSS: f64 = 1e12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    FedAvg,
    FedProx,
    Scaffold,
}

/// How much work a client does per round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum LocalWork {
    /// `tau` steps; each step samples `batch_size` examples without
    /// replacement, or uses the whole client when `None`.
    Steps { tau: usize, batch_size: Option<usize> },
    /// `ceil(epochs * n_i / batch_size)` steps over a per-round permutation.
    Epochs { epochs: usize, batch_size: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FLConfig {
    pub algorithm: Algorithm,
    pub rounds: usize,
    pub local: LocalWork,
    pub eta: f64,
    /// Fraction of clients sampled each round.
    #[serde(default = "one")]
    pub participation: f64,
    #[serde(default)]
    pub prox_mu: f64,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

impl FLConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Parameter(m.into()));
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad("eta must be positive");
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return bad("participation must lie in (0, 1]");
        }
        if !(self.prox_mu >= 0.0 && self.prox_mu.is_finite()) {
            return bad("prox_mu must be nonnegative");
        }
        match self.local {
            LocalWork::Steps { tau: 0, .. } => bad("tau must be at least 1"),
            LocalWork::Steps { batch_size: Some(0), .. } => bad("batch_size must be at least 1"),
            LocalWork::Epochs { epochs: 0, .. } => bad("epochs must be at least 1"),
            LocalWork::Epochs { batch_size: 0, .. } => bad("batch_size must be at least 1"),
            _ => Ok(()),
        }
    }

    /// Bytes a client exchanges with the server each way per round.
    pub fn message_bytes<S: Scalar>(&self, dim: usize) -> u64 {
        let factor = if self.algorithm == Algorithm::Scaffold { 2 } else { 1 };
        (factor * dim * S::byte_width()) as u64
    }
}

/// `max(1, round(N C))` distinct client ids, ascending.
pub fn client_sample(n_clients: usize, participation: f64, round: usize, master_seed: u64) -> Vec<usize> {
    let k = ((n_clients as f64 * participation).round() as usize).clamp(1, n_clients);
    let mut rng = rng_from(master_seed, &[stream::CLIENT_SAMPLE, round as u64]);
    sample_indices(&mut rng, n_clients, k)
}

/// `x + (1/|S|) sum (y_i - x)`, accumulated in the given order.
pub fn aggregate<S: Scalar>(x: &[S], models: &[Vec<S>]) -> Result<Vec<S>> {
    if models.is_empty() {
        return Err(Error::Parameter("aggregation needs at least one client model".into()));
    }
    let mut delta = vec![S::zero(); x.len()];
    for y in models {
        if y.len() != x.len() {
            return Err(Error::Dimension { expected: x.len(), got: y.len() });
        }
        for ((d, &yj), &xj) in delta.iter_mut().zip(y).zip(x) {
            *d += yj - xj;
        }
    }
    let w = S::one() / S::of_usize(models.len());
    Ok(x.iter().zip(&delta).map(|(&xj, &d)| xj + w * d).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// `||x - x*||^2`; needs a known optimum.
    DistServer,
    TrainLoss,
    TestLoss,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub metric: Metric,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub train_loss: f64,
    pub test_loss: Option<f64>,
    pub test_acc: Option<f64>,
    pub dist_server: Option<f64>,
    /// Mean over sampled clients of `||y_i - x*||^2`.
    pub dist_clients_mean: Option<f64>,
    pub comm_bytes: u64,
    pub sampled: Vec<usize>,
}

impl RoundLog {
    fn metric(&self, m: Metric) -> Option<f64> {
        match m {
            Metric::DistServer => self.dist_server,
            Metric::TrainLoss => Some(self.train_loss),
            Metric::TestLoss => self.test_loss,
        }
    }
}

pub const ROUND_LOG_HEADER: &str = "round,train_loss,test_loss,test_acc,dist_server,dist_clients_mean,comm_bytes";

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn round_logs_csv(logs: &[RoundLog]) -> String {
    let mut out = String::from(ROUND_LOG_HEADER);
    out.push('\n');
    for l in logs {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            l.round,
            l.train_loss,
            opt(l.test_loss),
            opt(l.test_acc),
            opt(l.dist_server),
            opt(l.dist_clients_mean),
            l.comm_bytes
        );
    }
    out
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions<S> {
    pub x_star: Option<Vec<S>>,
    pub target: Option<Target>,
    /// End the run at the first round that meets `target`.
    pub stop_at_target: bool,
    /// Keep the server model of every round (including the start).
    pub record_trajectory: bool,
    /// One-off upload/download size per client, e.g. synthetic data.
    pub setup_bytes: u64,
    /// Give up on `target` once its metric has not improved by a relative
    /// [`STALL_TOLERANCE`] for this many rounds.
    pub stall_window: Option<usize>,
}

pub const STALL_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct RunOutcome<S> {
    pub logs: Vec<RoundLog>,
    pub x: Vec<S>,
    pub diverged: bool,
    pub stalled: bool,
    /// First round meeting the target; `Some(0)` if the start already does.
    pub rounds_to_target: Option<usize>,
    pub trajectory: Vec<Vec<S>>,
    /// SCAFFOLD client control variates at the end of the run.
    pub client_controls: Option<Vec<Vec<S>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub rounds_run: usize,
    pub diverged: bool,
    pub rounds_to_target: Option<usize>,
    pub final_train_loss: Option<f64>,
    pub final_test_loss: Option<f64>,
    pub final_test_acc: Option<f64>,
}

impl<S> RunOutcome<S> {
    pub fn summary(&self) -> RunSummary {
        let last = self.logs.last();
        RunSummary {
            rounds_run: self.logs.len(),
            diverged: self.diverged,
            rounds_to_target: self.rounds_to_target,
            final_train_loss: last.map(|l| l.train_loss),
            final_test_loss: last.and_then(|l| l.test_loss),
            final_test_acc: last.and_then(|l| l.test_acc),
        }
    }
}

fn meets(v: Option<f64>, target: &Target) -> bool {
    v.is_some_and(|v| v <= target.threshold)
}

/// Runs `cfg.rounds` rounds from `x0`. Client updates within a round run on
/// the current rayon pool; results do not depend on its size.
pub fn run_federated<S, O>(
    obj: &O,
    fed: &FederatedDataset<O::Example>,
    cfg: &FLConfig,
    x0: &[S],
    opts: &RunOptions<S>,
) -> Result<RunOutcome<S>>
where
    S: Scalar,
    O: Objective<S>,
{
    cfg.validate()?;
    let dim = obj.dim();
    if x0.len() != dim {
        return Err(Error::Dimension { expected: dim, got: x0.len() });
    }
    if let Some(xs) = &opts.x_star {
        if xs.len() != dim {
            return Err(Error::Dimension { expected: dim, got: xs.len() });
        }
    }
    if opts.target.is_some_and(|t| t.metric == Metric::DistServer) && opts.x_star.is_none() {
        return Err(Error::Parameter("distance target needs a known optimum".into()));
    }
    if opts.target.is_some_and(|t| t.metric == Metric::TestLoss) && fed.test_set.is_none() {
        return Err(Error::Parameter("test-loss target needs a test set".into()));
    }

    let n = fed.num_clients();
    let scaffold = cfg.algorithm == Algorithm::Scaffold;
    let mut c = vec![S::zero(); if scaffold { dim } else { 0 }];
    let mut controls = vec![vec![S::zero(); dim]; if scaffold { n } else { 0 }];
    let message = cfg.message_bytes::<S>(dim);

    let mut x = x0.to_vec();
    let mut out = RunOutcome {
        logs: Vec::with_capacity(cfg.rounds),
        x: Vec::new(),
        diverged: false,
        stalled: false,
        rounds_to_target: None,
        trajectory: Vec::new(),
        client_controls: None,
    };
    if opts.record_trajectory {
        out.trajectory.push(x.clone());
    }
    if let Some(t) = &opts.target {
        let start = match t.metric {
            Metric::DistServer => opts.x_star.as_ref().map(|xs| linalg::dist_sq(&x, xs).as_f64()),
            Metric::TrainLoss => Some(federated_loss(obj, &x, fed)?),
            Metric::TestLoss => Some(evaluate(obj, &x, fed.test_set.as_ref().into_iter().flatten())?.loss),
        };
        if meets(start, t) {
            out.rounds_to_target = Some(0);
        }
    }

    let mut best = f64::INFINITY;
    let mut improved_at = 0;
    for round in 1..=cfg.rounds {
        if out.rounds_to_target.is_some() && opts.stop_at_target {
            break;
        }
        let sampled = client_sample(n, cfg.participation, round, cfg.seed);
        let updates: Vec<(Vec<S>, Option<Vec<S>>)> = sampled
            .par_iter()
            .map(|&i| {
                let mut rng = rng_from(cfg.seed, &[stream::LOCAL_UPDATE, round as u64, i as u64]);
                let examples = &fed.clients[i].examples;
                if scaffold {
                    let (y, ci) = local_update_scaffold(obj, examples, &x, &c, &controls[i], cfg, &mut rng);
                    (y, Some(ci))
                } else {
                    (local_update(obj, examples, &x, cfg, &mut rng), None)
                }
            })
            .collect();
        let (models, new_controls): (Vec<Vec<S>>, Vec<Option<Vec<S>>>) = updates.into_iter().unzip();
        x = aggregate(&x, &models)?;
        if scaffold {
            let w = S::one() / S::of_usize(n);
            for (&i, ci) in sampled.iter().zip(new_controls) {
                let ci = ci.expect("scaffold update returns a control variate");
                for ((cj, &new), &old) in c.iter_mut().zip(&ci).zip(&controls[i]) {
                    *cj += w * (new - old);
                }
                controls[i] = ci;
            }
        }

        let train_loss = if linalg::all_finite(&x) { federated_loss(obj, &x, fed)? } else { f64::NAN };
        let test = match &fed.test_set {
            Some(t) if train_loss.is_finite() => Some(evaluate(obj, &x, t)?),
            _ => None,
        };
        let (dist_server, dist_clients_mean) = match &opts.x_star {
            Some(xs) => {
                let ds = linalg::dist_sq(&x, xs).as_f64();
                let dc = models.iter().map(|y| linalg::dist_sq(y, xs).as_f64()).sum::<f64>() / models.len() as f64;
                (Some(ds), Some(dc))
            }
            None => (None, None),
        };
        let log = RoundLog {
            round,
            train_loss,
            test_loss: test.map(|e| e.loss),
            test_acc: test.and_then(|e| e.accuracy),
            dist_server,
            dist_clients_mean,
            comm_bytes: 2 * opts.setup_bytes + 2 * round as u64 * message,
            sampled,
        };
        if opts.record_trajectory {
            out.trajectory.push(x.clone());
        }
        if let Some(t) = &opts.target {
            if out.rounds_to_target.is_none() && meets(log.metric(t.metric), t) {
                out.rounds_to_target = Some(round);
            }
            if let Some(v) = log.metric(t.metric) {
                if v < best * (1.0 - STALL_TOLERANCE) {
                    best = v;
                    improved_at = round;
                }
            }
        }
        out.logs.push(log);
        if let (Some(w), None) = (opts.stall_window, out.rounds_to_target) {
            if opts.target.is_some() && round - improved_at >= w {
                out.stalled = true;
                break;
            }
        }
        if !(train_loss.is_finite() && train_loss <= DIVERGENCE_LOSS) {
            log::warn!("run diverged at round {round}");
            out.diverged = true;
            break;
        }
    }
    out.x = x;
    if scaffold {
        out.client_controls = Some(controls);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    /// Best stepsize, `None` when censored.
    pub eta: Option<f64>,
    pub rounds: Option<usize>,
    /// Rounds to target per grid entry; `None` if not reached within `cfg.rounds`.
    pub per_eta: Vec<(f64, Option<usize>)>,
}

impl TuneResult {
    pub fn censored(&self) -> bool {
        self.eta.is_none()
    }
}

/// Picks the stepsize reaching `target` in the fewest rounds; ties go to the
/// smaller stepsize. Runs that stall for `stall_window` rounds count as not
/// reaching the target.
#[allow(clippy::too_many_arguments)]
pub fn tune_stepsize<S, O>(
    obj: &O,
    fed: &FederatedDataset<O::Example>,
    cfg: &FLConfig,
    eta_grid: &[f64],
    x0: &[S],
    x_star: Option<&[S]>,
    target: Target,
    stall_window: Option<usize>,
) -> Result<TuneResult>
where
    S: Scalar,
    O: Objective<S>,
{
    if eta_grid.is_empty() {
        return Err(Error::Parameter("empty stepsize grid".into()));
    }
    let opts = RunOptions {
        x_star: x_star.map(<[S]>::to_vec),
        target: Some(target),
        stop_at_target: true,
        stall_window,
        ..Default::default()
    };
    let mut grid = eta_grid.to_vec();
    grid.sort_by(f64::total_cmp);
    let mut per_eta = Vec::with_capacity(grid.len());
    for &eta in &grid {
        let run = run_federated(obj, fed, &FLConfig { eta, ..cfg.clone() }, x0, &opts)?;
        per_eta.push((eta, run.rounds_to_target));
    }
    let best = per_eta
        .iter()
        .filter_map(|&(eta, r)| r.map(|r| (r, eta)))
        .min_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    Ok(TuneResult { eta: best.map(|b| b.1), rounds: best.map(|b| b.0), per_eta })
}
