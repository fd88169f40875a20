//! Client-side update rules.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{Algorithm, FLConfig, LocalWork};
use crate::linalg;
use crate::objective::{add_injected_noise, mean_gradient_into, Objective};
use crate::rng::sample_indices;
use crate::Scalar;

/// Number of local steps a client with `n` examples takes per round.
pub fn local_steps(work: &LocalWork, n: usize) -> usize {
    match *work {
        LocalWork::Steps { tau, .. } => tau,
        LocalWork::Epochs { epochs, batch_size } => (epochs * n).div_ceil(batch_size.max(1)).max(1),
    }
}

/// Yields the minibatch indices of each local step.
enum Batcher {
    Full(Vec<usize>),
    Sampled { n: usize, k: usize },
    Sequential { order: Vec<usize>, k: usize, pos: usize },
}

impl Batcher {
    fn new<R: Rng + ?Sized>(work: &LocalWork, n: usize, rng: &mut R) -> Self {
        match *work {
            LocalWork::Steps { batch_size: Some(b), .. } if b < n => Batcher::Sampled { n, k: b.max(1) },
            LocalWork::Steps { .. } => Batcher::Full((0..n).collect()),
            LocalWork::Epochs { batch_size, .. } if batch_size >= n => Batcher::Full((0..n).collect()),
            LocalWork::Epochs { batch_size, .. } => {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(rng);
                Batcher::Sequential { order, k: batch_size.max(1), pos: 0 }
            }
        }
    }

    fn next<R: Rng + ?Sized>(&mut self, rng: &mut R, buf: &mut Vec<usize>) {
        buf.clear();
        match self {
            Batcher::Full(all) => buf.extend_from_slice(all),
            Batcher::Sampled { n, k } => buf.extend(sample_indices(rng, *n, *k)),
            Batcher::Sequential { order, k, pos } => {
                for _ in 0..*k {
                    buf.push(order[*pos]);
                    *pos = (*pos + 1) % order.len();
                }
            }
        }
    }
}

/// Runs the local steps from `x`. `correction` is added to every gradient
/// (SCAFFOLD's `c - c_i`); `prox_mu > 0` adds `prox_mu (y - x)`.
fn run_local<S, O, R>(obj: &O, examples: &[O::Example], x: &[S], cfg: &FLConfig, correction: Option<&[S]>, rng: &mut R) -> Vec<S>
where
    S: Scalar,
    O: Objective<S>,
    R: Rng + ?Sized,
{
    let eta = S::of(cfg.eta);
    let mu = S::of(cfg.prox_mu);
    let steps = local_steps(&cfg.local, examples.len());
    let mut batcher = Batcher::new(&cfg.local, examples.len(), rng);
    let mut y = x.to_vec();
    let mut g = vec![S::zero(); x.len()];
    let mut idx = Vec::new();
    for _ in 0..steps {
        batcher.next(rng, &mut idx);
        mean_gradient_into(obj, &y, idx.iter().map(|&i| &examples[i]), &mut g);
        add_injected_noise(obj, rng, &mut g);
        if let Some(c) = correction {
            linalg::axpy(S::one(), c, &mut g);
        }
        if mu > S::zero() {
            for ((gj, &yj), &xj) in g.iter_mut().zip(&y).zip(x) {
                *gj += mu * (yj - xj);
            }
        }
        linalg::axpy(-eta, &g, &mut y);
        if !linalg::all_finite(&y) {
            break;
        }
    }
    y
}

/// `tau` stochastic gradient steps from `x`.
pub fn local_update_fedavg<S, O, R>(obj: &O, examples: &[O::Example], x: &[S], cfg: &FLConfig, rng: &mut R) -> Vec<S>
where
    S: Scalar,
    O: Objective<S>,
    R: Rng + ?Sized,
{
    let plain = FLConfig { prox_mu: 0.0, ..cfg.clone() };
    run_local(obj, examples, x, &plain, None, rng)
}

/// Steps on `F_i(y) + (prox_mu / 2) ||y - x||^2`.
pub fn local_update_fedprox<S, O, R>(obj: &O, examples: &[O::Example], x: &[S], cfg: &FLConfig, rng: &mut R) -> Vec<S>
where
    S: Scalar,
    O: Objective<S>,
    R: Rng + ?Sized,
{
    run_local(obj, examples, x, cfg, None, rng)
}

/// Corrected steps `y -= eta (g - c_i + c)`; returns the model and the
/// refreshed client control variate `c_i - c + (x - y) / (steps eta)`.
pub fn local_update_scaffold<S, O, R>(
    obj: &O,
    examples: &[O::Example],
    x: &[S],
    c: &[S],
    c_i: &[S],
    cfg: &FLConfig,
    rng: &mut R,
) -> (Vec<S>, Vec<S>)
where
    S: Scalar,
    O: Objective<S>,
    R: Rng + ?Sized,
{
    let correction: Vec<S> = c.iter().zip(c_i).map(|(&a, &b)| a - b).collect();
    let plain = FLConfig { prox_mu: 0.0, ..cfg.clone() };
    let y = run_local(obj, examples, x, &plain, Some(&correction), rng);
    let denom = S::of_usize(local_steps(&cfg.local, examples.len())) * S::of(cfg.eta);
    let c_new = c_i
        .iter()
        .zip(c)
        .zip(x.iter().zip(&y))
        .map(|((&ci, &cc), (&xj, &yj))| ci - cc + (xj - yj) / denom)
        .collect();
    (y, c_new)
}

/// Dispatch on the configured algorithm. SCAFFOLD needs control variates
/// and goes through [`local_update_scaffold`].
pub fn local_update<S, O, R>(obj: &O, examples: &[O::Example], x: &[S], cfg: &FLConfig, rng: &mut R) -> Vec<S>
where
    S: Scalar,
    O: Objective<S>,
    R: Rng + ?Sized,
{
    match cfg.algorithm {
        Algorithm::FedProx => local_update_fedprox(obj, examples, x, cfg, rng),
        Algorithm::FedAvg | Algorithm::Scaffold => local_update_fedavg(obj, examples, x, cfg, rng),
    }
}
