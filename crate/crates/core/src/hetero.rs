//! Empirical estimates of gradient dissimilarity, stochastic noise,
//! distribution shift and smoothness.
//!
//! The constants in the usual local-SGD assumptions are uniform bounds over
//! all parameters. Here they are evaluated on an explicit [`EvalPointSet`]
//! and reported as the supremum over that set, which is a lower bound on the
//! true constant. Per-point values are kept as traces.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::FederatedDataset;
use crate::error::{Error, Result};
use crate::linalg;
use crate::objective::{add_injected_noise, mean_gradient_into, Objective, QuadSample};
use crate::rng::{fill_gaussian, rng_from, sample_indices, stream};
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointProvenance {
    Trajectory,
    GaussianRandom,
    UserSupplied,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPointSet<S> {
    pub points: Vec<Vec<S>>,
    pub provenance: PointProvenance,
}

impl<S: Scalar> EvalPointSet<S> {
    pub fn new(points: Vec<Vec<S>>, provenance: PointProvenance) -> Result<Self> {
        let Some(first) = points.first() else {
            return Err(Error::Parameter("evaluation point set is empty".into()));
        };
        let dim = first.len();
        if let Some(bad) = points.iter().find(|p| p.len() != dim) {
            return Err(Error::Dimension { expected: dim, got: bad.len() });
        }
        Ok(Self { points, provenance })
    }

    /// `count` standard Gaussian directions rescaled to norm `radius`.
    pub fn gaussian(dim: usize, count: usize, radius: S, seed: u64) -> Result<Self> {
        let mut rng = rng_from(seed, &[stream::HETERO, 0]);
        let points = (0..count)
            .map(|_| {
                let mut v = vec![S::zero(); dim];
                fill_gaussian(&mut rng, S::one(), &mut v);
                let n = linalg::norm_sq(&v).sqrt();
                if n > S::zero() {
                    linalg::scale(radius / n, &mut v);
                }
                v
            })
            .collect();
        Self::new(points, PointProvenance::GaussianRandom)
    }

    /// Every trajectory point plus `extra` Gaussian points scaled to the
    /// largest trajectory norm (unit norm if the trajectory sits at the origin).
    pub fn from_trajectory(trajectory: &[Vec<S>], extra: usize, seed: u64) -> Result<Self> {
        let Some(first) = trajectory.first() else {
            return Err(Error::Parameter("empty trajectory".into()));
        };
        let radius = trajectory
            .iter()
            .map(|p| linalg::norm_sq(p).sqrt())
            .fold(S::zero(), S::max);
        let radius = if radius > S::zero() { radius } else { S::one() };
        let mut points = trajectory.to_vec();
        if extra > 0 {
            points.extend(Self::gaussian(first.len(), extra, radius, seed)?.points);
        }
        Self::new(points, PointProvenance::Trajectory)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Supremum over points plus the per-point values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate<S> {
    pub value: S,
    pub trace: Vec<S>,
}

impl<S: Scalar> Estimate<S> {
    fn from_trace(trace: Vec<S>) -> Self {
        let value = trace.iter().copied().fold(S::zero(), S::max);
        Self { value, trace }
    }

    pub fn mean(&self) -> S {
        self.trace.iter().copied().sum::<S>() / S::of_usize(self.trace.len().max(1))
    }
}

fn gradient_of<'a, S: Scalar, O: Objective<S>>(obj: &O, x: &[S], examples: impl IntoIterator<Item = &'a O::Example>) -> Vec<S>
where
    O::Example: 'a,
{
    let mut g = vec![S::zero(); obj.dim()];
    mean_gradient_into(obj, x, examples, &mut g);
    g
}

fn check_points<S: Scalar, O: Objective<S>>(obj: &O, points: &EvalPointSet<S>) -> Result<()> {
    match points.points.iter().find(|p| p.len() != obj.dim()) {
        Some(p) => Err(Error::Dimension { expected: obj.dim(), got: p.len() }),
        None => Ok(()),
    }
}

/// Size-weighted mean of client gradients, i.e. the gradient over the union.
/// Written as an offset from the first client so identical clients give an
/// exactly identical global gradient.
fn union_gradient<S: Scalar>(client_grads: &[Vec<S>], sizes: &[usize]) -> Vec<S> {
    let total = S::of_usize(sizes.iter().sum());
    let mut g = client_grads[0].clone();
    for (gi, &n) in client_grads.iter().zip(sizes).skip(1) {
        let w = S::of_usize(n) / total;
        for ((o, &a), &b) in g.iter_mut().zip(gi).zip(&client_grads[0]) {
            *o += w * (a - b);
        }
    }
    g
}

fn mean_gap<S: Scalar>(client_grads: &[Vec<S>], global: &[S]) -> S {
    client_grads.iter().map(|g| linalg::dist_sq(g, global)).sum::<S>() / S::of_usize(client_grads.len())
}

/// `(1/N) sum_i ||grad f(x, D_i) - grad f(x, D)||^2`, with `D` the uniform
/// distribution over the union of client data.
pub fn estimate_zeta2<S: Scalar, O: Objective<S>>(
    obj: &O,
    fed: &FederatedDataset<O::Example>,
    points: &EvalPointSet<S>,
) -> Result<Estimate<S>> {
    check_points(obj, points)?;
    let trace = points
        .points
        .par_iter()
        .map(|x| {
            let clients: Vec<Vec<S>> = fed.clients.iter().map(|c| gradient_of(obj, x, &c.examples)).collect();
            let global = union_gradient(&clients, &fed.client_sizes());
            mean_gap(&clients, &global)
        })
        .collect();
    Ok(Estimate::from_trace(trace))
}

/// Dissimilarity of the distribution-level mixtures `(1-p) D_i + p D~`.
///
/// Gradients of a mixture are the same mixture of gradients, so no data is
/// moved. `reference` is `D~`; `None` uses the union of client data.
pub fn estimate_zeta2_exact_mixture<S: Scalar, O: Objective<S>>(
    obj: &O,
    fed: &FederatedDataset<O::Example>,
    reference: Option<&[O::Example]>,
    p: S,
    points: &EvalPointSet<S>,
) -> Result<Estimate<S>> {
    check_points(obj, points)?;
    if !(p >= S::zero() && p <= S::one()) {
        return Err(Error::Parameter("mixing fraction must lie in [0, 1]".into()));
    }
    let q = S::one() - p;
    let trace = points
        .points
        .par_iter()
        .map(|x| {
            let raw: Vec<Vec<S>> = fed.clients.iter().map(|c| gradient_of(obj, x, &c.examples)).collect();
            let global = union_gradient(&raw, &fed.client_sizes());
            let tilde = match reference {
                Some(r) => gradient_of(obj, x, r),
                None => global.clone(),
            };
            let mix = |g: &[S]| -> Vec<S> { g.iter().zip(&tilde).map(|(&a, &b)| q * a + p * b).collect() };
            let clients: Vec<Vec<S>> = raw.iter().map(|g| mix(g)).collect();
            mean_gap(&clients, &mix(&global))
        })
        .collect();
    Ok(Estimate::from_trace(trace))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseEstimate<S> {
    /// Worst client at each point.
    pub sigma2: Estimate<S>,
    /// Sampling from the pooled union.
    pub sigma2_avg: Estimate<S>,
}

/// Monte-Carlo variance of a minibatch gradient (including injected noise)
/// around the exact gradient of the set it is drawn from.
fn sampling_variance<S: Scalar, O: Objective<S>>(
    obj: &O,
    x: &[S],
    examples: &[&O::Example],
    batch_size: usize,
    draws: usize,
    seed: u64,
    tags: &[u64],
) -> S {
    let exact = gradient_of(obj, x, examples.iter().copied());
    let mut rng = rng_from(seed, tags);
    let k = batch_size.clamp(1, examples.len());
    let mut g = vec![S::zero(); obj.dim()];
    let mut total = S::zero();
    for _ in 0..draws {
        let idx = sample_indices(&mut rng, examples.len(), k);
        mean_gradient_into(obj, x, idx.iter().map(|&i| examples[i]), &mut g);
        add_injected_noise(obj, &mut rng, &mut g);
        total += linalg::dist_sq(&g, &exact);
    }
    total / S::of_usize(draws)
}

/// Batch sizes larger than a client are clamped to the whole client.
pub fn estimate_sigma2<S: Scalar, O: Objective<S>>(
    obj: &O,
    fed: &FederatedDataset<O::Example>,
    points: &EvalPointSet<S>,
    batch_size: usize,
    draws: usize,
    seed: u64,
) -> Result<NoiseEstimate<S>> {
    check_points(obj, points)?;
    if draws == 0 {
        return Err(Error::Parameter("draws must be at least 1".into()));
    }
    let union = fed.union_refs();
    let per_point: Vec<(S, S)> = points
        .points
        .par_iter()
        .enumerate()
        .map(|(pi, x)| {
            let worst = fed
                .clients
                .iter()
                .map(|c| {
                    let refs: Vec<&O::Example> = c.examples.iter().collect();
                    let tags = [stream::HETERO, 1, pi as u64, c.client_id as u64];
                    sampling_variance(obj, x, &refs, batch_size, draws, seed, &tags)
                })
                .fold(S::zero(), S::max);
            let pooled = sampling_variance(obj, x, &union, batch_size, draws, seed, &[stream::HETERO, 2, pi as u64]);
            (worst, pooled)
        })
        .collect();
    let (sigma, avg): (Vec<S>, Vec<S>) = per_point.into_iter().unzip();
    Ok(NoiseEstimate { sigma2: Estimate::from_trace(sigma), sigma2_avg: Estimate::from_trace(avg) })
}

/// `||grad f(x, D) - grad f(x, D~)||^2`.
pub fn estimate_delta2<S: Scalar, O: Objective<S>>(
    obj: &O,
    real_union: &[O::Example],
    synthetic_union: &[O::Example],
    points: &EvalPointSet<S>,
) -> Result<Estimate<S>> {
    check_points(obj, points)?;
    if real_union.is_empty() || synthetic_union.is_empty() {
        return Err(Error::Parameter("distribution shift needs two nonempty sets".into()));
    }
    let trace = points
        .points
        .par_iter()
        .map(|x| linalg::dist_sq(&gradient_of(obj, x, real_union), &gradient_of(obj, x, synthetic_union)))
        .collect();
    Ok(Estimate::from_trace(trace))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticSmoothness<S> {
    pub l_max: S,
    pub l_avg: S,
    /// `(1-p) L_max + p L_avg`
    pub l_p: S,
}

/// Per-client curvature `||(1/n_i) sum_j A_ij^T A_ij||`; exact for scaled identities.
pub fn quadratic_client_curvatures<S: Scalar>(data: &FederatedDataset<QuadSample<S>>) -> Vec<S> {
    data.clients
        .iter()
        .map(|c| c.examples.iter().map(|e| e.scale * e.scale).sum::<S>() / S::of_usize(c.len()))
        .collect()
}

pub fn smoothness_quadratic<S: Scalar>(data: &FederatedDataset<QuadSample<S>>, p_mix: S) -> QuadraticSmoothness<S> {
    let curv = quadratic_client_curvatures(data);
    let l_max = curv.iter().copied().fold(S::zero(), S::max);
    let l_avg = curv.iter().copied().sum::<S>() / S::of_usize(curv.len());
    QuadraticSmoothness { l_max, l_avg, l_p: (S::one() - p_mix) * l_max + p_mix * l_avg }
}

/// `max ||grad f(x) - grad f(y)|| / ||x - y||` over the pairs; coincident
/// pairs are skipped.
pub fn empirical_smoothness<S, O>(obj: &O, examples: &[&O::Example], pairs: &[(Vec<S>, Vec<S>)]) -> Result<S>
where
    S: Scalar,
    O: Objective<S>,
{
    if examples.is_empty() {
        return Err(Error::Parameter("smoothness over an empty scope".into()));
    }
    let mut best: Option<S> = None;
    for (x, y) in pairs {
        if x.len() != obj.dim() || y.len() != obj.dim() {
            return Err(Error::Dimension { expected: obj.dim(), got: x.len().max(y.len()) });
        }
        let step = linalg::dist_sq(x, y).sqrt();
        if step == S::zero() {
            continue;
        }
        let gx = gradient_of(obj, x, examples.iter().copied());
        let gy = gradient_of(obj, y, examples.iter().copied());
        let ratio = linalg::dist_sq(&gx, &gy).sqrt() / step;
        best = Some(best.map_or(ratio, |b| b.max(ratio)));
    }
    best.ok_or_else(|| Error::Parameter("every point pair is coincident".into()))
}

/// Smoothness constants from [`empirical_smoothness`] on consecutive point pairs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Smoothness<S> {
    pub l_max: S,
    pub l_avg: S,
    pub l_avg_tilde: S,
    pub l_p: S,
}

/// Per-point values, one CSV row each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointRow<S> {
    pub point: usize,
    pub zeta2: S,
    pub sigma2: S,
    pub sigma2_avg: S,
    pub delta2: Option<S>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeterogeneityReport<S> {
    pub provenance: PointProvenance,
    pub zeta2_hat: S,
    pub sigma2_hat: S,
    pub sigma2_avg_hat: S,
    pub delta2_hat: Option<S>,
    pub smoothness: Option<Smoothness<S>>,
    pub rows: Vec<PointRow<S>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantifyOptions {
    pub batch_size: usize,
    pub draws: usize,
    pub seed: u64,
    /// Shuffle fraction used to combine the smoothness constants into `L_p`.
    pub p: f64,
    pub smoothness: bool,
}

impl Default for QuantifyOptions {
    fn default() -> Self {
        Self { batch_size: 1, draws: 1000, seed: 0, p: 0.0, smoothness: true }
    }
}

/// Runs every estimator on one point set.
pub fn quantify<S: Scalar, O: Objective<S>>(
    obj: &O,
    fed: &FederatedDataset<O::Example>,
    synthetic: Option<&[O::Example]>,
    points: &EvalPointSet<S>,
    opts: &QuantifyOptions,
) -> Result<HeterogeneityReport<S>> {
    let zeta = estimate_zeta2(obj, fed, points)?;
    let noise = estimate_sigma2(obj, fed, points, opts.batch_size, opts.draws, opts.seed)?;
    let real: Vec<O::Example>;
    let delta = match synthetic {
        Some(s) => {
            real = fed.union();
            Some(estimate_delta2(obj, &real, s, points)?)
        }
        None => None,
    };
    let smoothness = if opts.smoothness && points.len() >= 2 {
        let pairs: Vec<(Vec<S>, Vec<S>)> =
            points.points.windows(2).map(|w| (w[0].clone(), w[1].clone())).collect();
        let per_client = fed
            .clients
            .iter()
            .map(|c| empirical_smoothness(obj, &c.examples.iter().collect::<Vec<_>>(), &pairs))
            .collect::<Result<Vec<S>>>();
        match per_client {
            Ok(per_client) => {
                let l_max = per_client.iter().copied().fold(S::zero(), S::max);
                let l_avg = empirical_smoothness(obj, &fed.union_refs(), &pairs)?;
                let l_avg_tilde = match synthetic {
                    Some(s) => empirical_smoothness(obj, &s.iter().collect::<Vec<_>>(), &pairs)?,
                    None => l_avg,
                };
                let p = S::of(opts.p);
                Some(Smoothness { l_max, l_avg, l_avg_tilde, l_p: (S::one() - p) * l_max + p * l_avg_tilde })
            }
            Err(Error::Parameter(_)) => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    let rows = (0..points.len())
        .map(|i| PointRow {
            point: i,
            zeta2: zeta.trace[i],
            sigma2: noise.sigma2.trace[i],
            sigma2_avg: noise.sigma2_avg.trace[i],
            delta2: delta.as_ref().map(|d| d.trace[i]),
        })
        .collect();
    Ok(HeterogeneityReport {
        provenance: points.provenance,
        zeta2_hat: zeta.value,
        sigma2_hat: noise.sigma2.value,
        sigma2_avg_hat: noise.sigma2_avg.value,
        delta2_hat: delta.map(|d| d.value),
        smoothness,
        rows,
    })
}

impl<S: Scalar> HeterogeneityReport<S> {
    pub const CSV_HEADER: &'static str = "point,zeta2,sigma2,sigma2_avg,delta2";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let delta = r.delta2.map(|d| d.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},{}", r.point, r.zeta2, r.sigma2, r.sigma2_avg, delta);
        }
        out
    }
}
