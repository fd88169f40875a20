//! Synthetic-data shuffling: every client fits a generator on a subsample of
//! its data, the server pools, permutes and redistributes the generated
//! examples, and each client trains on its real data plus its share.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClientDataset, FederatedDataset, LabeledExample, Provenance};
use crate::error::{Error, Result};
use crate::rng::{fraction_count, rng_from, sample_indices, standard_normal, stream, SimRng};
use crate::Scalar;

pub const DEFAULT_VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum GeneratorKind {
    /// Per-class mean and diagonal variance, clamped below by `variance_floor`.
    Gaussian {
        #[serde(default = "default_floor")]
        variance_floor: f64,
    },
    /// Bootstrap resampling of the training subsample.
    Empirical,
}

fn default_floor() -> f64 {
    DEFAULT_VARIANCE_FLOOR
}

impl GeneratorKind {
    pub fn tag(&self) -> &'static str {
        match self {
            GeneratorKind::Gaussian { .. } => "gaussian",
            GeneratorKind::Empirical => "empirical",
        }
    }
}

/// A class-conditional sampler fitted on one client's subsample.
pub trait Generator<S: Scalar>: Send + Sync {
    fn num_classes(&self) -> usize;

    /// Whether the training data contained `class`.
    fn can_sample(&self, class: usize) -> bool;

    /// `count` examples labeled `class`. Callers check [`Generator::can_sample`] first.
    fn sample(&self, class: usize, count: usize, rng: &mut SimRng) -> Vec<LabeledExample<S>>;
}

#[derive(Clone, Debug)]
pub struct GaussianClassGenerator<S> {
    /// `(mean, standard deviation)` per class; `None` for absent classes.
    classes: Vec<Option<(Vec<S>, Vec<S>)>>,
}

impl<S: Scalar> GaussianClassGenerator<S> {
    pub fn fit(training: &[&LabeledExample<S>], num_classes: usize, variance_floor: f64) -> Self {
        let floor = S::of(variance_floor.max(0.0));
        let classes = (0..num_classes)
            .map(|class| {
                let members: Vec<&[S]> =
                    training.iter().filter(|e| e.label == class).map(|e| e.features.as_slice()).collect();
                let first = *members.first()?;
                let n = S::of_usize(members.len());
                // offsets from the first member keep constant features exact
                let mut mean = vec![S::zero(); first.len()];
                for m in &members {
                    for ((acc, &v), &f) in mean.iter_mut().zip(*m).zip(first) {
                        *acc += v - f;
                    }
                }
                for (acc, &f) in mean.iter_mut().zip(first) {
                    *acc = f + *acc / n;
                }
                let mut var = vec![S::zero(); first.len()];
                for m in &members {
                    for ((acc, &v), &mu) in var.iter_mut().zip(*m).zip(&mean) {
                        *acc += (v - mu) * (v - mu);
                    }
                }
                let sd = var.into_iter().map(|v| (v / n).max(floor).sqrt()).collect();
                Some((mean, sd))
            })
            .collect();
        Self { classes }
    }
}

impl<S: Scalar> Generator<S> for GaussianClassGenerator<S> {
    fn num_classes(&self) -> usize {
        self.classes.len()
    }

    fn can_sample(&self, class: usize) -> bool {
        self.classes.get(class).is_some_and(Option::is_some)
    }

    fn sample(&self, class: usize, count: usize, rng: &mut SimRng) -> Vec<LabeledExample<S>> {
        let Some((mean, sd)) = self.classes.get(class).and_then(Option::as_ref) else {
            return Vec::new();
        };
        (0..count)
            .map(|_| LabeledExample {
                features: mean.iter().zip(sd).map(|(&m, &s)| m + s * standard_normal::<S, _>(rng)).collect(),
                label: class,
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct EmpiricalResampler<S> {
    by_class: Vec<Vec<LabeledExample<S>>>,
}

impl<S: Scalar> EmpiricalResampler<S> {
    pub fn fit(training: &[&LabeledExample<S>], num_classes: usize) -> Self {
        let mut by_class = vec![Vec::new(); num_classes];
        for e in training {
            by_class[e.label].push((*e).clone());
        }
        Self { by_class }
    }
}

impl<S: Scalar> Generator<S> for EmpiricalResampler<S> {
    fn num_classes(&self) -> usize {
        self.by_class.len()
    }

    fn can_sample(&self, class: usize) -> bool {
        self.by_class.get(class).is_some_and(|v| !v.is_empty())
    }

    fn sample(&self, class: usize, count: usize, rng: &mut SimRng) -> Vec<LabeledExample<S>> {
        match self.by_class.get(class) {
            Some(pool) if !pool.is_empty() => (0..count).map(|_| pool[rng.random_range(0..pool.len())].clone()).collect(),
            _ => Vec::new(),
        }
    }
}

/// A generator plus the record of what it was trained on.
pub struct FittedGenerator<S> {
    pub generator: Box<dyn Generator<S>>,
    /// Indices into the client's examples, ascending.
    pub subsample: Vec<usize>,
    pub class_counts: Vec<usize>,
    pub unsamplable: Vec<usize>,
}

/// Fits a generator on `round(rho * n_i)` uniformly chosen client examples.
pub fn fit_generator<S: Scalar>(
    examples: &[LabeledExample<S>],
    num_classes: usize,
    rho: f64,
    kind: GeneratorKind,
    rng: &mut SimRng,
) -> Result<FittedGenerator<S>> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::Parameter("rho must lie in (0, 1]".into()));
    }
    let k = fraction_count(rho, examples.len());
    if k == 0 {
        return Err(Error::Infeasible(format!("rho = {rho} leaves no training data out of {}", examples.len())));
    }
    let subsample = sample_indices(rng, examples.len(), k);
    let training: Vec<&LabeledExample<S>> = subsample.iter().map(|&i| &examples[i]).collect();
    let mut class_counts = vec![0; num_classes];
    for e in &training {
        class_counts[e.label] += 1;
    }
    let generator: Box<dyn Generator<S>> = match kind {
        GeneratorKind::Gaussian { variance_floor } => Box::new(GaussianClassGenerator::fit(&training, num_classes, variance_floor)),
        GeneratorKind::Empirical => Box::new(EmpiricalResampler::fit(&training, num_classes)),
    };
    let unsamplable = (0..num_classes).filter(|&c| !generator.can_sample(c)).collect();
    Ok(FittedGenerator { generator, subsample, class_counts, unsamplable })
}

/// Splits `total` into integer parts proportional to `weights` by largest
/// remainder; equal remainders favor the lower index.
pub fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().filter(|w| **w > 0.0).sum();
    if sum <= 0.0 || total == 0 {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|&w| if w > 0.0 { total as f64 * w / sum } else { 0.0 }).collect();
    let mut counts: Vec<usize> = exact.iter().map(|q| q.floor() as usize).collect();
    let left = total - counts.iter().sum::<usize>().min(total);
    let mut order: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] > 0.0).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(left) {
        counts[i] += 1;
    }
    counts
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset<S> {
    pub examples: Vec<LabeledExample<S>>,
    pub origin_client: usize,
    pub generator_kind: &'static str,
}

/// `n_tilde` examples whose class counts follow `class_counts`. Quota for
/// classes the generator cannot produce moves to the remaining classes.
pub fn generate<S: Scalar>(
    gen: &dyn Generator<S>,
    n_tilde: usize,
    class_counts: &[usize],
    origin_client: usize,
    generator_kind: &'static str,
    rng: &mut SimRng,
) -> Result<SyntheticDataset<S>> {
    let weights: Vec<f64> = class_counts.iter().map(|&c| c as f64).collect();
    let mut quota = apportion(n_tilde, &weights);
    if quota.iter().enumerate().any(|(c, &q)| q > 0 && !gen.can_sample(c)) {
        log::warn!("client {origin_client}: reapportioning synthetic quota away from unsamplable classes");
        let usable: Vec<f64> =
            weights.iter().enumerate().map(|(c, &w)| if gen.can_sample(c) { w } else { 0.0 }).collect();
        quota = apportion(n_tilde, &usable);
    }
    if quota.iter().sum::<usize>() != n_tilde {
        return Err(Error::Infeasible(format!("client {origin_client}: no class can be sampled")));
    }
    let mut examples = Vec::with_capacity(n_tilde);
    for (class, &q) in quota.iter().enumerate() {
        examples.extend(gen.sample(class, q, rng));
    }
    Ok(SyntheticDataset { examples, origin_client, generator_kind })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FedssynConfig {
    pub rho: f64,
    pub n_tilde: usize,
    pub generator: GeneratorKind,
    #[serde(default)]
    pub seed: u64,
    /// Per-client synthetic counts; overrides `n_tilde` when present.
    #[serde(default)]
    pub n_tilde_per_client: Option<Vec<usize>>,
}

impl FedssynConfig {
    pub fn validate(&self, n_clients: usize) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Parameter("rho must lie in (0, 1]".into()));
        }
        if let Some(v) = &self.n_tilde_per_client {
            if v.len() != n_clients {
                return Err(Error::Parameter(format!("{} synthetic counts for {n_clients} clients", v.len())));
            }
        }
        Ok(())
    }

    fn count_for(&self, client: usize) -> usize {
        self.n_tilde_per_client.as_ref().map_or(self.n_tilde, |v| v[client])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FedssynAudit {
    pub seed: u64,
    pub server_seed: u64,
    pub rho: f64,
    pub generator: String,
    /// Per client, indices of the examples its generator was fitted on.
    pub subsamples: Vec<Vec<usize>>,
    pub unsamplable: Vec<Vec<usize>>,
    /// `n_tilde_i / (n_i + n_tilde_i)`
    pub effective_p: Vec<f64>,
    pub real_locality: bool,
}

pub struct FedssynOutput<S> {
    pub augmented: FederatedDataset<LabeledExample<S>>,
    /// All generated examples in generation order.
    pub synthetic_pool: Vec<LabeledExample<S>>,
    pub audit: FedssynAudit,
}

/// Synthesize, pool, permute, split and append.
pub fn fedssyn_pipeline<S: Scalar>(
    fed: &FederatedDataset<LabeledExample<S>>,
    cfg: &FedssynConfig,
) -> Result<FedssynOutput<S>> {
    let n = fed.num_clients();
    cfg.validate(n)?;
    let kind = cfg.generator.tag();
    let per_client: Vec<(Vec<usize>, Vec<usize>, SyntheticDataset<S>)> = fed
        .clients
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let mut fit_rng = rng_from(cfg.seed, &[stream::SYNTH_FIT, i as u64]);
            let fitted = fit_generator(&c.examples, fed.num_classes, cfg.rho, cfg.generator, &mut fit_rng)?;
            let mut rng = rng_from(cfg.seed, &[stream::SYNTH_SAMPLE, i as u64]);
            let synth = generate(fitted.generator.as_ref(), cfg.count_for(i), &fitted.class_counts, i, kind, &mut rng)?;
            Ok((fitted.subsample, fitted.unsamplable, synth))
        })
        .collect::<Result<_>>()?;

    let mut pool: Vec<(Provenance, LabeledExample<S>)> = Vec::new();
    let mut subsamples = Vec::with_capacity(n);
    let mut unsamplable = Vec::with_capacity(n);
    for (sub, un, synth) in per_client {
        subsamples.push(sub);
        unsamplable.push(un);
        let origin = synth.origin_client;
        pool.extend(synth.examples.into_iter().enumerate().map(|(index, e)| (Provenance::Synthetic { origin, index }, e)));
    }
    let synthetic_pool: Vec<LabeledExample<S>> = pool.iter().map(|(_, e)| e.clone()).collect();

    let server_seed = crate::rng::derive_seed(cfg.seed, &[stream::SYNTH_SERVER]);
    let mut server_rng = rng_from(cfg.seed, &[stream::SYNTH_SERVER]);
    pool.shuffle(&mut server_rng);

    let mut remaining = pool.into_iter();
    let mut clients = Vec::with_capacity(n);
    let mut effective_p = Vec::with_capacity(n);
    for (i, c) in fed.clients.iter().enumerate() {
        let share = cfg.count_for(i);
        let mut examples = c.examples.clone();
        let mut provenance = c.provenance.clone();
        for (p, e) in remaining.by_ref().take(share) {
            provenance.push(p);
            examples.push(e);
        }
        effective_p.push(share as f64 / (c.len() + share) as f64);
        clients.push(ClientDataset { client_id: c.client_id, examples, provenance });
    }
    let augmented = FederatedDataset::new(clients, fed.test_set.clone(), fed.num_classes)?;
    let real_locality = real_data_is_local(fed, &augmented);
    Ok(FedssynOutput {
        augmented,
        synthetic_pool,
        audit: FedssynAudit {
            seed: cfg.seed,
            server_seed,
            rho: cfg.rho,
            generator: kind.to_string(),
            subsamples,
            unsamplable,
            effective_p,
            real_locality,
        },
    })
}

/// True when every augmented client's real examples are exactly the
/// original client's examples (as a multiset, matched by provenance).
pub fn real_data_is_local<S: Scalar>(
    original: &FederatedDataset<LabeledExample<S>>,
    augmented: &FederatedDataset<LabeledExample<S>>,
) -> bool {
    if original.num_clients() != augmented.num_clients() {
        return false;
    }
    original.clients.iter().zip(&augmented.clients).all(|(o, a)| {
        let mut before: Vec<(&Provenance, &LabeledExample<S>)> = o.provenance.iter().zip(&o.examples).collect();
        let mut after: Vec<(&Provenance, &LabeledExample<S>)> =
            a.provenance.iter().zip(&a.examples).filter(|(p, _)| p.is_real()).collect();
        before.sort_by_key(|(p, _)| **p);
        after.sort_by_key(|(p, _)| **p);
        before == after
    })
}
