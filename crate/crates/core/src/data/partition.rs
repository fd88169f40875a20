use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::data::{indices_by_class, ClientDataset, Dataset, FederatedDataset, Labeled, Provenance};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from, stream, SimRng};

/// Redraw budget when a Dirichlet draw leaves some client empty.
pub const MAX_PARTITION_ATTEMPTS: usize = 100;

fn build<E: Clone>(source: &Dataset<E>, assignment: Vec<Vec<usize>>) -> Result<FederatedDataset<E>> {
    let clients = assignment
        .into_iter()
        .enumerate()
        .map(|(id, mut idx)| {
            idx.sort_unstable();
            ClientDataset {
                client_id: id,
                examples: idx.iter().map(|&i| source.examples[i].clone()).collect(),
                provenance: idx.into_iter().map(Provenance::Real).collect(),
            }
        })
        .collect();
    FederatedDataset::new(clients, None, source.num_classes)
}

/// Symmetric Dirichlet(alpha) draw over `n` categories.
///
/// Uses `Gamma(a) = Gamma(a + 1) * U^(1/a)` in log space so that tiny
/// concentrations do not underflow every component to zero.
fn dirichlet_weights(rng: &mut SimRng, alpha: f64, n: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha + 1.0, 1.0).expect("positive shape");
    let logs: Vec<f64> = (0..n)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            g.ln() + u.ln() / alpha
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Splits every class across `n_clients` with proportions drawn from a
/// symmetric Dirichlet(alpha). Smaller `alpha` gives more skewed clients.
///
/// The whole draw is repeated with a fresh derived seed until every client
/// holds at least one example, up to [`MAX_PARTITION_ATTEMPTS`] times.
pub fn dirichlet_partition<E: Labeled + Clone>(
    dataset: &Dataset<E>,
    n_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<FederatedDataset<E>> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Parameter(format!("alpha must be positive, got {alpha}")));
    }
    if n_clients == 0 {
        return Err(Error::Parameter("n_clients must be at least 1".into()));
    }
    if dataset.is_empty() {
        return Err(Error::Parameter("cannot partition an empty dataset".into()));
    }
    if n_clients > dataset.len() {
        return Err(Error::Infeasible(format!(
            "{n_clients} clients but only {} examples",
            dataset.len()
        )));
    }
    let by_class = indices_by_class(&dataset.examples, dataset.num_classes);
    for attempt in 0..MAX_PARTITION_ATTEMPTS {
        let mut rng = rng_from(derive_seed(seed, &[attempt as u64]), &[stream::PARTITION]);
        let mut assignment = vec![Vec::new(); n_clients];
        for class_idx in &by_class {
            let mut idx = class_idx.clone();
            idx.shuffle(&mut rng);
            let weights = dirichlet_weights(&mut rng, alpha, n_clients);
            let n = idx.len();
            let mut start = 0;
            let mut cum = 0.0;
            for (client, w) in weights.iter().enumerate() {
                cum += w;
                let end = if client + 1 == n_clients { n } else { ((cum * n as f64) as usize).clamp(start, n) };
                assignment[client].extend_from_slice(&idx[start..end]);
                start = end;
            }
        }
        if assignment.iter().all(|a| !a.is_empty()) {
            return build(dataset, assignment);
        }
        log::debug!("dirichlet partition attempt {attempt} left a client empty; redrawing");
    }
    Err(Error::Infeasible(format!(
        "no Dirichlet draw with every client nonempty after {MAX_PARTITION_ATTEMPTS} attempts"
    )))
}

/// Client `c % n_clients` receives every example of class `c`.
/// `n_clients` must divide the number of classes.
pub fn split_by_class<E: Labeled + Clone>(dataset: &Dataset<E>, n_clients: usize) -> Result<FederatedDataset<E>> {
    let classes = dataset.num_classes;
    if n_clients == 0 || n_clients > classes || !classes.is_multiple_of(n_clients) {
        return Err(Error::Parameter(format!(
            "{n_clients} clients incompatible with {classes} classes"
        )));
    }
    let mut assignment = vec![Vec::new(); n_clients];
    for (i, ex) in dataset.examples.iter().enumerate() {
        assignment[ex.label() % n_clients].push(i);
    }
    build(dataset, assignment)
}

/// Uniformly random split into `n_clients` near-equal parts; earlier ids get
/// the remainder.
pub fn iid_partition<E: Clone>(dataset: &Dataset<E>, n_clients: usize, seed: u64) -> Result<FederatedDataset<E>> {
    if n_clients == 0 {
        return Err(Error::Parameter("n_clients must be at least 1".into()));
    }
    if n_clients > dataset.len() {
        return Err(Error::Infeasible(format!(
            "{n_clients} clients but only {} examples",
            dataset.len()
        )));
    }
    let mut rng = rng_from(seed, &[stream::PARTITION]);
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    idx.shuffle(&mut rng);
    let base = idx.len() / n_clients;
    let extra = idx.len() % n_clients;
    let mut assignment = Vec::with_capacity(n_clients);
    let mut start = 0;
    for c in 0..n_clients {
        let len = base + usize::from(c < extra);
        assignment.push(idx[start..start + len].to_vec());
        start += len;
    }
    build(dataset, assignment)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{class_histogram, LabeledExample};

    fn labeled(per_class: usize, classes: usize) -> Dataset<LabeledExample<f64>> {
        let examples = (0..per_class * classes)
            .map(|i| LabeledExample { features: vec![i as f64], label: i % classes })
            .collect();
        Dataset::new(examples, classes)
    }

    fn assert_conserves(src: &Dataset<LabeledExample<f64>>, fed: &FederatedDataset<LabeledExample<f64>>) {
        let ms = fed.manifest().multiset();
        assert_eq!(ms.len(), src.len());
        assert!(ms.values().all(|&c| c == 1));
        for c in &fed.clients {
            for (ex, p) in c.examples.iter().zip(&c.provenance) {
                let Provenance::Real(i) = p else { panic!() };
                assert_eq!(&src.examples[*i], ex);
            }
        }
    }

    #[test]
    fn single_client_gets_everything() {
        let ds = labeled(10, 3);
        for alpha in [0.01, 1.0, 100.0] {
            let fed = dirichlet_partition(&ds, 1, alpha, 5).unwrap();
            assert_eq!(fed.num_clients(), 1);
            assert_eq!(fed.clients[0].len(), 30);
        }
    }

    #[test]
    fn dirichlet_errors() {
        let ds = labeled(2, 2);
        assert!(matches!(dirichlet_partition(&ds, 2, 0.0, 1), Err(Error::Parameter(_))));
        assert!(matches!(dirichlet_partition(&ds, 2, -1.0, 1), Err(Error::Parameter(_))));
        assert!(matches!(dirichlet_partition(&ds, 5, 1.0, 1), Err(Error::Infeasible(_))));
    }

    #[test]
    fn dirichlet_conserves_and_is_deterministic() {
        let ds = labeled(30, 4);
        let a = dirichlet_partition(&ds, 5, 0.3, 11).unwrap();
        let b = dirichlet_partition(&ds, 5, 0.3, 11).unwrap();
        assert_conserves(&ds, &a);
        assert_eq!(a.manifest().to_json().unwrap(), b.manifest().to_json().unwrap());
        assert!(a.clients.iter().all(|c| !c.is_empty()));
    }

    #[test]
    fn huge_alpha_splits_evenly() {
        let ds = labeled(100, 2);
        let good = (0..100)
            .filter(|&seed| {
                let fed = dirichlet_partition(&ds, 2, 1e6, seed).unwrap();
                class_histogram(&fed).iter().flatten().all(|&c| (40..=60).contains(&c))
            })
            .count();
        assert!(good >= 95, "{good}/100 seeds within 50±10");
    }

    #[test]
    fn tiny_alpha_concentrates_clients() {
        let ds = labeled(100, 10);
        let fed = dirichlet_partition(&ds, 10, 0.01, 3).unwrap();
        let mut dominant: Vec<usize> = class_histogram(&fed)
            .iter()
            .map(|h| {
                let total: usize = h.iter().sum();
                let mut sorted = h.clone();
                sorted.sort_unstable_by(|a, b| b.cmp(a));
                let mut acc = 0;
                sorted
                    .iter()
                    .take_while(|&&c| {
                        let below = (acc as f64) < 0.9 * total as f64;
                        acc += c;
                        below
                    })
                    .count()
            })
            .collect();
        dominant.sort_unstable();
        assert!(dominant[dominant.len() / 2] <= 2, "{dominant:?}");
    }

    #[test]
    fn split_by_class_pure_clients() {
        let ds = labeled(7, 10);
        let fed = split_by_class(&ds, 10).unwrap();
        for (i, h) in class_histogram(&fed).iter().enumerate() {
            assert_eq!(h.iter().filter(|&&c| c > 0).count(), 1);
            assert_eq!(h[i], 7);
        }
        assert_conserves(&ds, &fed);

        let two = split_by_class(&labeled(4, 2), 2).unwrap();
        assert_eq!(class_histogram(&two), vec![vec![4, 0], vec![0, 4]]);
    }

    #[test]
    fn split_by_class_round_robin_and_errors() {
        let ds = labeled(3, 10);
        let fed = split_by_class(&ds, 5).unwrap();
        let h = class_histogram(&fed);
        assert_eq!(h[0][0], 3);
        assert_eq!(h[0][5], 3);
        assert!(matches!(split_by_class(&ds, 3), Err(Error::Parameter(_))));
        assert!(matches!(split_by_class(&ds, 20), Err(Error::Parameter(_))));
    }

    #[test]
    fn iid_partition_sizes() {
        let ds = labeled(11, 2);
        let fed = iid_partition(&ds, 4, 9).unwrap();
        assert_eq!(fed.client_sizes(), vec![6, 6, 5, 5]);
        assert_conserves(&ds, &fed);
    }
}
