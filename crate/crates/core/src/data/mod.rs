//! Datasets, MNIST ingestion, partitioning and real-data shuffling.

mod idx;
mod partition;
mod shuffle;

pub use idx::{load_idx, load_idx_files, load_idx_files_per_class, load_idx_per_class, read_idx_images, read_idx_labels, IMAGES_MAGIC, LABELS_MAGIC};
pub use partition::{dirichlet_partition, iid_partition, split_by_class, MAX_PARTITION_ATTEMPTS};
pub use shuffle::{shuffle_real_fraction, ShufflePlan};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_from, stream};

/// Anything carrying a class index.
pub trait Labeled {
    fn label(&self) -> usize;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample<S> {
    pub features: Vec<S>,
    pub label: usize,
}

impl<S> Labeled for LabeledExample<S> {
    fn label(&self) -> usize {
        self.label
    }
}

/// Where an example held by a client came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Index into the source dataset the federation was built from.
    Real(usize),
    /// The `index`-th synthetic example generated on client `origin`.
    Synthetic { origin: usize, index: usize },
}

impl Provenance {
    pub fn is_real(&self) -> bool {
        matches!(self, Provenance::Real(_))
    }
}

/// A flat, unpartitioned collection of examples.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<E> {
    pub examples: Vec<E>,
    pub num_classes: usize,
}

impl<E> Dataset<E> {
    pub fn new(examples: Vec<E>, num_classes: usize) -> Self {
        Self { examples, num_classes }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

impl<E: Labeled + Clone> Dataset<E> {
    /// Keeps `per_class` uniformly chosen examples of every class, in source order.
    pub fn subsample_per_class(&self, per_class: usize, seed: u64) -> Result<Self> {
        let labels: Vec<usize> = self.examples.iter().map(Labeled::label).collect();
        let keep = choose_per_class(&labels, self.num_classes, per_class, seed)?;
        Ok(Self::new(
            keep.into_iter().map(|i| self.examples[i].clone()).collect(),
            self.num_classes,
        ))
    }
}

/// Ascending indices of `per_class` uniformly chosen positions per class.
pub(crate) fn choose_per_class(labels: &[usize], num_classes: usize, per_class: usize, seed: u64) -> Result<Vec<usize>> {
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = rng_from(seed, &[stream::SUBSAMPLE]);
    let mut keep = Vec::with_capacity(per_class * num_classes);
    for (class, idx) in by_class.iter().enumerate() {
        if idx.len() < per_class {
            return Err(Error::Infeasible(format!(
                "class {class} has {} examples, {per_class} requested",
                idx.len()
            )));
        }
        let mut chosen = idx.clone();
        chosen.shuffle(&mut rng);
        chosen.truncate(per_class);
        keep.extend(chosen);
    }
    keep.sort_unstable();
    Ok(keep)
}

pub(crate) fn indices_by_class<E: Labeled>(examples: &[E], num_classes: usize) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, ex) in examples.iter().enumerate() {
        by_class[ex.label()].push(i);
    }
    by_class
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientDataset<E> {
    pub client_id: usize,
    pub examples: Vec<E>,
    /// Parallel to `examples`.
    pub provenance: Vec<Provenance>,
}

impl<E> ClientDataset<E> {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// N client datasets plus an optional server-held test set.
#[derive(Clone, Debug, PartialEq)]
pub struct FederatedDataset<E> {
    pub clients: Vec<ClientDataset<E>>,
    pub test_set: Option<Vec<E>>,
    pub num_classes: usize,
}

impl<E> FederatedDataset<E> {
    /// Validates client ids (`0..N`, in order) and non-emptiness.
    pub fn new(clients: Vec<ClientDataset<E>>, test_set: Option<Vec<E>>, num_classes: usize) -> Result<Self> {
        if clients.is_empty() {
            return Err(Error::Parameter("a federation needs at least one client".into()));
        }
        for (i, c) in clients.iter().enumerate() {
            if c.client_id != i {
                return Err(Error::Consistency(format!("client at position {i} has id {}", c.client_id)));
            }
            if c.is_empty() {
                return Err(Error::Consistency(format!("client {i} holds no examples")));
            }
            if c.examples.len() != c.provenance.len() {
                return Err(Error::Consistency(format!("client {i} provenance length mismatch")));
            }
        }
        Ok(Self { clients, test_set, num_classes })
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn client_sizes(&self) -> Vec<usize> {
        self.clients.iter().map(|c| c.len()).collect()
    }

    pub fn total_examples(&self) -> usize {
        self.clients.iter().map(|c| c.len()).sum()
    }

    /// All client examples in client-id order.
    pub fn union_refs(&self) -> Vec<&E> {
        self.clients.iter().flat_map(|c| c.examples.iter()).collect()
    }

    pub fn with_test_set(mut self, test_set: Option<Vec<E>>) -> Self {
        self.test_set = test_set;
        self
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            clients: self
                .clients
                .iter()
                .map(|c| ClientManifest { id: c.client_id, examples: c.provenance.clone() })
                .collect(),
        }
    }
}

impl<E: Clone> FederatedDataset<E> {
    pub fn union(&self) -> Vec<E> {
        self.clients.iter().flat_map(|c| c.examples.iter().cloned()).collect()
    }
}

/// Per-client class counts.
pub fn class_histogram<E: Labeled>(fed: &FederatedDataset<E>) -> Vec<Vec<usize>> {
    fed.clients
        .iter()
        .map(|c| {
            let mut h = vec![0; fed.num_classes];
            for ex in &c.examples {
                h[ex.label()] += 1;
            }
            h
        })
        .collect()
}

/// Reproducibility record mapping every client to the examples it holds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub clients: Vec<ClientManifest>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientManifest {
    pub id: usize,
    pub examples: Vec<Provenance>,
}

impl Manifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Multiset of provenance tags across all clients.
    pub fn multiset(&self) -> BTreeMap<Provenance, usize> {
        let mut m = BTreeMap::new();
        for c in &self.clients {
            for p in &c.examples {
                *m.entry(*p).or_insert(0) += 1;
            }
        }
        m
    }
}
