use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{ClientDataset, FederatedDataset, Provenance};
use crate::error::{Error, Result};
use crate::rng::{fraction_count, rng_from, sample_indices, stream};

/// Record of a real-data shuffle: which local indices each client gave up.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShufflePlan {
    pub p: f64,
    pub seed: u64,
    /// Per client, ascending indices into that client's pre-shuffle examples.
    pub moved_indices: Vec<Vec<usize>>,
}

impl ShufflePlan {
    pub fn pool_size(&self) -> usize {
        self.moved_indices.iter().map(Vec::len).sum()
    }
}

/// Moves a `p` fraction of every client's data into a shared pool, permutes
/// the pool and hands each client back as many pooled examples as it gave.
///
/// Client `i` contributes `round(p * n_i)` (ties to even) uniformly chosen
/// examples. The result lists the retained local examples first, in their
/// original order, followed by the received ones. Client sizes and the global
/// multiset are unchanged.
pub fn shuffle_real_fraction<E: Clone>(
    fed: &FederatedDataset<E>,
    p: f64,
    seed: u64,
) -> Result<(FederatedDataset<E>, ShufflePlan)> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Parameter(format!("shuffle fraction must lie in [0, 1], got {p}")));
    }
    let mut rng = rng_from(seed, &[stream::SHUFFLE]);
    let moved_indices: Vec<Vec<usize>> = fed
        .clients
        .iter()
        .map(|c| sample_indices(&mut rng, c.len(), fraction_count(p, c.len())))
        .collect();

    let mut pool: Vec<(E, Provenance)> = Vec::new();
    let mut kept: Vec<ClientDataset<E>> = Vec::with_capacity(fed.num_clients());
    for (client, moved) in fed.clients.iter().zip(&moved_indices) {
        let mut is_moved = vec![false; client.len()];
        for &i in moved {
            is_moved[i] = true;
            pool.push((client.examples[i].clone(), client.provenance[i]));
        }
        let (examples, provenance) = client
            .examples
            .iter()
            .zip(&client.provenance)
            .zip(&is_moved)
            .filter(|(_, &m)| !m)
            .map(|((e, p), _)| (e.clone(), *p))
            .unzip();
        kept.push(ClientDataset { client_id: client.client_id, examples, provenance });
    }

    pool.shuffle(&mut rng);
    let mut incoming = pool.into_iter();
    for (client, moved) in kept.iter_mut().zip(&moved_indices) {
        for (e, prov) in incoming.by_ref().take(moved.len()) {
            client.examples.push(e);
            client.provenance.push(prov);
        }
    }

    let out = FederatedDataset::new(kept, fed.test_set.clone(), fed.num_classes)?;
    Ok((out, ShufflePlan { p, seed, moved_indices }))
}
