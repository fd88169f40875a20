//! Distributed least squares with per-client scaled identity design matrices.
//!
//! Client `i` (1-based) holds pairs `(A_ij, b_ij)` with `A_ij = i * I_d`,
//! `mu_i ~ N(0, zeta2 / (i d)^2 I_d)` and `b_ij ~ N(mu_i, sigma2 / (i d)^2 I_d)`.
//! Each pair carries its own scale so that pairs can be shuffled between clients.

use serde::{Deserialize, Serialize};

use crate::data::{ClientDataset, FederatedDataset, Provenance};
use crate::error::{Error, Result};
use crate::objective::Objective;
use crate::rng::{fill_gaussian, rng_from, stream};
use crate::Scalar;

/// One pair `(scale * I_d, target)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadSample<S> {
    pub scale: S,
    pub target: Vec<S>,
}

/// `F(x, (a, b)) = 1/2 ||a x - b||^2`
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeastSquares {
    pub dim: usize,
}

impl<S: Scalar> Objective<S> for LeastSquares {
    type Example = QuadSample<S>;

    fn dim(&self) -> usize {
        self.dim
    }

    fn example_loss(&self, x: &[S], ex: &QuadSample<S>) -> S {
        let r: S = x
            .iter()
            .zip(&ex.target)
            .map(|(&xi, &bi)| {
                let d = ex.scale * xi - bi;
                d * d
            })
            .sum();
        r * S::of(0.5)
    }

    fn add_example_gradient(&self, x: &[S], ex: &QuadSample<S>, weight: S, out: &mut [S]) {
        let a = ex.scale;
        for ((o, &xi), &bi) in out.iter_mut().zip(x).zip(&ex.target) {
            *o += weight * a * (a * xi - bi);
        }
    }
}

/// Generation parameters; together with the seed they fully determine an instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticSpec {
    pub n_clients: usize,
    pub samples_per_client: usize,
    pub dim: usize,
    pub zeta2: f64,
    pub sigma2: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticProblem<S> {
    pub spec: QuadraticSpec,
    pub objective: LeastSquares,
    pub data: FederatedDataset<QuadSample<S>>,
}

pub fn gen_quadratic<S: Scalar>(spec: &QuadraticSpec) -> Result<QuadraticProblem<S>> {
    let QuadraticSpec { n_clients, samples_per_client, dim, zeta2, sigma2, seed } = *spec;
    if n_clients == 0 || samples_per_client == 0 || dim == 0 {
        return Err(Error::Parameter("clients, samples per client and dimension must be positive".into()));
    }
    if !(zeta2 >= 0.0) || !(sigma2 >= 0.0) {
        return Err(Error::Parameter(format!("variances must be nonnegative (zeta2={zeta2}, sigma2={sigma2})")));
    }
    let mut rng = rng_from(seed, &[stream::GENERATE_PROBLEM]);
    let mut clients = Vec::with_capacity(n_clients);
    let mut mu = vec![S::zero(); dim];
    let mut noise = vec![S::zero(); dim];
    for id in 0..n_clients {
        let i = (id + 1) as f64;
        let denom = (i * dim as f64).powi(2);
        fill_gaussian(&mut rng, S::of(zeta2 / denom), &mut mu);
        let mut examples = Vec::with_capacity(samples_per_client);
        for _ in 0..samples_per_client {
            fill_gaussian(&mut rng, S::of(sigma2 / denom), &mut noise);
            let target = mu.iter().zip(&noise).map(|(&m, &e)| m + e).collect();
            examples.push(QuadSample { scale: S::of(i), target });
        }
        let base = id * samples_per_client;
        clients.push(ClientDataset {
            client_id: id,
            examples,
            provenance: (base..base + samples_per_client).map(Provenance::Real).collect(),
        });
    }
    Ok(QuadraticProblem {
        spec: spec.clone(),
        objective: LeastSquares { dim },
        data: FederatedDataset::new(clients, None, 0)?,
    })
}

/// Minimizer of `(1/N) sum_i (1/(2 n_i)) sum_j ||A_ij x - b_ij||^2`.
///
/// All design matrices are scaled identities, so the normal matrix is a
/// scalar multiple of `I_d`.
pub fn quadratic_optimum<S: Scalar>(data: &FederatedDataset<QuadSample<S>>) -> Result<Vec<S>> {
    let dim = data.clients[0].examples[0].target.len();
    let mut rhs = vec![S::zero(); dim];
    let mut curvature = S::zero();
    for c in &data.clients {
        let w = S::one() / S::of_usize(c.len());
        for ex in &c.examples {
            curvature += w * ex.scale * ex.scale;
            for (r, &b) in rhs.iter_mut().zip(&ex.target) {
                *r += w * ex.scale * b;
            }
        }
    }
    if !(curvature > S::zero()) {
        return Err(Error::Numerical("singular normal matrix".into()));
    }
    Ok(rhs.into_iter().map(|r| r / curvature).collect())
}

impl<S: Scalar> QuadraticProblem<S> {
    pub fn optimum(&self) -> Result<Vec<S>> {
        quadratic_optimum(&self.data)
    }
}
