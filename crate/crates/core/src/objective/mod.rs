//! Objectives behind one contract: per-example loss and gradient, from which
//! full, stochastic and federated quantities are assembled.

mod quadratic;
mod softmax;

pub use quadratic::{gen_quadratic, quadratic_optimum, LeastSquares, QuadSample, QuadraticProblem, QuadraticSpec};
pub use softmax::{SoftmaxRegression, NOISE_REFERENCE_DIM};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::FederatedDataset;
use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::standard_normal;
use crate::Scalar;

/// A loss `F(x, example)` that is differentiable in `x`.
pub trait Objective<S: Scalar>: Sync {
    type Example: Clone + Send + Sync;

    /// Length of the parameter vector.
    fn dim(&self) -> usize;

    fn example_loss(&self, x: &[S], example: &Self::Example) -> S;

    /// `out += weight * grad F(x, example)`
    fn add_example_gradient(&self, x: &[S], example: &Self::Example, weight: S, out: &mut [S]);

    /// `(predicted, true)` class for classification objectives.
    fn classify(&self, _x: &[S], _example: &Self::Example) -> Option<(usize, usize)> {
        None
    }

    /// Per-coordinate variance of Gaussian noise added to every stochastic gradient.
    fn injected_noise_variance(&self) -> S {
        S::zero()
    }
}

/// Which examples of a federation a full gradient is taken over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Client(usize),
    Union,
}

impl<E> FederatedDataset<E> {
    pub fn scope(&self, scope: Scope) -> Vec<&E> {
        match scope {
            Scope::Client(i) => self.clients[i].examples.iter().collect(),
            Scope::Union => self.union_refs(),
        }
    }
}

/// Indices of one minibatch drawn from a client.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub client: usize,
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn full(client: usize, n: usize) -> Self {
        Self { client, indices: (0..n).collect() }
    }

    pub fn size(&self) -> usize {
        self.indices.len()
    }
}

fn check_dim<S: Scalar, O: Objective<S>>(obj: &O, x: &[S]) -> Result<()> {
    if x.len() != obj.dim() {
        return Err(Error::Dimension { expected: obj.dim(), got: x.len() });
    }
    Ok(())
}

/// Writes the mean gradient over `examples` into `out`; returns the count.
pub fn mean_gradient_into<'a, S, O, I>(obj: &O, x: &[S], examples: I, out: &mut [S]) -> usize
where
    S: Scalar,
    O: Objective<S>,
    O::Example: 'a,
    I: IntoIterator<Item = &'a O::Example>,
{
    out.iter_mut().for_each(|v| *v = S::zero());
    let mut n = 0usize;
    for ex in examples {
        obj.add_example_gradient(x, ex, S::one(), out);
        n += 1;
    }
    if n > 0 {
        linalg::scale(S::one() / S::of_usize(n), out);
    }
    n
}

/// Exact mean gradient over a set of examples (no injected noise).
pub fn full_gradient<'a, S, O, I>(obj: &O, x: &[S], examples: I) -> Result<Vec<S>>
where
    S: Scalar,
    O: Objective<S>,
    O::Example: 'a,
    I: IntoIterator<Item = &'a O::Example>,
{
    check_dim(obj, x)?;
    let mut g = vec![S::zero(); obj.dim()];
    if mean_gradient_into(obj, x, examples, &mut g) == 0 {
        return Err(Error::Parameter("gradient over an empty scope".into()));
    }
    Ok(g)
}

/// Mean gradient over the batch plus the objective's injected noise.
pub fn stochastic_gradient<S, O, R>(obj: &O, x: &[S], examples: &[O::Example], batch: &Batch, rng: &mut R) -> Result<Vec<S>>
where
    S: Scalar,
    O: Objective<S>,
    R: Rng + ?Sized,
{
    check_dim(obj, x)?;
    if batch.indices.is_empty() {
        return Err(Error::Parameter("empty batch".into()));
    }
    if let Some(&bad) = batch.indices.iter().find(|&&i| i >= examples.len()) {
        return Err(Error::Parameter(format!("batch index {bad} out of range for {} examples", examples.len())));
    }
    let mut g = vec![S::zero(); obj.dim()];
    mean_gradient_into(obj, x, batch.indices.iter().map(|&i| &examples[i]), &mut g);
    add_injected_noise(obj, rng, &mut g);
    Ok(g)
}

pub fn add_injected_noise<S: Scalar, O: Objective<S>, R: Rng + ?Sized>(obj: &O, rng: &mut R, g: &mut [S]) {
    let var = obj.injected_noise_variance();
    if var > S::zero() {
        let sd = var.sqrt();
        for v in g.iter_mut() {
            *v += sd * standard_normal::<S, _>(rng);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    /// Only for classification objectives.
    pub accuracy: Option<f64>,
}

/// Mean loss and (for classifiers) argmax accuracy over `examples`.
pub fn evaluate<'a, S, O, I>(obj: &O, x: &[S], examples: I) -> Result<Evaluation>
where
    S: Scalar,
    O: Objective<S>,
    O::Example: 'a,
    I: IntoIterator<Item = &'a O::Example>,
{
    check_dim(obj, x)?;
    let mut loss = S::zero();
    let mut n = 0usize;
    let mut correct = 0usize;
    let mut classified = false;
    for ex in examples {
        loss += obj.example_loss(x, ex);
        if let Some((pred, truth)) = obj.classify(x, ex) {
            classified = true;
            correct += usize::from(pred == truth);
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Parameter("evaluation over an empty dataset".into()));
    }
    Ok(Evaluation {
        loss: loss.as_f64() / n as f64,
        accuracy: classified.then(|| correct as f64 / n as f64),
    })
}

/// `(1/N) sum_i f(x, D_i)`, the objective federated averaging minimizes.
pub fn federated_loss<S: Scalar, O: Objective<S>>(obj: &O, x: &[S], fed: &FederatedDataset<O::Example>) -> Result<f64> {
    let mut total = 0.0;
    for c in &fed.clients {
        total += evaluate(obj, x, &c.examples)?.loss;
    }
    Ok(total / fed.num_clients() as f64)
}
