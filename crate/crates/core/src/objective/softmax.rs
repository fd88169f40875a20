//! Multinomial logistic regression `y = softmax(x^T a)` with the loss averaged
//! over classes: `F(x, (a, c)) = -(1/C) log y_c`.
//!
//! Parameters are a `d_in x C` matrix stored column-major, so class `k`
//! owns the contiguous block `x[k * d_in .. (k + 1) * d_in]`.

use serde::{Deserialize, Serialize};

use crate::data::LabeledExample;
use crate::objective::Objective;
use crate::Scalar;

/// Injected gradient noise has per-coordinate variance `sigma_bar2 / 784`.
pub const NOISE_REFERENCE_DIM: usize = 784;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxRegression<S> {
    pub d_in: usize,
    pub num_classes: usize,
    /// Total injected noise level; zero disables it.
    pub sigma_bar2: S,
}

impl<S: Scalar> SoftmaxRegression<S> {
    pub fn new(d_in: usize, num_classes: usize) -> Self {
        Self { d_in, num_classes, sigma_bar2: S::zero() }
    }

    pub fn with_noise(mut self, sigma_bar2: S) -> Self {
        self.sigma_bar2 = sigma_bar2;
        self
    }

    fn logits(&self, x: &[S], a: &[S], out: &mut [S]) {
        out.iter_mut().for_each(|v| *v = S::zero());
        let d = self.d_in;
        // pixel features are mostly zero
        for (f, &af) in a.iter().enumerate() {
            if af != S::zero() {
                for (k, o) in out.iter_mut().enumerate() {
                    *o += af * x[k * d + f];
                }
            }
        }
    }

    /// Softmax probabilities, written over `logits` in place.
    fn probabilities(logits: &mut [S]) {
        let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
        let mut total = S::zero();
        for v in logits.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in logits.iter_mut() {
            *v /= total;
        }
    }

    fn log_prob(&self, x: &[S], ex: &LabeledExample<S>) -> S {
        let mut z = vec![S::zero(); self.num_classes];
        self.logits(x, &ex.features, &mut z);
        let max = z.iter().copied().fold(S::neg_infinity(), S::max);
        let lse = z.iter().map(|&v| (v - max).exp()).sum::<S>().ln() + max;
        z[ex.label] - lse
    }
}

impl<S: Scalar> Objective<S> for SoftmaxRegression<S> {
    type Example = LabeledExample<S>;

    fn dim(&self) -> usize {
        self.d_in * self.num_classes
    }

    fn example_loss(&self, x: &[S], ex: &LabeledExample<S>) -> S {
        -self.log_prob(x, ex) / S::of_usize(self.num_classes)
    }

    fn add_example_gradient(&self, x: &[S], ex: &LabeledExample<S>, weight: S, out: &mut [S]) {
        let mut coef = vec![S::zero(); self.num_classes];
        self.logits(x, &ex.features, &mut coef);
        Self::probabilities(&mut coef);
        coef[ex.label] -= S::one();
        let w = weight / S::of_usize(self.num_classes);
        coef.iter_mut().for_each(|c| *c *= w);
        let d = self.d_in;
        for (f, &af) in ex.features.iter().enumerate() {
            if af != S::zero() {
                for (k, &c) in coef.iter().enumerate() {
                    out[k * d + f] += c * af;
                }
            }
        }
    }

    fn classify(&self, x: &[S], ex: &LabeledExample<S>) -> Option<(usize, usize)> {
        let mut z = vec![S::zero(); self.num_classes];
        self.logits(x, &ex.features, &mut z);
        let mut best = 0;
        for k in 1..z.len() {
            if z[k] > z[best] {
                best = k;
            }
        }
        Some((best, ex.label))
    }

    fn injected_noise_variance(&self) -> S {
        self.sigma_bar2 / S::of_usize(NOISE_REFERENCE_DIM)
    }
}
