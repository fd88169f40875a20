//! Closed-form effect of shuffling on convergence parameters, round-count
//! predictions, the empirical round predictor fit and communication cost.
//!
//! All hidden constants in the big-O rates are set to one: the predictions
//! are meant to be compared as ratios across shuffle fractions.

use num_traits::{Float, Num};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inputs of the post-shuffle bounds and the round-count formulas.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceParams<S> {
    /// Fraction of each client's data drawn from the shared pool.
    pub p: S,
    /// Worst-client stochastic noise.
    pub sigma2: S,
    /// Stochastic noise of the pooled (synthetic) distribution.
    pub sigma2_avg_tilde: S,
    /// Gradient dissimilarity.
    pub zeta2: S,
    /// Squared gradient gap between real and synthetic pooled distributions.
    pub delta2: S,
    pub l_max: S,
    pub l_avg_tilde: S,
    /// Global smoothness, used only when the unmodified rate is requested.
    pub l: S,
    /// Strong convexity modulus; only read in strongly convex mode.
    pub mu: S,
    pub tau: usize,
    pub n_clients: usize,
}

impl<S: Float> ConvergenceParams<S> {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            self.sigma2,
            self.sigma2_avg_tilde,
            self.zeta2,
            self.delta2,
            self.l_max,
            self.l_avg_tilde,
            self.l,
        ];
        if nonneg.iter().any(|v| !(*v >= S::zero())) {
            return Err(Error::Parameter("convergence parameters must be nonnegative".into()));
        }
        if !(self.p >= S::zero() && self.p <= S::one()) {
            return Err(Error::Parameter("p must lie in [0, 1]".into()));
        }
        if self.tau == 0 || self.n_clients == 0 {
            return Err(Error::Parameter("tau and n_clients must be at least 1".into()));
        }
        Ok(())
    }

    pub fn at_p(&self, p: S) -> Self {
        Self { p, ..*self }
    }
}

/// Post-shuffle noise, dissimilarity and smoothness.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShuffledBounds<S> {
    pub sigma2_p: S,
    pub zeta2_p: S,
    pub l_p: S,
}

/// Evaluates
/// `sigma2_p = (1-p) sigma2 + p sigma2_avg~ + p(1-p) zeta2 + p(1-p) delta2`,
/// `zeta2_p = (1-p)^2 zeta2` and `L_p = (1-p) L_max + p L_avg~`.
pub fn lemma1_bounds<S: Float>(params: &ConvergenceParams<S>) -> ShuffledBounds<S> {
    let p = params.p;
    let q = S::one() - p;
    ShuffledBounds {
        sigma2_p: q * params.sigma2 + p * params.sigma2_avg_tilde + p * q * params.zeta2 + p * q * params.delta2,
        zeta2_p: q * q * params.zeta2,
        l_p: q * params.l_max + p * params.l_avg_tilde,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvexityMode {
    StronglyConvex,
    Nonconvex,
}

/// Which smoothness constant multiplies the rate terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothnessChoice {
    /// Post-shuffle `L_p`; the variant that tracks observed round counts.
    #[default]
    Shuffled,
    /// The global constant `L` from the parameters.
    Global,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryPrediction<S> {
    pub epsilon: S,
    pub bounds: ShuffledBounds<S>,
    /// Iterations: the sum of the three terms below.
    pub iterations: S,
    pub rounds: S,
    pub noise_term: S,
    pub drift_term: S,
    pub deterministic_term: S,
}

/// Iteration count `T` with all constants set to one.
///
/// Strongly convex:
/// `sigma2_p/(mu N eps) + sqrt(L)(tau zeta_p + sqrt(tau) sigma_p)/(mu sqrt(eps)) + (L tau/mu) log(1/eps)`.
/// Non-convex:
/// `L sigma2_p/(N eps^2) + L(tau zeta_p + sqrt(tau) sigma_p)/eps^(3/2) + L tau/eps`.
pub fn corollary1_t<S: Float>(
    params: &ConvergenceParams<S>,
    epsilon: S,
    mode: ConvexityMode,
    smoothness: SmoothnessChoice,
) -> Result<TheoryPrediction<S>> {
    if !(epsilon > S::zero()) {
        return Err(Error::Parameter("epsilon must be positive".into()));
    }
    params.validate()?;
    let bounds = lemma1_bounds(params);
    let l = match smoothness {
        SmoothnessChoice::Shuffled => bounds.l_p,
        SmoothnessChoice::Global => params.l,
    };
    let tau = S::from(params.tau).unwrap();
    let n = S::from(params.n_clients).unwrap();
    let zeta_p = bounds.zeta2_p.sqrt();
    let sigma_p = bounds.sigma2_p.sqrt();
    let drift = tau * zeta_p + tau.sqrt() * sigma_p;
    let (noise_term, drift_term, deterministic_term) = match mode {
        ConvexityMode::StronglyConvex => {
            if !(params.mu > S::zero()) {
                return Err(Error::Parameter("strong convexity requires mu > 0".into()));
            }
            let mu = params.mu;
            (
                bounds.sigma2_p / (mu * n * epsilon),
                l.sqrt() * drift / (mu * epsilon.sqrt()),
                l * tau / mu * (S::one() / epsilon).ln(),
            )
        }
        ConvexityMode::Nonconvex => (
            l * bounds.sigma2_p / (n * epsilon * epsilon),
            l * drift / epsilon.powf(S::from(1.5).unwrap()),
            l * tau / epsilon,
        ),
    };
    let iterations = noise_term + drift_term + deterministic_term;
    Ok(TheoryPrediction {
        epsilon,
        bounds,
        iterations,
        rounds: iterations / tau,
        noise_term,
        drift_term,
        deterministic_term,
    })
}

/// Least-squares fit of `R = a / sqrt(eps) + b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundPredictorFit<S> {
    pub a: S,
    pub b: S,
    /// Root-mean-square residual in rounds.
    pub rms_residual: S,
}

pub fn fit_round_predictor<S: Float>(samples: &[(S, S)]) -> Result<RoundPredictorFit<S>> {
    if samples.iter().any(|(eps, _)| !(*eps > S::zero())) {
        return Err(Error::Parameter("epsilon values must be positive".into()));
    }
    let n = S::from(samples.len()).unwrap();
    let xs: Vec<S> = samples.iter().map(|(eps, _)| S::one() / eps.sqrt()).collect();
    let ys: Vec<S> = samples.iter().map(|&(_, r)| r).collect();
    if samples.len() < 2 {
        return Err(Error::Parameter("need at least two samples".into()));
    }
    let mean_x = xs.iter().fold(S::zero(), |a, &v| a + v) / n;
    let mean_y = ys.iter().fold(S::zero(), |a, &v| a + v) / n;
    let (mut sxx, mut sxy) = (S::zero(), S::zero());
    for (&x, &y) in xs.iter().zip(&ys) {
        sxx = sxx + (x - mean_x) * (x - mean_x);
        sxy = sxy + (x - mean_x) * (y - mean_y);
    }
    let spread = xs.iter().fold(S::zero(), |m, &x| m.max((x - mean_x).abs()));
    if !(spread > S::epsilon() * mean_x.abs().max(S::one())) {
        return Err(Error::Parameter("degenerate design: all epsilons equal".into()));
    }
    let a = sxy / sxx;
    let b = mean_y - a * mean_x;
    let sse = xs
        .iter()
        .zip(&ys)
        .fold(S::zero(), |acc, (&x, &y)| acc + (y - a * x - b) * (y - a * x - b));
    Ok(RoundPredictorFit { a, b, rms_residual: (sse / n).sqrt() })
}

/// Predicted `A_p / A_0`: `sqrt(L_p / L_0) * zeta_p / zeta_0`, both sides taken
/// from [`lemma1_bounds`] at the respective shuffle fractions.
pub fn predicted_speedup_ratio<S: Float>(at_p: &ConvergenceParams<S>, at_0: &ConvergenceParams<S>) -> Result<S> {
    let bp = lemma1_bounds(at_p);
    let b0 = lemma1_bounds(at_0);
    if !(b0.zeta2_p > S::zero()) {
        return Err(Error::Parameter("baseline dissimilarity is zero".into()));
    }
    if !(b0.l_p > S::zero()) {
        return Err(Error::Parameter("baseline smoothness is zero".into()));
    }
    Ok((bp.l_p / b0.l_p).sqrt() * (bp.zeta2_p / b0.zeta2_p).sqrt())
}

/// `(1-p) sqrt((1-p) + p L_avg/L_max)`, the closed form of
/// [`predicted_speedup_ratio`] when real data is shuffled (`L_avg~ = L_avg`).
pub fn speedup_ratio_closed_form<S: Float>(p: S, l_avg_over_l_max: S) -> S {
    let q = S::one() - p;
    q * (q + p * l_avg_over_l_max).sqrt()
}

/// `2 M_s + 2 R M_c`: a one-off synthetic upload and download plus a model
/// upload and download every round.
pub fn communication_cost<T: Num + Copy>(synthetic_size: T, model_size: T, rounds: T) -> T {
    let two = T::one() + T::one();
    two * synthetic_size + two * rounds * model_size
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params(p: f64) -> ConvergenceParams<f64> {
        ConvergenceParams {
            p,
            sigma2: 3.0,
            sigma2_avg_tilde: 1.5,
            zeta2: 8.0,
            delta2: 0.5,
            l_max: 9.0,
            l_avg_tilde: 14.0 / 3.0,
            l: 9.0,
            mu: 14.0 / 3.0,
            tau: 10,
            n_clients: 3,
        }
    }

    #[test]
    fn shuffled_bounds_endpoints() {
        let b0 = lemma1_bounds(&params(0.0));
        assert_eq!((b0.sigma2_p, b0.zeta2_p, b0.l_p), (3.0, 8.0, 9.0));
        let b1 = lemma1_bounds(&params(1.0));
        assert_eq!((b1.sigma2_p, b1.zeta2_p, b1.l_p), (1.5, 0.0, 14.0 / 3.0));
    }

    #[test]
    fn shuffled_bounds_half_shuffle() {
        let p = ConvergenceParams { sigma2: 0.0, sigma2_avg_tilde: 0.0, delta2: 0.0, ..params(0.5) };
        let b = lemma1_bounds(&p);
        assert_eq!(b.sigma2_p, 2.0);
        assert_eq!(b.zeta2_p, 2.0);
    }

    #[test]
    fn only_log_term_without_noise_or_drift() {
        let p = ConvergenceParams { sigma2: 0.0, sigma2_avg_tilde: 0.0, zeta2: 0.0, delta2: 0.0, ..params(0.3) };
        let eps = 1e-4;
        let t = corollary1_t(&p, eps, ConvexityMode::StronglyConvex, SmoothnessChoice::Shuffled).unwrap();
        let l_p = 0.7 * 9.0 + 0.3 * 14.0 / 3.0;
        let expected = l_p * 10.0 / p.mu * (1.0 / eps).ln();
        assert_eq!(t.noise_term, 0.0);
        assert_eq!(t.drift_term, 0.0);
        assert!((t.iterations - expected).abs() <= 1e-12 * expected);
        assert!((t.rounds - expected / 10.0).abs() <= 1e-12 * expected);
    }

    #[test]
    fn noise_dominated_iterations_double_when_eps_halves() {
        let p = ConvergenceParams { sigma2: 1e6, zeta2: 0.0, ..params(0.0) };
        let t1 = corollary1_t(&p, 1e-6, ConvexityMode::StronglyConvex, SmoothnessChoice::Shuffled).unwrap();
        let t2 = corollary1_t(&p, 5e-7, ConvexityMode::StronglyConvex, SmoothnessChoice::Shuffled).unwrap();
        assert!(t1.noise_term > 0.9 * t1.iterations);
        let ratio = t2.iterations / t1.iterations;
        assert!((ratio - 2.0).abs() < 0.05, "{ratio}");
    }

    #[test]
    fn drift_ratio_matches_closed_form() {
        let base = ConvergenceParams { sigma2: 0.0, sigma2_avg_tilde: 0.0, delta2: 0.0, ..params(0.0) };
        let eps = 1.1e-6;
        let d0 = corollary1_t(&base, eps, ConvexityMode::StronglyConvex, SmoothnessChoice::Shuffled).unwrap();
        let dh = corollary1_t(&base.at_p(0.5), eps, ConvexityMode::StronglyConvex, SmoothnessChoice::Shuffled).unwrap();
        // only tau * zeta_p survives in the drift term's zeta part; the sigma_p part is p(1-p) zeta2
        let zeta_part = |t: &TheoryPrediction<f64>, p: f64| {
            t.bounds.l_p.sqrt() * 10.0 * (1.0 - p) * 8f64.sqrt() / (base.mu * eps.sqrt())
        };
        let ratio = zeta_part(&dh, 0.5) / zeta_part(&d0, 0.0);
        let expected = (dh.bounds.l_p / d0.bounds.l_p).sqrt() * 0.5;
        assert!((ratio - expected).abs() < 1e-12);
    }

    #[test]
    fn global_smoothness_variant() {
        let p = params(0.5);
        let a = corollary1_t(&p, 1e-3, ConvexityMode::Nonconvex, SmoothnessChoice::Global).unwrap();
        let b = corollary1_t(&ConvergenceParams { l: 2.0 * p.l, ..p }, 1e-3, ConvexityMode::Nonconvex, SmoothnessChoice::Global)
            .unwrap();
        assert!((b.iterations / a.iterations - 2.0).abs() < 1e-12);
    }

    #[test]
    fn round_count_rejects_bad_epsilon() {
        assert!(corollary1_t(&params(0.1), 0.0, ConvexityMode::StronglyConvex, SmoothnessChoice::Shuffled).is_err());
        assert!(corollary1_t(&params(0.1), -1.0, ConvexityMode::Nonconvex, SmoothnessChoice::Shuffled).is_err());
    }

    #[test]
    fn predictor_fit_recovers_exact_model() {
        let samples: Vec<(f64, f64)> = [1e-2, 1e-4, 1e-6].iter().map(|&e| (e, 3.0 / e.sqrt() + 7.0)).collect();
        let fit = fit_round_predictor(&samples).unwrap();
        assert!((fit.a - 3.0).abs() <= 1e-9 * 3.0);
        assert!((fit.b - 7.0).abs() <= 1e-9 * 7.0);
        assert!(fit.rms_residual <= 1e-9 * 3000.0);
    }

    #[test]
    fn predictor_fit_edge_cases() {
        let two = fit_round_predictor(&[(1e-2, 40.0), (1e-4, 130.0)]).unwrap();
        assert!(two.rms_residual < 1e-12);
        let flat = fit_round_predictor(&[(1e-2, 5.0), (1e-3, 5.0), (1e-4, 5.0)]).unwrap();
        assert_eq!(flat.a, 0.0);
        assert_eq!(flat.b, 5.0);
        assert!(fit_round_predictor(&[(1e-3, 5.0), (1e-3, 6.0)]).is_err());
        assert!(fit_round_predictor(&[(1e-3, 5.0)]).is_err());
    }

    #[test]
    fn speedup_ratio_values() {
        let at0 = params(0.0);
        assert_eq!(predicted_speedup_ratio(&at0, &at0).unwrap(), 1.0);
        assert_eq!(predicted_speedup_ratio(&at0.at_p(1.0), &at0).unwrap(), 0.0);
        let r = predicted_speedup_ratio(&at0.at_p(0.5), &at0).unwrap();
        let closed = speedup_ratio_closed_form(0.5, 14.0 / 27.0);
        assert!((r - closed).abs() < 1e-14);
        assert!((closed - 0.435_677_420_593).abs() < 1e-12, "{closed}");
        let flat = ConvergenceParams { zeta2: 0.0, ..at0 };
        assert!(predicted_speedup_ratio(&flat, &flat).is_err());
    }

    #[test]
    fn communication_cost_values() {
        assert_eq!(communication_cost(0.0, 1.0, 10.0), 20.0);
        assert_eq!(communication_cost(15.5, 37.2, 0.0), 31.0);
        assert!((communication_cost(15.5, 37.2, 8.0) - 626.2).abs() < 1e-9);
        assert_eq!(communication_cost(0u64, 1, 10), 20);
    }

    proptest! {
        #[test]
        fn dissimilarity_decreases_and_noise_is_concave(
            zeta2 in 0.01f64..100.0, sigma2 in 0.0f64..100.0, s_avg in 0.0f64..100.0,
            delta2 in 0.0f64..10.0, p1 in 0.0f64..1.0, p2 in 0.0f64..1.0,
        ) {
            let base = ConvergenceParams { zeta2, sigma2, sigma2_avg_tilde: s_avg, delta2, ..params(0.0) };
            let (lo, hi) = if p1 < p2 { (p1, p2) } else { (p2, p1) };
            prop_assume!(hi - lo > 1e-9);
            let a = lemma1_bounds(&base.at_p(lo));
            let b = lemma1_bounds(&base.at_p(hi));
            prop_assert!(b.zeta2_p < a.zeta2_p);
            // concavity: the midpoint lies above the chord
            let m = lemma1_bounds(&base.at_p(0.5 * (lo + hi)));
            prop_assert!(m.sigma2_p >= 0.5 * (a.sigma2_p + b.sigma2_p) - 1e-9 * (1.0 + m.sigma2_p));
        }

        #[test]
        fn drift_term_shrinks_at_least_linearly(p in 0.0f64..1.0, zeta2 in 0.01f64..100.0, eps in 1e-8f64..1e-2) {
            let base = ConvergenceParams {
                sigma2: 0.0, sigma2_avg_tilde: 0.0, delta2: 0.0, zeta2, ..params(0.0)
            };
            let only_zeta = |p: f64| {
                let b = lemma1_bounds(&base.at_p(p));
                b.l_p.sqrt() * base.tau as f64 * b.zeta2_p.sqrt() / (base.mu * eps.sqrt())
            };
            prop_assert!(only_zeta(p) <= (1.0 - p) * only_zeta(0.0) * (1.0 + 1e-12));
        }

        #[test]
        fn communication_cost_is_linear_in_rounds(ms in 0u64..1000, mc in 0u64..1000, r in 0u64..1000) {
            let c = |r| communication_cost(ms, mc, r);
            prop_assert_eq!(c(r + 1) - c(r), 2 * mc);
        }
    }
}
