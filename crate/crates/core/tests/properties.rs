use num_rational::Ratio;
use proptest::prelude::*;

use shufflefl::data::shuffle_real_fraction;
use shufflefl::fed::{run_federated, Algorithm, FLConfig, LocalWork, RunOptions};
use shufflefl::hetero::{estimate_zeta2, estimate_zeta2_exact_mixture, EvalPointSet};
use shufflefl::objective::{gen_quadratic, QuadraticSpec};
use shufflefl::rng::fraction_count;
use shufflefl::synth::apportion;
use shufflefl::theory::{communication_cost, fit_round_predictor, lemma1_bounds, ConvergenceParams};
use shufflefl::QuadraticProblemF64;

fn problem(n: usize, per: usize, seed: u64) -> QuadraticProblemF64 {
    gen_quadratic(&QuadraticSpec { n_clients: n, samples_per_client: per, dim: 4, zeta2: 200.0, sigma2: 5.0, seed }).unwrap()
}

fn params(p: f64, zeta2: f64, sigma2: f64, l_max: f64, l_avg: f64) -> ConvergenceParams<f64> {
    ConvergenceParams {
        p,
        sigma2,
        sigma2_avg_tilde: sigma2,
        zeta2,
        delta2: 0.0,
        l_max,
        l_avg_tilde: l_avg,
        l: l_avg,
        mu: 1.0,
        tau: 5,
        n_clients: 8,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn shuffling_conserves_sizes_and_multiset(n in 1usize..6, per in 1usize..40, p in 0.0f64..=1.0, seed in any::<u64>()) {
        let prob = problem(n, per, 1);
        let (shuffled, plan) = shuffle_real_fraction(&prob.data, p, seed).unwrap();
        prop_assert_eq!(shuffled.client_sizes(), prob.data.client_sizes());
        prop_assert_eq!(shuffled.manifest().multiset(), prob.data.manifest().multiset());
        for moved in &plan.moved_indices {
            prop_assert_eq!(moved.len(), fraction_count(p, per));
        }
        let again = shuffle_real_fraction(&prob.data, p, seed).unwrap().0;
        prop_assert_eq!(again.manifest(), shuffled.manifest());
    }

    #[test]
    fn mixture_dissimilarity_shrinks_quadratically(p in 0.0f64..=1.0, q in 0.0f64..=1.0, seed in 0u64..50) {
        let prob = problem(4, 10, seed);
        let points = EvalPointSet::gaussian(4, 3, 2.0, seed).unwrap();
        let base = estimate_zeta2(&prob.objective, &prob.data, &points).unwrap();
        let at = |p: f64| estimate_zeta2_exact_mixture(&prob.objective, &prob.data, None, p, &points).unwrap();
        let (zp, zq) = (at(p), at(q));
        for (v, b) in zp.trace.iter().zip(&base.trace) {
            prop_assert!((v - (1.0 - p).powi(2) * b).abs() <= 1e-9 * b.max(1.0));
        }
        if p <= q {
            prop_assert!(zq.value <= zp.value * (1.0 + 1e-12));
        }
    }

    #[test]
    fn shuffled_bounds_interpolate(p in 0.0f64..=1.0, zeta2 in 0.0f64..1e4, sigma2 in 0.0f64..1e3, l_avg in 0.1f64..50.0, extra in 0.0f64..50.0) {
        let l_max = l_avg + extra;
        let b = lemma1_bounds(&params(p, zeta2, sigma2, l_max, l_avg));
        prop_assert!(b.zeta2_p <= zeta2);
        prop_assert!(b.l_p >= l_avg - 1e-12 && b.l_p <= l_max + 1e-12);
        prop_assert!(b.sigma2_p >= sigma2 - 1e-9);
        let zero = lemma1_bounds(&params(0.0, zeta2, sigma2, l_max, l_avg));
        prop_assert_eq!((zero.zeta2_p, zero.sigma2_p, zero.l_p), (zeta2, sigma2, l_max));
    }

    #[test]
    fn apportion_is_exhaustive(total in 0usize..500, weights in prop::collection::vec(0.0f64..10.0, 1..12)) {
        let counts = apportion(total, &weights);
        prop_assert_eq!(counts.len(), weights.len());
        if weights.iter().any(|w| *w > 0.0) {
            prop_assert_eq!(counts.iter().sum::<usize>(), total);
        }
        for (c, w) in counts.iter().zip(&weights) {
            if *w == 0.0 {
                prop_assert_eq!(*c, 0);
            }
        }
    }

    #[test]
    fn fit_recovers_exact_predictor(a in 0.1f64..100.0, b in 0.0f64..100.0) {
        let samples: Vec<(f64, f64)> = [1e-1, 1e-2, 1e-3, 1e-4].iter().map(|&e: &f64| (e, a / e.sqrt() + b)).collect();
        let fit = fit_round_predictor(&samples).unwrap();
        prop_assert!((fit.a - a).abs() <= 1e-9 * a);
        prop_assert!((fit.b - b).abs() <= 1e-9 * a.max(b).max(1.0));
    }

    #[test]
    fn communication_cost_is_exact(ms in 0i64..10_000, mc in 0i64..10_000, den in 1i64..100, rounds in 0i64..10_000) {
        let (ms, mc) = (Ratio::new(ms, den), Ratio::new(mc, den));
        let r = Ratio::from_integer(rounds);
        let cost = communication_cost(ms, mc, r);
        prop_assert_eq!(cost, ms * 2 + mc * 2 * rounds);
        prop_assert_eq!(communication_cost(ms, mc, r + 1) - cost, mc * 2);
    }
}

#[test]
fn runs_are_reproducible_across_pool_sizes() {
    let prob = problem(5, 30, 7);
    let cfg = FLConfig {
        algorithm: Algorithm::Scaffold,
        rounds: 20,
        local: LocalWork::Steps { tau: 4, batch_size: Some(3) },
        eta: 0.002,
        participation: 0.6,
        prox_mu: 0.0,
        seed: 11,
    };
    let x0 = vec![1.0; 4];
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| run_federated(&prob.objective, &prob.data, &cfg, &x0, &RunOptions::default()).unwrap())
    };
    let (a, b) = (run(1), run(4));
    assert_eq!(a.x, b.x);
    assert_eq!(a.logs.len(), 20);
    assert_eq!(format!("{:?}", a.logs), format!("{:?}", b.logs));
}

#[test]
fn full_shuffle_homogenizes_exactly() {
    let prob = problem(4, 12, 3);
    let points = EvalPointSet::gaussian(4, 5, 1.0, 0).unwrap();
    let z = estimate_zeta2_exact_mixture(&prob.objective, &prob.data, None, 1.0, &points).unwrap();
    assert!(z.trace.iter().all(|v| *v == 0.0));
}
