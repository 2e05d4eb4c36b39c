//! Acceptance gate: one test per criterion, each printing a pass line
//! (run with `--nocapture` to see them). The heavier suites share one
//! simulation scenario through a `OnceLock`.

mod common;

use std::sync::OnceLock;

use ndarray::Array2;
use ppls::em::{fit_ppls, FitConfig, Orthogonalization};
use ppls::inference::{asymptotic_se, bootstrap_se};
use ppls::model::{assemble_sigma, canonicalize_theta};
use ppls::sim::{
    align_loadings, generate_data, make_true_model, random_model, run_scenario, Estimator,
    LatentDistribution, ScenarioConfig, ScenarioResult,
};
use ppls::Theta;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn shared_scenario() -> &'static ScenarioResult {
    static RESULT: OnceLock<ScenarioResult> = OnceLock::new();
    RESULT.get_or_init(|| {
        let config = ScenarioConfig {
            n: 500,
            p: 20,
            q: 20,
            r: 3,
            noise_level: 0.1,
            replicates: 200,
            base_seed: 42,
            estimators: vec![Estimator::Ppls, Estimator::Pls],
            ..ScenarioConfig::default()
        };
        run_scenario(&config).expect("shared scenario")
    })
}

fn ppls_stats(result: &ScenarioResult) -> &ppls::sim::EstimatorStats {
    result
        .estimators
        .iter()
        .find(|s| s.estimator == Estimator::Ppls)
        .unwrap()
}

#[test]
fn criterion_1_e_step_matches_gaussian_conditioning_oracle() {
    for seed in 0..50u64 {
        let theta = random_model(5, 5, 2, seed + 1);
        let data = common::sample_from_model(&theta, 20, 1000 + seed);
        let moments = ppls::em::e_step(&data, &theta).unwrap();
        let oracle = common::oracle_e_step(&data, &theta);
        let tol = 1e-8;
        assert!(common::rel_diff(&moments.mu_t, &oracle.mu_t) < tol, "mu_t, seed {seed}");
        assert!(common::rel_diff(&moments.mu_u, &oracle.mu_u) < tol, "mu_u, seed {seed}");
        assert!(common::rel_diff(&moments.ctt, &oracle.ctt) < tol, "ctt, seed {seed}");
        assert!(common::rel_diff(&moments.cuu, &oracle.cuu) < tol, "cuu, seed {seed}");
        assert!(common::rel_diff(&moments.cut, &oracle.cut) < tol, "cut, seed {seed}");
        for (got, want, name) in [
            (moments.exp_ee, oracle.exp_ee, "expEE"),
            (moments.exp_ff, oracle.exp_ff, "expFF"),
            (moments.exp_hh, oracle.exp_hh, "expHH"),
        ] {
            assert!(
                (got - want).abs() <= tol * want.abs().max(1e-12),
                "{name}: {got} vs {want}, seed {seed}"
            );
        }
    }
    println!("criterion 1 (E-step equals the Gaussian-conditioning oracle): pass");
}

#[test]
fn criterion_2_em_trace_never_decreases() {
    let noise_levels = [0.1, 0.3, 0.5, 0.7];
    for i in 0..100u64 {
        let config = ScenarioConfig {
            n: 50,
            p: 20,
            q: 20,
            r: 3,
            noise_level: noise_levels[(i % 4) as usize],
            ..ScenarioConfig::default()
        };
        let model = make_true_model(&config);
        let data = generate_data(&model, 50, i).0;
        let fit = fit_ppls(&data, 3, &FitConfig::default()).unwrap();
        for pair in fit.loglik_trace.windows(2) {
            assert!(
                pair[1] >= pair[0] - 1e-8 * pair[0].abs(),
                "instance {i}: {} -> {}",
                pair[0],
                pair[1]
            );
        }
    }
    println!("criterion 2 (EM log-likelihood trace is nondecreasing): pass");
}

#[test]
fn criterion_3_orthogonalization_variants_reach_the_same_optimum() {
    for i in 0..20u64 {
        let config = ScenarioConfig {
            n: 100,
            p: 20,
            q: 20,
            r: 3,
            noise_level: if i % 2 == 0 { 0.1 } else { 0.3 },
            ..ScenarioConfig::default()
        };
        let model = make_true_model(&config);
        let data = generate_data(&model, 100, 500 + i).0;
        let chol = fit_ppls(
            &data,
            3,
            &FitConfig {
                orthogonalization: Orthogonalization::CholeskyLower,
                ..FitConfig::default()
            },
        )
        .unwrap();
        let eig = fit_ppls(
            &data,
            3,
            &FitConfig {
                orthogonalization: Orthogonalization::Eigenvectors,
                ..FitConfig::default()
            },
        )
        .unwrap();
        let ll_a = *chol.loglik_trace.last().unwrap();
        let ll_b = *eig.loglik_trace.last().unwrap();
        assert!((ll_a - ll_b).abs() < 1e-4, "instance {i}: {ll_a} vs {ll_b}");
        let dist = theta_distance(&chol.theta, &eig.theta);
        assert!(dist < 1e-2, "instance {i}: parameter distance {dist}");
    }
    println!("criterion 3 (orthogonalization variants agree at the optimum): pass");
}

fn theta_distance(a: &Theta, b: &Theta) -> f64 {
    let max = |d: f64, x: &f64, y: &f64| d.max((x - y).abs());
    let mut dist = a.w.iter().zip(b.w.iter()).fold(0.0, |d, (x, y)| max(d, x, y));
    dist = a.c.iter().zip(b.c.iter()).fold(dist, |d, (x, y)| max(d, x, y));
    dist = a.b.iter().zip(b.b.iter()).fold(dist, |d, (x, y)| max(d, x, y));
    dist = a
        .sigma_t2
        .iter()
        .zip(b.sigma_t2.iter())
        .fold(dist, |d, (x, y)| max(d, x, y));
    dist.max((a.sigma_e2 - b.sigma_e2).abs())
        .max((a.sigma_f2 - b.sigma_f2).abs())
        .max((a.sigma_h2 - b.sigma_h2).abs())
}

#[test]
fn criterion_4_component_ordering_proportions() {
    // (a) large sample, low noise: ordering essentially always recovered.
    let prop_a = ppls_stats(shared_scenario()).ordering_correct_proportion;
    assert!(prop_a >= 0.98, "large-sample proportion {prop_a}");
    // (b) small sample, high noise: mid-range recovery rate.
    let config = ScenarioConfig {
        n: 50,
        p: 20,
        q: 20,
        r: 3,
        noise_level: 0.5,
        replicates: 500,
        base_seed: 43,
        ..ScenarioConfig::default()
    };
    let result = run_scenario(&config).unwrap();
    let prop_b = ppls_stats(&result).ordering_correct_proportion;
    assert!(
        (prop_b - 0.435).abs() <= 0.08,
        "small-sample proportion {prop_b} not within 0.435 +/- 0.08"
    );
    println!(
        "criterion 4 (ordering proportions {prop_a:.3} >= 0.98 and {prop_b:.3} in 0.435 +/- 0.08): pass"
    );
}

#[test]
fn criterion_5_sign_and_permutation_equivalents_are_identified() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..100 {
        let theta = random_model(6, 7, 3, 200 + i);
        let r = theta.r();
        let mut perm: Vec<usize> = (0..r).collect();
        perm.shuffle(&mut rng);
        let signs: Vec<f64> = (0..r)
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        let mut other = theta.clone();
        for (dst, &src) in perm.iter().enumerate() {
            let s = signs[dst];
            other.w.column_mut(dst).assign(&(&theta.w.column(src) * s));
            other.c.column_mut(dst).assign(&(&theta.c.column(src) * s));
            other.b[dst] = theta.b[src];
            other.sigma_t2[dst] = theta.sigma_t2[src];
        }
        let sigma_a = assemble_sigma(&theta).joint();
        let sigma_b = assemble_sigma(&other).joint();
        assert_eq!(sigma_a, sigma_b, "instance {i}: covariance not bit-identical");
        let (canon_a, _, _) = canonicalize_theta(&theta).unwrap();
        let (canon_b, _, _) = canonicalize_theta(&other).unwrap();
        assert!(
            theta_distance(&canon_a, &canon_b) < 1e-8,
            "instance {i}: canonical forms differ"
        );
    }
    println!("criterion 5 (sign/permutation equivalents share Sigma and canonical form): pass");
}

#[test]
fn criterion_6_noise_scales_recovered_at_large_sample() {
    let stats = ppls_stats(shared_scenario());
    let params = stats.variance_params.as_ref().unwrap();
    assert!(
        params.rel_bias_sigma_e.abs() <= 0.05,
        "sigma_e relative bias {}",
        params.rel_bias_sigma_e
    );
    assert!(
        params.rel_bias_sigma_f.abs() <= 0.05,
        "sigma_f relative bias {}",
        params.rel_bias_sigma_f
    );
    println!(
        "criterion 6 (noise SD relative bias {:.4}/{:.4} within 5%): pass",
        params.rel_bias_sigma_e, params.rel_bias_sigma_f
    );
}

#[test]
fn criterion_7_se_estimates_track_the_sampling_sd() {
    let config = ScenarioConfig {
        n: 5000,
        p: 20,
        q: 20,
        r: 3,
        noise_level: 0.1,
        ..ScenarioConfig::default()
    };
    let truth = make_true_model(&config);
    let (p, r) = (config.p, config.r);

    // Sampling SD of the aligned loading entries over independent datasets.
    let datasets = 500;
    let mut sum = Array2::<f64>::zeros((p, r));
    let mut sumsq = Array2::<f64>::zeros((p, r));
    for rep in 1..=datasets {
        let data = generate_data(&truth, config.n, rep).0;
        let fit = fit_ppls(&data, r, &FitConfig::default()).unwrap();
        let aligned = align_loadings(
            &fit.theta.w,
            &fit.theta.c,
            &fit.theta.b,
            &fit.theta.sigma_t2,
            &truth.theta.w,
            &truth.theta.c,
        );
        sum += &aligned.w;
        sumsq += &aligned.w.mapv(|v| v * v);
    }
    let m = datasets as f64;
    let sd = ((&sumsq - &(&sum * &sum / m)) / (m - 1.0)).mapv(|v: f64| v.max(0.0).sqrt());

    // One further dataset supplies both SE estimates.
    let data = generate_data(&truth, config.n, 9000).0;
    let fit = fit_ppls(&data, r, &FitConfig::default()).unwrap();
    let base_alignment = align_loadings(
        &fit.theta.w,
        &fit.theta.c,
        &fit.theta.b,
        &fit.theta.sigma_t2,
        &truth.theta.w,
        &truth.theta.c,
    );
    let asym = asymptotic_se(&data, &fit).unwrap();
    assert!(asym.degenerate_w.iter().all(|&d| !d), "asymptotic SEs degenerate");
    let boot = bootstrap_se(&data, r, &FitConfig::default(), 500, 12345).unwrap();

    let mut checked = 0usize;
    for k in 0..r {
        let col = base_alignment.permutation[k];
        for j in 0..p {
            if truth.theta.w[[j, k]].abs() <= 0.1 {
                continue;
            }
            checked += 1;
            for (se, label) in [(asym.se_w[[j, col]], "asymptotic"), (boot.se_w[[j, col]], "bootstrap")] {
                assert!(
                    (se - sd[[j, k]]).abs() <= 0.25 * sd[[j, k]],
                    "{label} SE {se:.5} vs sampling SD {:.5} at entry ({j},{k})",
                    sd[[j, k]]
                );
            }
        }
    }
    assert!(checked >= 15, "too few high-loading entries checked: {checked}");
    println!("criterion 7 (asymptotic and bootstrap SEs within 25% of the sampling SD): pass");
}

#[test]
fn criterion_8_ordering_robust_across_latent_families() {
    for family in [
        LatentDistribution::StudentT2,
        LatentDistribution::Poisson1,
        LatentDistribution::Binomial2,
    ] {
        let config = ScenarioConfig {
            n: 500,
            p: 20,
            q: 20,
            r: 3,
            noise_level: 0.1,
            replicates: 200,
            base_seed: 42,
            latent_distribution: family,
            ..ScenarioConfig::default()
        };
        let result = run_scenario(&config).unwrap();
        let prop = ppls_stats(&result).ordering_correct_proportion;
        assert!(prop >= 0.95, "{family:?}: proportion {prop}");
    }
    println!("criterion 8 (ordering recovery holds across latent families): pass");
}

#[test]
fn criterion_9_first_component_bias_competitive_with_pls() {
    let result = shared_scenario();
    let mean_abs_bias = |stats: &ppls::sim::EstimatorStats| {
        stats.bias_w.column(0).iter().map(|v| v.abs()).sum::<f64>() / stats.bias_w.nrows() as f64
    };
    let ppls_bias = mean_abs_bias(ppls_stats(result));
    let pls_bias = mean_abs_bias(
        result
            .estimators
            .iter()
            .find(|s| s.estimator == Estimator::Pls)
            .unwrap(),
    );
    assert!(
        ppls_bias <= pls_bias + 0.01,
        "mean |bias|: model-based {ppls_bias:.5} vs baseline {pls_bias:.5}"
    );
    println!(
        "criterion 9 (first-component mean |bias| {ppls_bias:.5} <= {pls_bias:.5} + 0.01): pass"
    );
}
