use miselbo::estimators::{
    estimate, estimate_iw_miselbo, exact_miselbo, EstimatorConfig, EstimatorKind, EvalOptions,
};
use miselbo::numerics::RngStream;
use miselbo::oracle::{expected_estimator_value, expected_subset_kl, linear_gaussian_elbo};
use miselbo::vfamily::MixtureParams;
use miselbo::verify::{linear_gaussian_fixture, monte_carlo, spread_mixture_1d, toy_fixture, QUAD_ORDER_1D, QUAD_ORDER_2D};

fn all_configs(max_a: usize) -> Vec<EstimatorConfig> {
    let mut out = Vec::new();
    for a in 1..=max_a {
        out.push(EstimatorConfig::a2a(a));
        for s in 1..=a {
            out.push(EstimatorConfig::s2a(a, s));
            out.push(EstimatorConfig::s2s(a, s));
        }
    }
    out
}

#[test]
fn monte_carlo_means_match_oracle_for_every_kind() {
    let (model, obs) = linear_gaussian_fixture();
    for (i, cfg) in all_configs(4).iter().enumerate() {
        let q = spread_mixture_1d(cfg.a).unwrap();
        let exact = expected_estimator_value(&model, &q, &obs, cfg, QUAD_ORDER_1D).unwrap();
        let (mean, se) = monte_carlo(&model, &q, &obs, cfg, cfg.kind.denominator(), 100_000, 500 + i as u64).unwrap();
        let z = (mean - exact) / se;
        assert!(z.abs() < 3.0, "{} A={} S={}: mean {mean} oracle {exact} z {z:.2}", cfg.kind, cfg.a, cfg.s);
    }
}

#[test]
fn replicates_and_latents_keep_the_expectation() {
    let (model, obs) = linear_gaussian_fixture();
    let q = spread_mixture_1d(4).unwrap();
    let exact = exact_miselbo(&model, &q, &obs, QUAD_ORDER_1D).unwrap();
    let cfg = EstimatorConfig::s2a(4, 2).with_replicates(2).with_latents(3);
    let (mean, se) = monte_carlo(&model, &q, &obs, &cfg, cfg.kind.denominator(), 40_000, 77).unwrap();
    assert!(((mean - exact) / se).abs() < 3.0, "mean {mean} exact {exact} se {se}");
}

#[test]
fn s2s_expectation_is_miselbo_minus_subset_kl() {
    let (model, obs) = linear_gaussian_fixture();
    let q = spread_mixture_1d(5).unwrap();
    let exact = exact_miselbo(&model, &q, &obs, QUAD_ORDER_1D).unwrap();
    for s in 1..=5 {
        let e = expected_estimator_value(&model, &q, &obs, &EstimatorConfig::s2s(5, s), QUAD_ORDER_1D).unwrap();
        let kl = expected_subset_kl(&q, s, QUAD_ORDER_1D).unwrap();
        assert!((exact - e - kl).abs() < 1e-8, "S={s}: gap {} kl {kl}", exact - e);
        if s < 5 {
            assert!(kl > 0.0);
        } else {
            assert!(kl.abs() < 1e-12);
        }
    }
}

#[test]
fn quadrature_self_convergence() {
    let (toy, q) = toy_fixture().unwrap();
    let a = exact_miselbo(&toy, &q, toy.data(), QUAD_ORDER_2D).unwrap();
    let b = exact_miselbo(&toy, &q, toy.data(), 2 * QUAD_ORDER_2D).unwrap();
    assert!((a - b).abs() < 1e-8, "toy: {a} vs {b}");

    let (model, obs) = linear_gaussian_fixture();
    let q = spread_mixture_1d(1).unwrap();
    let a = exact_miselbo(&model, &q, &obs, 32).unwrap();
    let b = exact_miselbo(&model, &q, &obs, 64).unwrap();
    assert!((a - b).abs() < 1e-8, "one component: {a} vs {b}");
    let closed = linear_gaussian_elbo(&model.prior(), model.noise_std, obs, q.component(0));
    assert!((b - closed).abs() < 1e-9);

    // Separated 1-D components need the higher orders.
    let q = spread_mixture_1d(5).unwrap();
    let a = exact_miselbo(&model, &q, &obs, QUAD_ORDER_1D / 2).unwrap();
    let b = exact_miselbo(&model, &q, &obs, QUAD_ORDER_1D).unwrap();
    assert!((a - b).abs() < 1e-8, "spread mixture: {a} vs {b}");
}

#[test]
fn iw_miselbo_is_exact_at_the_posterior() {
    let (model, obs) = linear_gaussian_fixture();
    let post = model.posterior(obs);
    let q = MixtureParams::uniform(vec![post.clone(), post]).unwrap();
    let target = model.log_evidence(obs);
    for l in [1, 3, 16] {
        for seed in 0..5 {
            let v = estimate_iw_miselbo(&model, &q, &obs, l, &RngStream::new(seed, 0)).unwrap().value;
            assert!((v - target).abs() < 1e-12, "L={l}: {v} vs {target}");
        }
    }
}

#[test]
fn iw_miselbo_tightens_with_more_samples() {
    let (model, obs) = linear_gaussian_fixture();
    let q = spread_mixture_1d(3).unwrap();
    let target = model.log_evidence(obs);
    let exact = exact_miselbo(&model, &q, &obs, QUAD_ORDER_1D).unwrap();
    let mut prev = f64::NEG_INFINITY;
    for (i, l) in [1usize, 4, 32].into_iter().enumerate() {
        let cfg = EstimatorConfig::a2a(3).with_importance_samples(l);
        let (mean, se) = monte_carlo(&model, &q, &obs, &cfg, cfg.kind.denominator(), 20_000, 900 + i as u64).unwrap();
        assert!(mean <= target + 3.0 * se, "L={l} exceeds the evidence");
        assert!(mean > prev - 3.0 * se, "L={l} mean {mean} below previous {prev}");
        if l == 1 {
            assert!(((mean - exact) / se).abs() < 3.0);
        }
        prev = mean;
    }
    assert!(target - prev < target - exact);
}

#[test]
fn counts_scale_with_replicates_latents_and_samples() {
    let (model, obs) = linear_gaussian_fixture();
    let q = spread_mixture_1d(5).unwrap();
    for kind in [EstimatorKind::A2A, EstimatorKind::S2A, EstimatorKind::S2S] {
        let s = if kind == EstimatorKind::A2A { 5 } else { 2 };
        let cfg = EstimatorConfig::new(kind, 5, s).with_replicates(2).with_latents(3).with_importance_samples(4);
        let est = estimate(&model, &q, &obs, &cfg, &RngStream::new(1, 1), &EvalOptions::default()).unwrap();
        let samples = (2 * s * 3 * 4) as u64;
        let den = if kind == EstimatorKind::S2S { s } else { 5 } as u64;
        assert_eq!((est.p_evals, est.q_evals), (samples, samples * den), "{kind}");
        assert_eq!(cfg.evaluation_counts(), (samples, samples * den));
    }
}
