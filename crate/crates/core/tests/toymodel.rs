use miselbo::joint::JointModel;
use miselbo::numerics::RngStream;
use miselbo::toymodel::{
    log_evidence, posterior_grid, posterior_grid_threaded, GenerateOptions, GridBounds, GridSpec, ScaleConvention,
    ToyModel, DEFAULT_GRID_RESOLUTION,
};
use miselbo::verify::{toy_posterior_mode, TOY_DATA_SEED, TOY_D_X, TOY_N};

/// Neumaier-compensated sum.
fn compensated_sum(terms: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for t in terms {
        let s = sum + t;
        c += if sum.abs() >= t.abs() { (sum - s) + t } else { (t - s) + sum };
        sum = s;
    }
    sum + c
}

fn log_bernoulli(x: u8, logit: f64) -> f64 {
    let signed = if x == 1 { logit } else { -logit };
    if signed >= 0.0 {
        -(-signed).exp().ln_1p()
    } else {
        signed - signed.exp().ln_1p()
    }
}

fn reference_log_likelihood(model: &ToyModel, data: &[Vec<u8>], z: [f64; 2]) -> f64 {
    let w = model.weights();
    let beta = model.beta();
    let mut terms = Vec::new();
    for x in data {
        for i in 0..x.len() {
            let offset = compensated_sum((0..i).map(|j| beta.powi((i - j) as i32) * x[j] as f64));
            let logit = w[i][0] * z[0] + w[i][1] * z[1] + offset;
            terms.push(log_bernoulli(x[i], logit));
        }
    }
    compensated_sum(terms)
}

fn reference_model() -> ToyModel {
    ToyModel::generate(TOY_DATA_SEED, TOY_D_X, TOY_N).unwrap()
}

#[test]
fn likelihood_matches_independent_evaluation() {
    let mut rng = RngStream::new(11, 0);
    let mut worst: f64 = 0.0;
    for case in 0..100u64 {
        let d_x = 1 + rng.below(30);
        let n = 1 + rng.below(6);
        let mut opts = GenerateOptions::new(1000 + case, d_x, n);
        opts.beta = 0.2 + 0.6 * rng.uniform();
        let model = ToyModel::generate_with(opts).unwrap();
        let z = [6.0 * rng.uniform() - 3.0, 6.0 * rng.uniform() - 3.0];
        let got = model.log_likelihood(model.data(), &z);
        let want = reference_log_likelihood(&model, model.data(), z);
        worst = worst.max(((got - want) / want).abs());
    }
    assert!(worst < 1e-12, "worst relative error {worst:e}");
}

#[test]
fn sampled_data_follow_the_likelihood() {
    let model = ToyModel::generate(5, 4, 1).unwrap();
    let z = [0.4, -0.7];
    let patterns: Vec<Vec<u8>> = (0..16u8).map(|b| (0..4).map(|i| (b >> i) & 1).collect()).collect();
    let probs: Vec<f64> =
        patterns.iter().map(|x| model.log_likelihood(std::slice::from_ref(x), &z).exp()).collect();
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);

    let draws = 100_000;
    let mut counts = [0usize; 16];
    let mut rng = RngStream::new(3, 9);
    for _ in 0..draws {
        let x = model.sample_datum(&z, &mut rng);
        let idx = x.iter().enumerate().map(|(i, &b)| (b as usize) << i).sum::<usize>();
        counts[idx] += 1;
    }
    for (k, &p) in probs.iter().enumerate() {
        let freq = counts[k] as f64 / draws as f64;
        let se = (p * (1.0 - p) / draws as f64).sqrt();
        assert!((freq - p).abs() < 4.5 * se + 1e-9, "pattern {k}: freq {freq} vs p {p}");
    }

    for i in 0..4 {
        let marginal: f64 = patterns.iter().zip(&probs).filter(|(x, _)| x[i] == 1).map(|(_, p)| p).sum();
        let freq = counts.iter().enumerate().filter(|(k, _)| (k >> i) & 1 == 1).map(|(_, c)| *c).sum::<usize>()
            as f64
            / draws as f64;
        let se = (marginal * (1.0 - marginal) / draws as f64).sqrt();
        assert!((freq - marginal).abs() < 4.5 * se, "coordinate {i}: {freq} vs {marginal}");
    }
}

#[test]
fn evidence_is_stable_under_refinement() {
    let model = reference_model();
    let spec = GridSpec::for_model(&model);
    assert_eq!(spec.n_z1, 200);
    let base = log_evidence(&model, &spec).unwrap();
    let finer = log_evidence(&model, &spec.refined()).unwrap();
    assert!((base - finer).abs() < 1e-4, "{base} vs {finer}");
    assert!(base < 0.0 && base > -80.0);
}

#[test]
fn variance_convention_evidence_converges() {
    let mut opts = GenerateOptions::new(TOY_DATA_SEED, TOY_D_X, TOY_N);
    opts.convention = ScaleConvention::Variance;
    let model = ToyModel::generate_with(opts).unwrap();
    let v = log_evidence(&model, &GridSpec::for_model(&model)).unwrap();
    assert!(v.is_finite() && v < 0.0);
}

#[test]
fn grid_argmax_matches_local_optimum() {
    let model = reference_model();
    let bounds = GridBounds::default();
    let grid = posterior_grid(&model, bounds, DEFAULT_GRID_RESOLUTION).unwrap();
    let spacing = (bounds.hi - bounds.lo) / (DEFAULT_GRID_RESOLUTION - 1) as f64;
    let (g1, g2) = grid.argmax();
    let mode = toy_posterior_mode(&model);
    assert!((g1 - mode[0]).abs() <= spacing, "z1 {g1} vs {}", mode[0]);
    assert!((g2 - mode[1]).abs() <= spacing, "z2 {g2} vs {}", mode[1]);
}

#[test]
fn threaded_grid_is_identical() {
    let model = reference_model();
    let one = posterior_grid(&model, GridBounds::default(), 61).unwrap();
    let four = posterior_grid_threaded(&model, GridBounds::default(), 61, 4).unwrap();
    assert_eq!(one, four);
}

#[test]
fn high_density_region_lies_in_prior_bulk() {
    let model = reference_model();
    let prior = ToyModel::from_parts(model.weights().to_vec(), model.beta(), vec![], model.convention()).unwrap();

    // 1% quantile of the prior log-density under prior draws bounds its 99% highest-density set.
    let mut rng = RngStream::new(21, 0);
    let c = model.convention();
    let mut levels: Vec<f64> = (0..100_000)
        .map(|_| {
            let z1 = c.z1_std() * rng.standard_normal();
            let z2 = (c.z2_log_std_slope() * z1).exp() * rng.standard_normal();
            prior.log_prior(&[z1, z2])
        })
        .collect();
    levels.sort_by(f64::total_cmp);
    let threshold = levels[levels.len() / 100];

    let grid = posterior_grid(&model, GridBounds::default(), 120).unwrap();
    let top = grid.values.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut cells = 0;
    for (i, &z1) in grid.z1.iter().enumerate() {
        for (j, &z2) in grid.z2.iter().enumerate() {
            if grid.values[i][j] > top - 3.0 {
                cells += 1;
                assert!(model.log_prior(&[z1, z2]) >= threshold, "({z1}, {z2}) outside the prior bulk");
            }
        }
    }
    assert!(cells > 0);
}

#[test]
fn json_round_trip_is_exact_and_strict() {
    let model = reference_model();
    let text = serde_json::to_string(&model).unwrap();
    let back: ToyModel = serde_json::from_str(&text).unwrap();
    assert_eq!(model, back);

    let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
    value["extra"] = serde_json::json!(1);
    assert!(serde_json::from_value::<ToyModel>(value).is_err());

    let mut bad: serde_json::Value = serde_json::from_str(&text).unwrap();
    bad["data"][0][0] = serde_json::json!(2);
    assert!(serde_json::from_value::<ToyModel>(bad).is_err());
}
