//! Property checks behind `miselbo verify`: unbiasedness of Some-to-All,
//! the ordering E[S2S] ≤ MISELBO ≤ ln p(x), weighted unbiasedness,
//! evaluation counters and gradients. A [`Mutation`] swaps in a wrong
//! denominator so the suite can demonstrate that it notices.

use std::fmt;

use crate::error::{Error, Result};
use crate::estimators::{
    draw_subsets, estimate, estimate_weighted_s2a, estimate_with_denominator, exact_miselbo, Denominator,
    EstimatorConfig, EstimatorKind, EvalOptions,
};
use crate::joint::CountingModel;
use crate::joint::JointModel;
use crate::nnet::{InjectionMode, Misvae};
use crate::numerics::{DiagGaussian, RngStream};
use crate::oracle::{
    expected_subset_kl, expected_value_with_denominator, expected_weighted_s2a, finite_diff_gradient,
    LinearGaussian,
};
use crate::subsets::enumerate_subsets;
use crate::toymodel::{log_evidence, GridSpec, ToyModel};
use crate::training::misvae_objective;
use crate::vfamily::MixtureParams;

/// Quadrature order for the one-dimensional fixtures. Their well-separated
/// components make the log-mixture integrand converge slowly.
pub const QUAD_ORDER_1D: usize = 160;

/// Quadrature order for the two-dimensional toy model.
pub const QUAD_ORDER_2D: usize = 64;

/// Toy dataset used by the ordering checks and the toy reproduction.
pub const TOY_DATA_SEED: u64 = 37;
pub const TOY_D_X: usize = 20;
pub const TOY_N: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mutation {
    #[default]
    None,
    /// Some-to-Some evaluated against the full mixture.
    S2sFullDenominator,
    /// Some-to-All evaluated against the subset mixture.
    S2aSubsetDenominator,
}

impl Mutation {
    fn denominator(self, kind: EstimatorKind) -> Denominator {
        match (self, kind) {
            (Mutation::S2sFullDenominator, EstimatorKind::S2S) => Denominator::Full,
            (Mutation::S2aSubsetDenominator, EstimatorKind::S2A) => Denominator::Subset,
            _ => kind.denominator(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
    /// An oracle could not produce a trustworthy reference value.
    OracleFailure,
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub status: Status,
    pub measured: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl CheckResult {
    fn new(name: impl Into<String>, passed: bool, measured: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            status: if passed { Status::Pass } else { Status::Fail },
            measured,
            tolerance,
            detail: detail.into(),
        }
    }

    fn oracle_failure(name: impl Into<String>, err: &Error) -> Self {
        Self {
            name: name.into(),
            status: Status::OracleFailure,
            measured: f64::NAN,
            tolerance: f64::NAN,
            detail: err.to_string(),
        }
    }

    pub fn passed(&self) -> bool {
        self.status == Status::Pass
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::OracleFailure => "ORACLE-FAILURE",
        };
        write!(f, "[{tag}] {}: measured {:.3e} (tolerance {:.1e}) {}", self.name, self.measured, self.tolerance, self.detail)
    }
}

pub fn all_passed(results: &[CheckResult]) -> bool {
    results.iter().all(CheckResult::passed)
}

/// 1-D linear-Gaussian joint and observation for the unbiasedness checks.
pub fn linear_gaussian_fixture() -> (LinearGaussian, f64) {
    (LinearGaussian { prior_mean: 0.0, prior_std: 1.0, noise_std: 0.5 }, 1.3)
}

/// A well-separated A-component mixture on the real line.
pub fn spread_mixture_1d(a: usize) -> Result<MixtureParams> {
    let comps = (0..a)
        .map(|k| {
            let t = if a == 1 { 0.0 } else { k as f64 / (a - 1) as f64 };
            DiagGaussian::new(vec![-0.8 + 2.6 * t], vec![(0.35 + 0.1 * t).ln()])
        })
        .collect::<Result<Vec<_>>>()?;
    MixtureParams::uniform(comps)
}

/// Monte Carlo mean and standard error of `draws` independent evaluations.
pub fn monte_carlo<M: JointModel>(
    model: &M,
    q: &MixtureParams,
    x: &M::Datum,
    cfg: &EstimatorConfig,
    den: Denominator,
    draws: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let opts = EvalOptions::default();
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for i in 0..draws {
        let rng = RngStream::new(seed, i as u64);
        let subsets = draw_subsets(cfg, &rng)?;
        let v = estimate_with_denominator(model, q, x, cfg, &subsets, &rng, &opts, den)?.value;
        sum += v;
        sum_sq += v * v;
    }
    let n = draws as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean) * n / (n - 1.0);
    Ok((mean, (var.max(0.0) / n).sqrt()))
}

/// Some-to-All is unbiased for MISELBO: exact expectation by enumeration and
/// quadrature, plus a Monte Carlo mean within 3 standard errors.
pub fn check_s2a_unbiased(a_values: &[usize], draws: usize, mutation: Mutation) -> Vec<CheckResult> {
    let (model, obs) = linear_gaussian_fixture();
    let mut out = Vec::new();
    for &a in a_values {
        for s in 1..a {
            let name = format!("S2A unbiased A={a} S={s}");
            let run = || -> Result<Vec<CheckResult>> {
                let q = spread_mixture_1d(a)?;
                let cfg = EstimatorConfig::s2a(a, s);
                let den = mutation.denominator(EstimatorKind::S2A);
                let exact = exact_miselbo(&model, &q, &obs, QUAD_ORDER_1D)?;
                let expected = expected_value_with_denominator(&model, &q, &obs, &cfg, QUAD_ORDER_1D, den)?;
                let gap = (expected - exact).abs();
                let (mean, se) = monte_carlo(&model, &q, &obs, &cfg, den, draws, 1000 + 10 * a as u64 + s as u64)?;
                let z = (mean - exact).abs() / se;
                Ok(vec![
                    CheckResult::new(format!("{name} (enumeration)"), gap < 1e-8, gap, 1e-8, format!("E = {expected:.10}, MISELBO = {exact:.10}")),
                    CheckResult::new(format!("{name} (Monte Carlo, {draws} draws)"), z < 3.0, z, 3.0, format!("mean {mean:.6} ± {se:.2e}")),
                ])
            };
            match run() {
                Ok(mut r) => out.append(&mut r),
                Err(e) => out.push(CheckResult::oracle_failure(name, &e)),
            }
        }
    }
    out
}

/// Posterior mode of the toy model: backtracking gradient ascent followed by
/// Newton steps on a differenced Hessian.
pub fn toy_posterior_mode(model: &ToyModel) -> [f64; 2] {
    let f = |z: &[f64]| model.log_joint(model.data(), z);
    let grad = |z: &[f64]| {
        let mut g = [0.0; 2];
        model.log_prior_grad(z, &mut g);
        model.log_likelihood_grad(model.data(), z, &mut g);
        g
    };
    let mut z = [0.0, 0.0];
    let mut step = 0.1;
    for _ in 0..2000 {
        let g = grad(&z);
        if g[0].hypot(g[1]) < 1e-3 {
            break;
        }
        let cur = f(&z);
        loop {
            let cand = [z[0] + step * g[0], z[1] + step * g[1]];
            if f(&cand) > cur {
                z = cand;
                step *= 1.5;
                break;
            }
            step *= 0.5;
            if step < 1e-16 {
                return z;
            }
        }
    }
    for _ in 0..50 {
        let g = grad(&z);
        if g[0].hypot(g[1]) < 1e-12 {
            break;
        }
        let h = 1e-5;
        let mut hess = [[0.0; 2]; 2];
        for j in 0..2 {
            let mut up = z;
            let mut down = z;
            up[j] += h;
            down[j] -= h;
            let (gu, gd) = (grad(&up), grad(&down));
            for i in 0..2 {
                hess[i][j] = (gu[i] - gd[i]) / (2.0 * h);
            }
        }
        let det = hess[0][0] * hess[1][1] - hess[0][1] * hess[1][0];
        let dz = [
            -(hess[1][1] * g[0] - hess[0][1] * g[1]) / det,
            -(-hess[1][0] * g[0] + hess[0][0] * g[1]) / det,
        ];
        let cur = f(&z);
        let mut t = 1.0;
        while t > 1e-8 && f(&[z[0] + t * dz[0], z[1] + t * dz[1]]) < cur {
            t *= 0.5;
        }
        z = [z[0] + t * dz[0], z[1] + t * dz[1]];
    }
    z
}

/// Toy model plus a four-component mixture placed around its posterior mode.
pub fn toy_fixture() -> Result<(ToyModel, MixtureParams)> {
    let model = ToyModel::generate(TOY_DATA_SEED, TOY_D_X, TOY_N)?;
    let mode = toy_posterior_mode(&model);
    let offsets = [(-0.35, -0.2), (0.3, 0.25), (-0.1, 0.4), (0.25, -0.35)];
    let comps = offsets
        .iter()
        .map(|&(a, b)| DiagGaussian::new(vec![mode[0] + a, mode[1] + b], vec![0.3f64.ln(), 0.25f64.ln()]))
        .collect::<Result<Vec<_>>>()?;
    Ok((model, MixtureParams::uniform(comps)?))
}

/// `E[S2S] ≤ MISELBO ≤ ln p(x)` on the toy model, with the S2S gap equal to
/// the expected subset KL.
pub fn check_ordering(s_values: &[usize], draws: usize, mutation: Mutation) -> Vec<CheckResult> {
    let tol = 1e-6;
    let run = || -> Result<Vec<CheckResult>> {
        let (model, q) = toy_fixture()?;
        let x = model.data();
        let a = q.a();
        let miselbo = exact_miselbo(&model, &q, x, QUAD_ORDER_2D)?;
        let le = log_evidence(&model, &GridSpec::for_model(&model))?;
        let mut out = vec![CheckResult::new(
            "MISELBO <= log p(x)",
            miselbo <= le + tol,
            le - miselbo,
            tol,
            format!("MISELBO = {miselbo:.8}, log p(x) = {le:.8}"),
        )];
        for &s in s_values {
            let cfg = EstimatorConfig::s2s(a, s);
            let den = mutation.denominator(EstimatorKind::S2S);
            let e_s2s = expected_value_with_denominator(&model, &q, x, &cfg, QUAD_ORDER_2D, den)?;
            let kl = expected_subset_kl(&q, s, QUAD_ORDER_2D)?;
            let gap = miselbo - e_s2s;
            out.push(CheckResult::new(
                format!("E[S2S] <= MISELBO (A={a} S={s})"),
                gap >= -tol,
                gap,
                tol,
                format!("E[S2S] = {e_s2s:.8}"),
            ));
            out.push(CheckResult::new(
                format!("MISELBO - E[S2S] = E[KL] (A={a} S={s})"),
                (gap - kl).abs() < tol,
                (gap - kl).abs(),
                tol,
                format!("gap {gap:.8}, E[KL] {kl:.8}"),
            ));
            let (mean, se) = monte_carlo(&model, &q, x, &cfg, den, draws, 2000 + s as u64)?;
            let z = (mean - e_s2s).abs() / se;
            out.push(CheckResult::new(
                format!("S2S Monte Carlo matches its expectation (A={a} S={s}, {draws} draws)"),
                z < 3.0,
                z,
                3.0,
                format!("mean {mean:.6} ± {se:.2e}"),
            ));
        }
        Ok(out)
    };
    run().unwrap_or_else(|e| vec![CheckResult::oracle_failure("ordering", &e)])
}

/// Weighted Some-to-All on the 1-D fixture for a few random weight vectors.
pub fn check_weighted(a: usize, s: usize, vectors: usize, seed: u64) -> Vec<CheckResult> {
    let (model, obs) = linear_gaussian_fixture();
    let mut rng = RngStream::new(seed, 0);
    (0..vectors)
        .map(|v| {
            let name = format!("weighted S2A unbiased A={a} S={s} (weights #{v})");
            let mut run = || -> Result<CheckResult> {
                let w: Vec<f64> = (0..a).map(|_| -rng.uniform().ln()).collect();
                let base = spread_mixture_1d(a)?;
                let q = MixtureParams::new(base.components().to_vec(), Some(w.clone()))?;
                let exact = exact_miselbo(&model, &q, &obs, QUAD_ORDER_1D)?;
                let expected = expected_weighted_s2a(&model, &q, &obs, s, QUAD_ORDER_1D)?;
                let gap = (expected - exact).abs();
                Ok(CheckResult::new(name.clone(), gap < 1e-8, gap, 1e-8, format!("weights {w:.3?}")))
            };
            run().unwrap_or_else(|e| CheckResult::oracle_failure(name.clone(), &e))
        })
        .collect()
}

/// Inclusion probability `S / A` for every component, as used by the
/// weighted estimator under uniform subsets.
pub fn uniform_inclusion(a: usize, s: usize) -> Result<Vec<f64>> {
    let subsets = enumerate_subsets(a, s)?;
    let mut p = vec![0.0; a];
    for sub in &subsets {
        for &k in sub.indices() {
            p[k] += 1.0 / subsets.len() as f64;
        }
    }
    Ok(p)
}

/// Monte Carlo cross-check of the weighted estimator itself.
pub fn check_weighted_monte_carlo(a: usize, s: usize, draws: usize, seed: u64) -> CheckResult {
    let name = format!("weighted S2A Monte Carlo A={a} S={s}");
    let run = || -> Result<CheckResult> {
        let (model, obs) = linear_gaussian_fixture();
        let base = spread_mixture_1d(a)?;
        let w: Vec<f64> = (0..a).map(|k| 1.0 + k as f64).collect();
        let q = MixtureParams::new(base.components().to_vec(), Some(w))?;
        let exact = exact_miselbo(&model, &q, &obs, QUAD_ORDER_1D)?;
        let incl = uniform_inclusion(a, s)?;
        let cfg = EstimatorConfig::s2a(a, s);
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for i in 0..draws {
            let v = estimate_weighted_s2a(&model, &q, &obs, &cfg, &incl, &RngStream::new(seed, i as u64))?.value;
            sum += v;
            sum_sq += v * v;
        }
        let n = draws as f64;
        let mean = sum / n;
        let se = ((sum_sq / n - mean * mean) / (n - 1.0)).max(0.0).sqrt();
        let z = (mean - exact).abs() / se;
        Ok(CheckResult::new(name.clone(), z < 3.0, z, 3.0, format!("mean {mean:.6} ± {se:.2e}, MISELBO {exact:.6}")))
    };
    run().unwrap_or_else(|e| CheckResult::oracle_failure(name.clone(), &e))
}

/// `(p_evals, q_evals)` per call for M = J = L = 1.
pub fn predicted_counts(kind: EstimatorKind, a: usize, s: usize) -> (u64, u64) {
    let (a, s) = (a as u64, s as u64);
    match kind {
        EstimatorKind::A2A => (a, a * a),
        EstimatorKind::S2A => (s, s * a),
        EstimatorKind::S2S => (s, s * s),
    }
}

/// Counters reported by the estimator, and likelihood calls observed from
/// outside, against the closed-form per-call costs.
pub fn check_counters(configs: usize, seed: u64) -> Vec<CheckResult> {
    let (model, obs) = linear_gaussian_fixture();
    let mut rng = RngStream::new(seed, 0);
    let mut worst = 0u64;
    let mut failures = Vec::new();
    for i in 0..configs {
        let kind = [EstimatorKind::A2A, EstimatorKind::S2A, EstimatorKind::S2S][rng.below(3)];
        let a = 1 + rng.below(12);
        let s = if kind == EstimatorKind::A2A { a } else { 1 + rng.below(a) };
        let cfg = EstimatorConfig::new(kind, a, s);
        let counting = CountingModel::new(&model);
        let r = spread_mixture_1d(a).and_then(|q| {
            estimate(&counting, &q, &obs, &cfg, &RngStream::new(seed, i as u64), &EvalOptions::with_gradient())
        });
        match r {
            Ok(est) => {
                let want = predicted_counts(kind, a, s);
                let got = (est.p_evals, est.q_evals);
                let off = want.0.abs_diff(got.0) + want.1.abs_diff(got.1) + want.0.abs_diff(counting.calls());
                worst = worst.max(off);
                if off != 0 {
                    failures.push(format!("{kind} A={a} S={s}: got {got:?} (observed {} p), want {want:?}", counting.calls()));
                }
            }
            Err(e) => failures.push(format!("{kind} A={a} S={s}: {e}")),
        }
    }
    vec![CheckResult::new(
        format!("evaluation counters over {configs} random configs"),
        failures.is_empty(),
        worst as f64,
        0.0,
        failures.join("; "),
    )]
}

/// `‖g - g_fd‖ / max(‖g_fd‖, floor)` for one parameter vector.
pub fn relative_error(g: &[f64], fd: &[f64], floor: f64) -> f64 {
    let diff: f64 = g.iter().zip(fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / norm.max(floor)
}

/// Largest relative error between the analytic gradient of `cfg` on the
/// toy model and central differences, over `trials` random mixtures.
pub fn mixture_gradient_error(cfg: &EstimatorConfig, trials: usize, seed: u64) -> Result<f64> {
    let model = ToyModel::generate(TOY_DATA_SEED, TOY_D_X, TOY_N)?;
    let mode = toy_posterior_mode(&model);
    let mut rng = RngStream::new(seed, 0);
    let mut worst = 0.0f64;
    for t in 0..trials {
        let comps = (0..cfg.a)
            .map(|_| {
                let mean = vec![mode[0] + 0.5 * rng.standard_normal(), mode[1] + 0.5 * rng.standard_normal()];
                let log_std = vec![-1.5 + rng.uniform(), -1.5 + rng.uniform()];
                DiagGaussian::new(mean, log_std)
            })
            .collect::<Result<Vec<_>>>()?;
        let q = MixtureParams::uniform(comps)?;
        let draw = RngStream::new(seed, 1 + t as u64);
        let est = estimate(&model, &q, model.data(), cfg, &draw, &EvalOptions::with_gradient())?;
        let g = est.grad.expect("gradient requested");
        let value = |p: &[f64]| {
            let qp = q.with_flat(p).expect("finite parameters");
            estimate(&model, &qp, model.data(), cfg, &draw, &EvalOptions::default())
                .expect("estimator evaluates")
                .value
        };
        let fd = finite_diff_gradient(value, &q.to_flat(), 1e-5);
        worst = worst.max(relative_error(&g, &fd, 1e-3));
    }
    Ok(worst)
}

/// Largest per-coordinate relative error of the encoder gradient against
/// central differences, `coords` random coordinates in each of `nets`
/// random networks.
pub fn misvae_gradient_error(cfg: &EstimatorConfig, nets: usize, coords: usize, seed: u64) -> Result<f64> {
    let model = ToyModel::generate(TOY_DATA_SEED, 8, 3)?;
    let mut worst = 0.0f64;
    for n in 0..nets {
        let mut init = RngStream::new(seed, n as u64);
        let net = Misvae::new(model.d_x(), 2, cfg.a, InjectionMode::EveryLayer, &mut init)?;
        let draw = RngStream::new(seed, 1000 + n as u64);
        let batch: Vec<usize> = (0..model.n()).collect();
        let (_, grad, _, _) = misvae_objective(&net, &model, &batch, cfg, &draw, 1.0)?;
        let flat = net.to_flat();
        let objective = |p: &[f64]| {
            let mut other = net.clone();
            other.set_flat(p).expect("finite parameters");
            misvae_objective(&other, &model, &batch, cfg, &draw, 1.0).expect("objective evaluates").0
        };
        let mut p = flat.clone();
        for _ in 0..coords {
            let i = init.below(flat.len());
            let h = 1e-5;
            p[i] = flat[i] + h;
            let up = objective(&p);
            p[i] = flat[i] - h;
            let down = objective(&p);
            p[i] = flat[i];
            let fd = (up - down) / (2.0 * h);
            worst = worst.max((grad[i] - fd).abs() / fd.abs().max(grad[i].abs()).max(1e-2));
        }
    }
    Ok(worst)
}

pub fn check_gradients(trials: usize) -> Vec<CheckResult> {
    let mut out = Vec::new();
    for cfg in [EstimatorConfig::a2a(3), EstimatorConfig::s2a(4, 2), EstimatorConfig::s2s(4, 2)] {
        let name = format!("mixture gradient {} A={} S={} vs finite differences", cfg.kind, cfg.a, cfg.s);
        out.push(match mixture_gradient_error(&cfg, trials, 77) {
            Ok(e) => CheckResult::new(name, e < 1e-4, e, 1e-4, format!("{trials} random mixtures")),
            Err(e) => CheckResult::oracle_failure(name, &e),
        });
    }
    for cfg in [EstimatorConfig::s2a(3, 2), EstimatorConfig::s2s(3, 2)] {
        let name = format!("encoder gradient {} A={} S={} vs finite differences", cfg.kind, cfg.a, cfg.s);
        out.push(match misvae_gradient_error(&cfg, 3, trials.div_ceil(3), 78) {
            Ok(e) => CheckResult::new(name, e < 1e-3, e, 1e-3, "random coordinates of random networks"),
            Err(e) => CheckResult::oracle_failure(name, &e),
        });
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Fast,
    Full,
}

/// Runs the suite. `Fast` covers A ≤ 3 with fewer draws; `Full` covers
/// A ≤ 5, weighted mixtures and gradient checks.
pub fn run_suite(scale: Scale, mutation: Mutation) -> Vec<CheckResult> {
    let mut out = Vec::new();
    match scale {
        Scale::Fast => {
            out.extend(check_s2a_unbiased(&[2, 3], 20_000, mutation));
            out.extend(check_ordering(&[1, 2], 20_000, mutation));
            out.extend(check_counters(200, 5));
        }
        Scale::Full => {
            out.extend(check_s2a_unbiased(&[2, 3, 4, 5], 100_000, mutation));
            out.extend(check_ordering(&[1, 2, 3], 100_000, mutation));
            out.extend(check_weighted(3, 2, 3, 11));
            out.push(check_weighted_monte_carlo(3, 2, 100_000, 12));
            out.extend(check_counters(1000, 5));
            out.extend(check_gradients(100));
        }
    }
    out
}
