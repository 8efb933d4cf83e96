//! MISELBO estimators for mixture variational families.
//!
//! Each estimator draws latents from some components of the mixture and
//! scores them against a mixture denominator:
//!
//! | kind | sampled components | denominator | `#p` | `#q` |
//! |------|--------------------|-------------|------|------|
//! | A2A  | all A              | all A       | A    | A²   |
//! | S2A  | S-subset           | all A       | S    | S·A  |
//! | S2S  | S-subset           | same subset | S    | S²   |
//!
//! (counts per datum with `M = J = L = 1`; in general multiply by `M·J·L`).
//!
//! Randomness is keyed, not sequential: subsets come from
//! `rng.fork(SUBSET_TAG)` and the noise of component `k` in replicate `m`
//! from `rng.fork2(m, k)`. Two estimators that end up sampling the same
//! components therefore see the same latents, which makes the S = A
//! reductions bitwise exact.
//!
//! Gradients are reparameterized and flow through both the sampled latent
//! and every density in the denominator.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::joint::JointModel;
use crate::numerics::{gaussian_log_pdf, log_sum_exp, RngStream};
use crate::oracle::{gauss_hermite, gaussian_expectation, MAX_QUAD_ORDER};
use crate::subsets::{sample_subset, SubsetDraw};
use crate::vfamily::{mixture_log_density, MixtureParams};

/// Stream tag reserved for subset draws.
pub const SUBSET_TAG: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    A2A,
    S2A,
    S2S,
}

impl EstimatorKind {
    pub fn denominator(self) -> Denominator {
        match self {
            EstimatorKind::A2A | EstimatorKind::S2A => Denominator::Full,
            EstimatorKind::S2S => Denominator::Subset,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorKind::A2A => "a2a",
            EstimatorKind::S2A => "s2a",
            EstimatorKind::S2S => "s2s",
        }
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a2a" => Ok(EstimatorKind::A2A),
            "s2a" => Ok(EstimatorKind::S2A),
            "s2s" => Ok(EstimatorKind::S2S),
            other => Err(contract(format!("unknown estimator kind `{other}`"))),
        }
    }
}

/// Which components appear in the mixture denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Denominator {
    Full,
    Subset,
}

fn one() -> usize {
    1
}

/// Estimator kind plus its counts: A components, subsets of size S, M
/// subset replicates, J latents per selected component and L inner
/// importance samples per latent group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    #[serde(rename = "A")]
    pub a: usize,
    #[serde(rename = "S")]
    pub s: usize,
    #[serde(rename = "M", default = "one")]
    pub m: usize,
    #[serde(rename = "J", default = "one")]
    pub j: usize,
    #[serde(rename = "L", default = "one")]
    pub l: usize,
}

impl EstimatorConfig {
    pub fn a2a(a: usize) -> Self {
        Self { kind: EstimatorKind::A2A, a, s: a, m: 1, j: 1, l: 1 }
    }

    pub fn s2a(a: usize, s: usize) -> Self {
        Self { kind: EstimatorKind::S2A, a, s, m: 1, j: 1, l: 1 }
    }

    pub fn s2s(a: usize, s: usize) -> Self {
        Self { kind: EstimatorKind::S2S, a, s, m: 1, j: 1, l: 1 }
    }

    pub fn new(kind: EstimatorKind, a: usize, s: usize) -> Self {
        Self { kind, a, s, m: 1, j: 1, l: 1 }
    }

    pub fn with_replicates(mut self, m: usize) -> Self {
        self.m = m;
        self
    }

    pub fn with_latents(mut self, j: usize) -> Self {
        self.j = j;
        self
    }

    pub fn with_importance_samples(mut self, l: usize) -> Self {
        self.l = l;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.a < 1 || self.s < 1 || self.s > self.a {
            return Err(contract(format!("need 1 <= S <= A, got S = {}, A = {}", self.s, self.a)));
        }
        if self.kind == EstimatorKind::A2A && self.s != self.a {
            return Err(contract(format!("A2A requires S = A, got S = {}, A = {}", self.s, self.a)));
        }
        if self.m < 1 || self.j < 1 || self.l < 1 {
            return Err(contract("M, J and L must all be at least 1"));
        }
        Ok(())
    }

    /// Number of latent groups averaged per datum, `M·S·J`.
    pub fn terms(&self) -> usize {
        self.m * self.s * self.j
    }

    /// `(#p, #q)` per datum for one evaluation.
    pub fn evaluation_counts(&self) -> (u64, u64) {
        let samples = (self.m * self.s * self.j * self.l) as u64;
        let den = match self.kind.denominator() {
            Denominator::Full => self.a,
            Denominator::Subset => self.s,
        } as u64;
        (samples, samples * den)
    }
}

/// Estimator output.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboEstimate {
    pub value: f64,
    /// One entry per latent group, scaled so that `value` is their mean.
    pub per_term: Vec<f64>,
    pub subset_trace: Vec<SubsetDraw>,
    pub p_evals: u64,
    pub q_evals: u64,
    /// Gradient w.r.t. the mixture's flat parameter vector, when requested.
    pub grad: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub gradient: bool,
    /// Scales `ln p(z) - ln q_mix(z)` inside every term (KL warm-up).
    pub kl_weight: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { gradient: false, kl_weight: 1.0 }
    }
}

impl EvalOptions {
    pub fn with_gradient() -> Self {
        Self { gradient: true, kl_weight: 1.0 }
    }
}

enum Coefficients<'a> {
    /// Every latent group weighs `1 / (M·S·J)`.
    Uniform,
    /// Group from component k weighs `u_k / (M·J)`.
    Weighted(&'a [f64]),
}

struct Plan<'a> {
    subsets: &'a [SubsetDraw],
    j: usize,
    l: usize,
    den: Denominator,
    coefficients: Coefficients<'a>,
}

/// Draws the M subsets one evaluation uses. A2A always gets full sets.
pub fn draw_subsets(cfg: &EstimatorConfig, rng: &RngStream) -> Result<Vec<SubsetDraw>> {
    cfg.validate()?;
    if cfg.kind == EstimatorKind::A2A || cfg.s == cfg.a {
        return Ok(vec![SubsetDraw::full(cfg.a); cfg.m]);
    }
    let mut stream = rng.fork(SUBSET_TAG);
    (0..cfg.m).map(|_| sample_subset(cfg.a, cfg.s, &mut stream)).collect()
}

fn check_inputs<M: JointModel>(model: &M, q: &MixtureParams, cfg: &EstimatorConfig) -> Result<()> {
    cfg.validate()?;
    if cfg.a != q.a() {
        return Err(contract(format!("config has A = {} but the mixture has {} components", cfg.a, q.a())));
    }
    if model.latent_dim() != q.dim() {
        return Err(contract(format!(
            "model latent dimension {} differs from mixture dimension {}",
            model.latent_dim(),
            q.dim()
        )));
    }
    Ok(())
}

fn check_subsets(cfg: &EstimatorConfig, subsets: &[SubsetDraw]) -> Result<()> {
    if subsets.len() != cfg.m {
        return Err(contract(format!("expected {} subsets, got {}", cfg.m, subsets.len())));
    }
    if let Some(bad) = subsets.iter().find(|d| d.a() != cfg.a || d.s() != cfg.s) {
        return Err(contract(format!(
            "subset of size {} over A = {} does not match S = {}, A = {}",
            bad.s(),
            bad.a(),
            cfg.s,
            cfg.a
        )));
    }
    Ok(())
}

/// General entry point: draws subsets from `rng` and evaluates `cfg`.
pub fn estimate<M: JointModel>(
    model: &M,
    q: &MixtureParams,
    x: &M::Datum,
    cfg: &EstimatorConfig,
    rng: &RngStream,
    opts: &EvalOptions,
) -> Result<ElboEstimate> {
    let subsets = draw_subsets(cfg, rng)?;
    estimate_with_subsets(model, q, x, cfg, &subsets, rng, opts)
}

/// Evaluates `cfg` on caller-supplied subsets (e.g. one draw shared by a batch).
pub fn estimate_with_subsets<M: JointModel>(
    model: &M,
    q: &MixtureParams,
    x: &M::Datum,
    cfg: &EstimatorConfig,
    subsets: &[SubsetDraw],
    rng: &RngStream,
    opts: &EvalOptions,
) -> Result<ElboEstimate> {
    estimate_with_denominator(model, q, x, cfg, subsets, rng, opts, cfg.kind.denominator())
}

/// Like [`estimate_with_subsets`] with the denominator rule overridden.
/// Exists so the verification suite can inject a wrong denominator and
/// confirm that it notices.
#[doc(hidden)]
#[allow(clippy::too_many_arguments)]
pub fn estimate_with_denominator<M: JointModel>(
    model: &M,
    q: &MixtureParams,
    x: &M::Datum,
    cfg: &EstimatorConfig,
    subsets: &[SubsetDraw],
    rng: &RngStream,
    opts: &EvalOptions,
    den: Denominator,
) -> Result<ElboEstimate> {
    check_inputs(model, q, cfg)?;
    check_subsets(cfg, subsets)?;
    if !q.is_uniform() {
        return Err(contract("A2A/S2A/S2S estimators expect a uniformly weighted mixture"));
    }
    let plan = Plan { subsets, j: cfg.j, l: cfg.l, den, coefficients: Coefficients::Uniform };
    run(model, q, x, &plan, rng, opts)
}

/// All-to-All: one latent from every component, full denominator.
pub fn estimate_a2a<M: JointModel>(
    model: &M,
    q: &MixtureParams,
    x: &M::Datum,
    rng: &RngStream,
) -> Result<ElboEstimate> {
    estimate(model, q, x, &EstimatorConfig::a2a(q.a()), rng, &EvalOptions::default())
}

/// Some-to-All: latents from a uniform S-subset, full denominator.
pub fn estimate_s2a<M: JointModel>(
    model: &M,
    q: &MixtureParams,
    x: &M::Datum,
    cfg: &EstimatorConfig,
    rng: &RngStream,
) -> Result<ElboEstimate> {
    if cfg.kind != EstimatorKind::S2A {
        return Err(contract(format!("estimate_s2a called with kind {}", cfg.kind)));
    }
    estimate(model, q, x, cfg, rng, &EvalOptions::default())
}

/// Some-to-Some: latents from a uniform S-subset, denominator over that subset only.
pub fn estimate_s2s<M: JointModel>(
    model: &M,
    q: &MixtureParams,
    x: &M::Datum,
    cfg: &EstimatorConfig,
    rng: &RngStream,
) -> Result<ElboEstimate> {
    if cfg.kind != EstimatorKind::S2S {
        return Err(contract(format!("estimate_s2s called with kind {}", cfg.kind)));
    }
    estimate(model, q, x, cfg, rng, &EvalOptions::default())
}

/// Importance-weighted MISELBO with `L` inner samples per component.
pub fn estimate_iw_miselbo<M: JointModel>(
    model: &M,
    q: &MixtureParams,
    x: &M::Datum,
    l: usize,
    rng: &RngStream,
) -> Result<ElboEstimate> {
    let cfg = EstimatorConfig::a2a(q.a()).with_importance_samples(l);
    estimate(model, q, x, &cfg, rng, &EvalOptions::default())
}

/// Some-to-All for a weighted mixture. Each selected component k carries
/// the correction `u_k = w_k / (w_A · inclusion_probs[k])`, and the
/// denominator is the weighted full mixture. `cfg.l > 1` gives the
/// importance-weighted variant.
pub fn estimate_weighted_s2a<M: JointModel>(
    model: &M,
    q: &MixtureParams,
    x: &M::Datum,
    cfg: &EstimatorConfig,
    inclusion_probs: &[f64],
    rng: &RngStream,
) -> Result<ElboEstimate> {
    check_inputs(model, q, cfg)?;
    let weights = q
        .weights()
        .ok_or_else(|| contract("weighted S2A needs explicit mixture weights"))?;
    if inclusion_probs.len() != q.a() {
        return Err(contract("one inclusion probability per component is required"));
    }
    if let Some(k) = inclusion_probs.iter().position(|p| !(*p > 0.0 && p.is_finite())) {
        return Err(contract(format!(
            "inclusion probability of component {k} is {}; the estimator is undefined",
            inclusion_probs[k]
        )));
    }
    let total: f64 = weights.iter().sum();
    let u: Vec<f64> = weights
        .iter()
        .zip(inclusion_probs)
        .map(|(w, p)| w / (total * p))
        .collect();
    let subsets = draw_subsets(cfg, rng)?;
    let plan = Plan {
        subsets: &subsets,
        j: cfg.j,
        l: cfg.l,
        den: Denominator::Full,
        coefficients: Coefficients::Weighted(&u),
    };
    run(model, q, x, &plan, rng, &EvalOptions::default())
}

/// Scratch buffers for one latent group of `L` samples.
struct GroupScratch {
    eps: Vec<f64>,
    z: Vec<f64>,
    gz: Vec<f64>,
    resp: Vec<f64>,
    t: Vec<f64>,
    lq: Vec<f64>,
    gprior: Vec<f64>,
}

fn run<M: JointModel>(
    model: &M,
    q: &MixtureParams,
    x: &M::Datum,
    plan: &Plan<'_>,
    rng: &RngStream,
    opts: &EvalOptions,
) -> Result<ElboEstimate> {
    let d = q.dim();
    let a = q.a();
    let l = plan.l;
    let beta = opts.kl_weight;
    let (full, full_coeffs) = match plan.den {
        Denominator::Full => {
            let full: Vec<usize> = (0..a).collect();
            let coeffs = q.log_coefficients(&full);
            (full, coeffs)
        }
        Denominator::Subset => (Vec::new(), Vec::new()),
    };
    let max_den = match plan.den {
        Denominator::Full => a,
        Denominator::Subset => plan.subsets.iter().map(SubsetDraw::s).max().unwrap_or(0),
    };
    let mut scratch = GroupScratch {
        eps: vec![0.0; l * d],
        z: vec![0.0; l * d],
        gz: vec![0.0; l * d],
        resp: vec![0.0; l * max_den],
        t: vec![0.0; l],
        lq: vec![0.0; max_den],
        gprior: vec![0.0; d],
    };
    let mut grad = opts.gradient.then(|| vec![0.0; q.num_params()]);
    let n_terms: usize = plan.subsets.iter().map(|s| s.s()).sum::<usize>() * plan.j;
    let m_count = plan.subsets.len();
    let mut per_term = Vec::with_capacity(n_terms);
    let mut weighted_value = 0.0;
    let (mut p_evals, mut q_evals) = (0u64, 0u64);
    let ln_l = (l as f64).ln();

    for (m, subset) in plan.subsets.iter().enumerate() {
        let (members, den_coeffs): (&[usize], Vec<f64>) = match plan.den {
            Denominator::Full => (&full, full_coeffs.clone()),
            Denominator::Subset => (subset.indices(), q.log_coefficients(subset.indices())),
        };
        let nd = members.len();
        for &k in subset.indices() {
            let comp = q.component(k);
            let mut stream = rng.fork2(m as u64, k as u64);
            let coef = match plan.coefficients {
                Coefficients::Uniform => 1.0 / n_terms as f64,
                Coefficients::Weighted(u) => u[k] / (m_count * plan.j) as f64,
            };
            for _ in 0..plan.j {
                for s in 0..l {
                    let eps = &mut scratch.eps[s * d..(s + 1) * d];
                    let z = &mut scratch.z[s * d..(s + 1) * d];
                    for i in 0..d {
                        eps[i] = stream.standard_normal();
                        z[i] = comp.mean()[i] + comp.log_std()[i].exp() * eps[i];
                    }
                    let z = &scratch.z[s * d..(s + 1) * d];
                    let gz = &mut scratch.gz[s * d..(s + 1) * d];
                    let (lik, prior) = if opts.gradient {
                        gz.fill(0.0);
                        scratch.gprior.fill(0.0);
                        let lik = model.log_likelihood_grad(x, z, gz);
                        let prior = model.log_prior_grad(z, &mut scratch.gprior);
                        for i in 0..d {
                            gz[i] += beta * scratch.gprior[i];
                        }
                        (lik, prior)
                    } else {
                        (model.log_likelihood(x, z), model.log_prior(z))
                    };
                    p_evals += 1;
                    for (r, &mk) in members.iter().enumerate() {
                        scratch.lq[r] = den_coeffs[r] + gaussian_log_pdf(q.component(mk), z);
                    }
                    q_evals += nd as u64;
                    let log_den = log_sum_exp(&scratch.lq[..nd])?;
                    let t = lik + beta * (prior - log_den);
                    if !t.is_finite() {
                        return Err(Error::Numeric {
                            component: k,
                            detail: format!("non-finite log-weight {t} (log p(x|z) = {lik}, log p(z) = {prior})"),
                        });
                    }
                    scratch.t[s] = t;
                    if opts.gradient {
                        let resp = &mut scratch.resp[s * max_den..s * max_den + nd];
                        for r in 0..nd {
                            resp[r] = (scratch.lq[r] - log_den).exp();
                            let c = q.component(members[r]);
                            for i in 0..d {
                                let var_inv = (-2.0 * c.log_std()[i]).exp();
                                // ∇_z ln q_c(z) = -(z - μ)/σ²
                                gz[i] += beta * resp[r] * (z[i] - c.mean()[i]) * var_inv;
                            }
                        }
                    }
                }
                let group = if l == 1 { scratch.t[0] } else { log_sum_exp(&scratch.t[..l])? - ln_l };
                match plan.coefficients {
                    Coefficients::Uniform => per_term.push(group),
                    Coefficients::Weighted(_) => {
                        per_term.push(group * coef * n_terms as f64);
                        weighted_value += coef * group;
                    }
                }
                if let Some(g) = grad.as_mut() {
                    for s in 0..l {
                        let omega = if l == 1 { 1.0 } else { (scratch.t[s] - ln_l - group).exp() };
                        let w = coef * omega;
                        let z = &scratch.z[s * d..(s + 1) * d];
                        let gz = &scratch.gz[s * d..(s + 1) * d];
                        let eps = &scratch.eps[s * d..(s + 1) * d];
                        let base = 2 * d * k;
                        for i in 0..d {
                            g[base + i] += w * gz[i];
                            g[base + d + i] += w * gz[i] * comp.log_std()[i].exp() * eps[i];
                        }
                        let resp = &scratch.resp[s * max_den..s * max_den + nd];
                        for (r, &mk) in members.iter().enumerate() {
                            let c = q.component(mk);
                            let cb = 2 * d * mk;
                            for i in 0..d {
                                let inv_std = (-c.log_std()[i]).exp();
                                let u = (z[i] - c.mean()[i]) * inv_std;
                                g[cb + i] -= w * beta * resp[r] * u * inv_std;
                                g[cb + d + i] -= w * beta * resp[r] * (u * u - 1.0);
                            }
                        }
                    }
                }
            }
        }
    }

    let value = match plan.coefficients {
        Coefficients::Uniform => per_term.iter().sum::<f64>() / per_term.len() as f64,
        Coefficients::Weighted(_) => weighted_value,
    };
    if let Some(g) = &grad {
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                component: i / (2 * d),
                detail: format!("non-finite gradient entry {i}"),
            });
        }
    }
    Ok(ElboEstimate {
        value,
        per_term,
        subset_trace: plan.subsets.to_vec(),
        p_evals,
        q_evals,
        grad,
    })
}

/// MISELBO `Σ_a π_a E_{q_a}[ln p(x, z) - ln Σ_{a'} π_{a'} q_{a'}(z)]` by
/// Gauss–Hermite quadrature centred and scaled on each component. `π` is
/// uniform unless the mixture carries weights. Limited to `d ≤ 2`.
pub fn exact_miselbo<M: JointModel>(
    model: &M,
    q: &MixtureParams,
    x: &M::Datum,
    quad_order: usize,
) -> Result<f64> {
    if q.dim() > 2 {
        return Err(Error::OracleScale(format!("exact MISELBO needs d <= 2, got {}", q.dim())));
    }
    if !(16..=MAX_QUAD_ORDER).contains(&quad_order) {
        return Err(contract(format!("quadrature order {quad_order} outside 16..={MAX_QUAD_ORDER}")));
    }
    if model.latent_dim() != q.dim() {
        return Err(contract("model and mixture latent dimensions differ"));
    }
    let rule = gauss_hermite(quad_order);
    let pi = q.normalized_weights();
    let mut total = 0.0;
    for (k, comp) in q.components().iter().enumerate() {
        let mut failure = None;
        let e = gaussian_expectation(&rule, comp, |z| match mixture_log_density(q, z, None) {
            Ok(lm) => model.log_joint(x, z) - lm,
            Err(err) => {
                failure.get_or_insert(err);
                f64::NAN
            }
        })?;
        if let Some(err) = failure {
            return Err(err);
        }
        total += pi[k] * e;
    }
    Ok(total)
}
