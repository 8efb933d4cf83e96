//! Brute-force reference machinery: Gauss–Hermite quadrature, exact
//! expectations of the subset estimators by enumerating every subset,
//! central finite differences and a closed-form linear-Gaussian ELBO.
//!
//! Nothing here calls into the estimator implementations. Mixture
//! denominators are summed directly so that the estimators can be checked
//! against an independent route.

use std::f64::consts::PI;

use crate::error::{contract, Error, Result};
use crate::estimators::{Denominator, EstimatorConfig, EstimatorKind};
use crate::joint::JointModel;
use crate::numerics::{gaussian_log_pdf, DiagGaussian, HALF_LN_2PI};
use crate::subsets::{enumerate_subsets, SubsetDraw};
use crate::vfamily::MixtureParams;

/// Gauss–Hermite rule for `∫ e^{-t²} f(t) dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub order: usize,
}

/// Largest order [`gauss_hermite`] supports; the root iteration loses
/// track of the interior roots a little below 200.
pub const MAX_QUAD_ORDER: usize = 160;

/// Nodes and weights by Newton iteration on the orthonormal Hermite
/// recurrence, seeded with the usual asymptotic root estimates.
/// Panics outside `1..=MAX_QUAD_ORDER`.
pub fn gauss_hermite(order: usize) -> QuadratureRule {
    assert!((1..=MAX_QUAD_ORDER).contains(&order), "quadrature order {order} outside 1..={MAX_QUAD_ORDER}");
    let n = order;
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let pim4 = PI.powf(-0.25);
    let nf = n as f64;
    let mut z = 0.0f64;
    for i in 0..n.div_ceil(2) {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..200 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    QuadratureRule { nodes: x, weights: w, order }
}

/// `E_{z ~ g}[f(z)]` by a tensor-product Hermite rule, standardized on `g`.
/// Supports one- and two-dimensional `g`.
pub fn gaussian_expectation<F>(rule: &QuadratureRule, g: &DiagGaussian, mut f: F) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let scale: Vec<f64> = (0..g.dim()).map(|i| std::f64::consts::SQRT_2 * g.std(i)).collect();
    let m = g.mean();
    match g.dim() {
        1 => {
            let mut acc = 0.0;
            for (t, w) in rule.nodes.iter().zip(&rule.weights) {
                acc += w * f(&[m[0] + scale[0] * t]);
            }
            Ok(acc / PI.sqrt())
        }
        2 => {
            let mut acc = 0.0;
            let mut z = [0.0; 2];
            for (t0, w0) in rule.nodes.iter().zip(&rule.weights) {
                z[0] = m[0] + scale[0] * t0;
                let mut inner = 0.0;
                for (t1, w1) in rule.nodes.iter().zip(&rule.weights) {
                    z[1] = m[1] + scale[1] * t1;
                    inner += w1 * f(&z);
                }
                acc += w0 * inner;
            }
            Ok(acc / PI)
        }
        d => Err(Error::OracleScale(format!(
            "tensor quadrature supports d <= 2, got d = {d}"
        ))),
    }
}

/// `ln Σ_k c_k q_k(z)` with explicit coefficients, summed directly.
fn ln_weighted_density(q: &MixtureParams, z: &[f64], members: &[usize], coeff: &[f64]) -> f64 {
    let logs: Vec<f64> = members.iter().map(|&k| gaussian_log_pdf(q.component(k), z)).collect();
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = logs.iter().zip(coeff).map(|(l, c)| c * (l - top).exp()).sum();
    top + s.ln()
}

fn check_oracle_scale(q: &MixtureParams, quad_order: usize) -> Result<()> {
    if q.dim() > 2 {
        return Err(Error::OracleScale(format!("latent dimension {} > 2", q.dim())));
    }
    if !(2..=MAX_QUAD_ORDER).contains(&quad_order) {
        return Err(contract(format!("quadrature order must lie in 2..={MAX_QUAD_ORDER}")));
    }
    Ok(())
}

/// `E_{q_k}[ln p(x, z) - ln D(z)]` where `D = Σ_{j ∈ members} c_j q_j`.
fn component_term<M: JointModel>(
    model: &M,
    q: &MixtureParams,
    x: &M::Datum,
    k: usize,
    members: &[usize],
    coeff: &[f64],
    rule: &QuadratureRule,
) -> Result<f64> {
    gaussian_expectation(rule, q.component(k), |z| {
        model.log_joint(x, z) - ln_weighted_density(q, z, members, coeff)
    })
}

/// Exact expectation of a uniform-mixture estimator (A2A, S2A or S2S)
/// over both the subset draw and the latent draws: every subset is
/// enumerated with probability `1 / C(A, S)`, and each inner expectation is
/// a Gauss–Hermite integral. Replicate and latent counts (M, J) do not
/// change the expectation; `L > 1` is not supported.
pub fn expected_estimator_value<M: JointModel>(
    model: &M,
    q: &MixtureParams,
    x: &M::Datum,
    cfg: &EstimatorConfig,
    quad_order: usize,
) -> Result<f64> {
    expected_value_with_denominator(model, q, x, cfg, quad_order, cfg.kind.denominator())
}

/// [`expected_estimator_value`] with the denominator rule overridden, the
/// oracle-side counterpart of `estimate_with_denominator`.
#[doc(hidden)]
pub fn expected_value_with_denominator<M: JointModel>(
    model: &M,
    q: &MixtureParams,
    x: &M::Datum,
    cfg: &EstimatorConfig,
    quad_order: usize,
    den: Denominator,
) -> Result<f64> {
    cfg.validate()?;
    check_oracle_scale(q, quad_order)?;
    if cfg.a != q.a() {
        return Err(contract(format!("config A = {} but mixture has {}", cfg.a, q.a())));
    }
    if !q.is_uniform() {
        return Err(contract("uniform-estimator oracle needs a uniform mixture"));
    }
    if cfg.l != 1 {
        return Err(contract("oracle expectations are defined for L = 1 only"));
    }
    let rule = gauss_hermite(quad_order);
    let a = q.a();
    let all: Vec<usize> = (0..a).collect();
    let full_coeff = vec![1.0 / a as f64; a];
    let subsets = match cfg.kind {
        EstimatorKind::A2A => vec![SubsetDraw::full(a)],
        EstimatorKind::S2A | EstimatorKind::S2S => enumerate_subsets(a, cfg.s)?,
    };

    let mut full_terms: Vec<Option<f64>> = vec![None; a];
    let mut total = 0.0;
    for sub in &subsets {
        let members = sub.indices();
        let sub_coeff = vec![1.0 / members.len() as f64; members.len()];
        let mut acc = 0.0;
        for &k in members {
            let term = match den {
                Denominator::Subset => component_term(model, q, x, k, members, &sub_coeff, &rule)?,
                Denominator::Full => match full_terms[k] {
                    Some(v) => v,
                    None => {
                        let v = component_term(model, q, x, k, &all, &full_coeff, &rule)?;
                        full_terms[k] = Some(v);
                        v
                    }
                },
            };
            acc += term;
        }
        total += acc / members.len() as f64;
    }
    Ok(total / subsets.len() as f64)
}

/// Exact expectation of the weighted Some-to-All estimator
/// `Σ_k u_k H_k E[ln p(x,z_k) / Σ_j (w_j/w_A) q_j(z_k)]` with
/// `u_k = w_k / (w_A E[H_k])`, under uniform S-subsets. Inclusion
/// probabilities are counted from the enumeration itself.
pub fn expected_weighted_s2a<M: JointModel>(
    model: &M,
    q: &MixtureParams,
    x: &M::Datum,
    s: usize,
    quad_order: usize,
) -> Result<f64> {
    check_oracle_scale(q, quad_order)?;
    let weights = q
        .weights()
        .ok_or_else(|| contract("weighted oracle needs explicit weights"))?;
    let a = q.a();
    let total_w: f64 = weights.iter().sum();
    let subsets = enumerate_subsets(a, s)?;
    let n_sub = subsets.len() as f64;
    let mut inclusion = vec![0.0; a];
    for sub in &subsets {
        for &k in sub.indices() {
            inclusion[k] += 1.0 / n_sub;
        }
    }
    let rule = gauss_hermite(quad_order);
    let all: Vec<usize> = (0..a).collect();
    let coeff: Vec<f64> = weights.iter().map(|w| w / total_w).collect();
    let terms = (0..a)
        .map(|k| component_term(model, q, x, k, &all, &coeff, &rule))
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    for sub in &subsets {
        let mut acc = 0.0;
        for &k in sub.indices() {
            let u = weights[k] / (total_w * inclusion[k]);
            acc += u * terms[k];
        }
        total += acc / n_sub;
    }
    Ok(total)
}

/// `E_φ[KL(subset mixture ‖ full mixture)]` over uniform S-subsets.
pub fn expected_subset_kl(q: &MixtureParams, s: usize, quad_order: usize) -> Result<f64> {
    check_oracle_scale(q, quad_order)?;
    if !q.is_uniform() {
        return Err(contract("subset KL oracle needs a uniform mixture"));
    }
    let a = q.a();
    let rule = gauss_hermite(quad_order);
    let all: Vec<usize> = (0..a).collect();
    let full_coeff = vec![1.0 / a as f64; a];
    let subsets = enumerate_subsets(a, s)?;
    let mut total = 0.0;
    for sub in &subsets {
        let members = sub.indices();
        let sub_coeff = vec![1.0 / members.len() as f64; members.len()];
        let mut acc = 0.0;
        for &k in members {
            acc += gaussian_expectation(&rule, q.component(k), |z| {
                ln_weighted_density(q, z, members, &sub_coeff)
                    - ln_weighted_density(q, z, &all, &full_coeff)
            })?;
        }
        total += acc / members.len() as f64;
    }
    Ok(total / subsets.len() as f64)
}

/// Central differences `(f(p + h e_i) - f(p - h e_i)) / 2h`.
pub fn finite_diff_gradient<F>(mut f: F, p: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut work = p.to_vec();
    (0..p.len())
        .map(|i| {
            work[i] = p[i] + h;
            let up = f(&work);
            work[i] = p[i] - h;
            let down = f(&work);
            work[i] = p[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// One-dimensional linear-Gaussian joint: `z ~ N(prior_mean, prior_std²)`,
/// `x | z ~ N(z, noise_std²)`. The datum is the scalar observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearGaussian {
    pub prior_mean: f64,
    pub prior_std: f64,
    pub noise_std: f64,
}

impl LinearGaussian {
    pub fn prior(&self) -> DiagGaussian {
        DiagGaussian::new(vec![self.prior_mean], vec![self.prior_std.ln()])
            .expect("finite prior")
    }

    pub fn log_evidence(&self, obs: f64) -> f64 {
        let var = self.prior_std.powi(2) + self.noise_std.powi(2);
        -HALF_LN_2PI - 0.5 * var.ln() - 0.5 * (obs - self.prior_mean).powi(2) / var
    }

    pub fn posterior(&self, obs: f64) -> DiagGaussian {
        let prec = self.prior_std.powi(-2) + self.noise_std.powi(-2);
        let var = 1.0 / prec;
        let mean = var * (self.prior_mean * self.prior_std.powi(-2) + obs * self.noise_std.powi(-2));
        DiagGaussian::new(vec![mean], vec![0.5 * var.ln()]).expect("finite posterior")
    }
}

impl JointModel for LinearGaussian {
    type Datum = f64;

    fn latent_dim(&self) -> usize {
        1
    }

    fn log_prior(&self, z: &[f64]) -> f64 {
        let u = (z[0] - self.prior_mean) / self.prior_std;
        -HALF_LN_2PI - self.prior_std.ln() - 0.5 * u * u
    }

    fn log_likelihood(&self, x: &f64, z: &[f64]) -> f64 {
        let u = (x - z[0]) / self.noise_std;
        -HALF_LN_2PI - self.noise_std.ln() - 0.5 * u * u
    }

    fn log_prior_grad(&self, z: &[f64], grad: &mut [f64]) -> f64 {
        grad[0] -= (z[0] - self.prior_mean) / self.prior_std.powi(2);
        self.log_prior(z)
    }

    fn log_likelihood_grad(&self, x: &f64, z: &[f64], grad: &mut [f64]) -> f64 {
        grad[0] += (x - z[0]) / self.noise_std.powi(2);
        self.log_likelihood(x, z)
    }
}

/// Closed-form `E_q[ln p(x, z)] + H(q)` for the 1-D linear-Gaussian joint.
pub fn linear_gaussian_elbo(
    prior: &DiagGaussian,
    likelihood_noise: f64,
    observation: f64,
    q: &DiagGaussian,
) -> f64 {
    assert!(prior.dim() == 1 && q.dim() == 1, "linear_gaussian_elbo is one-dimensional");
    let (m0, s0) = (prior.mean()[0], prior.std(0));
    let (mq, sq) = (q.mean()[0], q.std(0));
    let sn = likelihood_noise;
    let e_prior = -HALF_LN_2PI - s0.ln() - ((mq - m0).powi(2) + sq * sq) / (2.0 * s0 * s0);
    let e_lik = -HALF_LN_2PI - sn.ln() - ((observation - mq).powi(2) + sq * sq) / (2.0 * sn * sn);
    let entropy = HALF_LN_2PI + 0.5 + sq.ln();
    e_prior + e_lik + entropy
}
