//! Mixture variational family: A diagonal-Gaussian components with uniform
//! or fixed positive weights.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::numerics::{gaussian_log_pdf, log_sum_exp, DiagGaussian, RngStream};
use crate::subsets::SubsetDraw;

/// Mixture of diagonal Gaussians. Absent weights mean a uniform mixture.
///
/// The flat parameter layout used by optimizers is, per component,
/// `[mean_0..mean_{d-1}, log_std_0..log_std_{d-1}]`, components in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMixture")]
pub struct MixtureParams {
    components: Vec<DiagGaussian>,
    #[serde(skip_serializing_if = "Option::is_none")]
    weights: Option<Vec<f64>>,
}

#[derive(Deserialize)]
struct RawMixture {
    components: Vec<DiagGaussian>,
    #[serde(default)]
    weights: Option<Vec<f64>>,
}

impl TryFrom<RawMixture> for MixtureParams {
    type Error = Error;

    fn try_from(raw: RawMixture) -> Result<Self> {
        MixtureParams::new(raw.components, raw.weights)
    }
}

impl MixtureParams {
    pub fn new(components: Vec<DiagGaussian>, weights: Option<Vec<f64>>) -> Result<Self> {
        let Some(first) = components.first() else {
            return Err(contract("a mixture needs at least one component"));
        };
        let d = first.dim();
        if let Some(k) = components.iter().position(|c| c.dim() != d) {
            return Err(contract(format!(
                "component {k} has dimension {} but component 0 has {d}",
                components[k].dim()
            )));
        }
        if let Some(w) = &weights {
            if w.len() != components.len() {
                return Err(contract(format!(
                    "{} weights for {} components",
                    w.len(),
                    components.len()
                )));
            }
            if let Some(k) = w.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(contract(format!("weight {k} = {} is not positive and finite", w[k])));
            }
        }
        Ok(Self { components, weights })
    }

    pub fn uniform(components: Vec<DiagGaussian>) -> Result<Self> {
        Self::new(components, None)
    }

    /// Toy initialization: means ~ N(0, 1), log_std = 0.
    pub fn init_standard(a: usize, d: usize, rng: &mut RngStream) -> Result<Self> {
        let comps = (0..a)
            .map(|_| {
                let mean = (0..d).map(|_| rng.standard_normal()).collect();
                DiagGaussian::new(mean, vec![0.0; d])
            })
            .collect::<Result<Vec<_>>>()?;
        Self::uniform(comps)
    }

    pub fn a(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn components(&self) -> &[DiagGaussian] {
        &self.components
    }

    pub fn component(&self, k: usize) -> &DiagGaussian {
        &self.components[k]
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    pub fn is_uniform(&self) -> bool {
        self.weights.is_none()
    }

    /// Normalized weights `w_k / w_A` (uniform gives `1/A`).
    pub fn normalized_weights(&self) -> Vec<f64> {
        match &self.weights {
            None => vec![1.0 / self.a() as f64; self.a()],
            Some(w) => {
                let total: f64 = w.iter().sum();
                w.iter().map(|v| v / total).collect()
            }
        }
    }

    /// Log mixing coefficients over `indices`, renormalized to sum to one.
    pub fn log_coefficients(&self, indices: &[usize]) -> Vec<f64> {
        match &self.weights {
            None => vec![-(indices.len() as f64).ln(); indices.len()],
            Some(w) => {
                let total: f64 = indices.iter().map(|&k| w[k]).sum();
                indices.iter().map(|&k| (w[k] / total).ln()).collect()
            }
        }
    }

    pub fn num_params(&self) -> usize {
        2 * self.a() * self.dim()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for c in &self.components {
            out.extend_from_slice(c.mean());
            out.extend_from_slice(c.log_std());
        }
        out
    }

    /// Overwrites means and log-stds from a flat vector in the layout above.
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(contract(format!(
                "flat vector has {} entries, expected {}",
                flat.len(),
                self.num_params()
            )));
        }
        if let Some(i) = flat.iter().position(|v| !v.is_finite()) {
            return Err(contract(format!("flat parameter {i} is not finite")));
        }
        let d = self.dim();
        for (k, c) in self.components.iter_mut().enumerate() {
            let (mean, log_std) = c.parts_mut();
            mean.copy_from_slice(&flat[2 * d * k..2 * d * k + d]);
            log_std.copy_from_slice(&flat[2 * d * k + d..2 * d * (k + 1)]);
        }
        Ok(())
    }

    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        let mut out = self.clone();
        out.set_flat(flat)?;
        Ok(out)
    }

    fn check_point(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dim() {
            return Err(contract(format!(
                "point has dimension {} but the mixture has {}",
                z.len(),
                self.dim()
            )));
        }
        Ok(())
    }
}

/// `ln q_k(z)` for every component, in index order.
pub fn component_entropy_terms(params: &MixtureParams, z: &[f64]) -> Result<Vec<f64>> {
    params.check_point(z)?;
    Ok(params.components.iter().map(|c| gaussian_log_pdf(c, z)).collect())
}

/// Log density of the mixture restricted to `over` (all components when
/// `None`), with weights renormalized over the retained components.
///
/// Terms are reduced in ascending component order, so the full subset and
/// `None` give bitwise identical results.
pub fn mixture_log_density(
    params: &MixtureParams,
    z: &[f64],
    over: Option<&SubsetDraw>,
) -> Result<f64> {
    params.check_point(z)?;
    let full;
    let indices = match over {
        Some(sub) => {
            if sub.a() != params.a() {
                return Err(contract(format!(
                    "subset drawn for A = {} but the mixture has {} components",
                    sub.a(),
                    params.a()
                )));
            }
            sub.indices()
        }
        None => {
            full = (0..params.a()).collect::<Vec<_>>();
            &full
        }
    };
    let coeffs = params.log_coefficients(indices);
    let terms: Vec<f64> = indices
        .iter()
        .zip(&coeffs)
        .map(|(&k, lc)| lc + gaussian_log_pdf(&params.components[k], z))
        .collect();
    log_sum_exp(&terms)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(m: f64, ls: f64) -> DiagGaussian {
        DiagGaussian::new(vec![m], vec![ls]).unwrap()
    }

    #[test]
    fn single_component_is_plain_density() {
        let p = MixtureParams::uniform(vec![g(0.3, -0.2)]).unwrap();
        let z = [1.1];
        assert_eq!(
            mixture_log_density(&p, &z, None).unwrap(),
            gaussian_log_pdf(p.component(0), &z)
        );
        assert_eq!(component_entropy_terms(&p, &z).unwrap().len(), 1);
    }

    #[test]
    fn duplicate_components_collapse() {
        let p = MixtureParams::uniform(vec![g(0.3, -0.2), g(0.3, -0.2)]).unwrap();
        let z = [0.7];
        let lhs = mixture_log_density(&p, &z, None).unwrap();
        assert!((lhs - gaussian_log_pdf(p.component(0), &z)).abs() < 1e-15);
    }

    #[test]
    fn subset_density_matches_direct_sum() {
        let p = MixtureParams::uniform(vec![g(-1.0, 0.1), g(0.5, -0.3), g(2.0, 0.4)]).unwrap();
        let sub = SubsetDraw::new(vec![0, 2], 3).unwrap();
        for &z in &[-2.0, 0.0, 1.3, 3.5] {
            let direct = 0.5
                * (gaussian_log_pdf(p.component(0), &[z]).exp()
                    + gaussian_log_pdf(p.component(2), &[z]).exp());
            let got = mixture_log_density(&p, &[z], Some(&sub)).unwrap();
            assert!((got - direct.ln()).abs() < 1e-12 * direct.ln().abs().max(1.0));
        }
    }

    #[test]
    fn full_subset_is_bitwise_full() {
        let p = MixtureParams::uniform(vec![g(-1.0, 0.1), g(0.5, -0.3), g(2.0, 0.4)]).unwrap();
        let full = SubsetDraw::full(3);
        for &z in &[-2.0, 0.0, 1.3] {
            assert_eq!(
                mixture_log_density(&p, &[z], Some(&full)).unwrap().to_bits(),
                mixture_log_density(&p, &[z], None).unwrap().to_bits()
            );
        }
    }

    #[test]
    fn terms_reduce_to_density_and_permute() {
        let comps = vec![g(-1.0, 0.1), g(0.5, -0.3), g(2.0, 0.4)];
        let p = MixtureParams::uniform(comps.clone()).unwrap();
        let z = [0.25];
        let terms = component_entropy_terms(&p, &z).unwrap();
        let shifted: Vec<f64> = terms.iter().map(|t| t - 3f64.ln()).collect();
        let lse = log_sum_exp(&shifted).unwrap();
        assert!((lse - mixture_log_density(&p, &z, None).unwrap()).abs() < 1e-14);

        let perm = MixtureParams::uniform(vec![comps[2].clone(), comps[0].clone(), comps[1].clone()])
            .unwrap();
        let pt = component_entropy_terms(&perm, &z).unwrap();
        assert_eq!(pt, vec![terms[2], terms[0], terms[1]]);
        let d0 = mixture_log_density(&p, &z, None).unwrap();
        let d1 = mixture_log_density(&perm, &z, None).unwrap();
        assert!((d0 - d1).abs() < 1e-14);
    }

    #[test]
    fn weighted_density_matches_direct_sum() {
        let p = MixtureParams::new(vec![g(-1.0, 0.1), g(0.5, -0.3), g(2.0, 0.4)], Some(vec![1.0, 2.0, 3.0]))
            .unwrap();
        let z = [0.9];
        let direct: f64 = (0..3)
            .map(|k| (k as f64 + 1.0) / 6.0 * gaussian_log_pdf(p.component(k), &z).exp())
            .sum();
        assert!((mixture_log_density(&p, &z, None).unwrap() - direct.ln()).abs() < 1e-13);
    }

    #[test]
    fn validation() {
        assert!(MixtureParams::uniform(vec![]).is_err());
        assert!(MixtureParams::new(vec![g(0.0, 0.0)], Some(vec![0.0])).is_err());
        assert!(MixtureParams::new(vec![g(0.0, 0.0)], Some(vec![1.0, 1.0])).is_err());
        let mixed = vec![g(0.0, 0.0), DiagGaussian::standard(2)];
        assert!(MixtureParams::uniform(mixed).is_err());
        let p = MixtureParams::uniform(vec![g(0.0, 0.0)]).unwrap();
        assert!(mixture_log_density(&p, &[0.0, 1.0], None).is_err());
        assert!(mixture_log_density(&p, &[0.0], Some(&SubsetDraw::full(2))).is_err());
    }

    #[test]
    fn json_round_trip_and_flat_layout() {
        let p = MixtureParams::new(
            vec![
                DiagGaussian::new(vec![1.0, 2.0], vec![0.1, 0.2]).unwrap(),
                DiagGaussian::new(vec![3.0, 4.0], vec![0.3, 0.4]).unwrap(),
            ],
            Some(vec![1.0, 3.0]),
        )
        .unwrap();
        let s = serde_json::to_string(&p).unwrap();
        assert!(s.contains("\"components\"") && s.contains("\"log_std\"") && s.contains("\"weights\""));
        let back: MixtureParams = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
        assert_eq!(p.to_flat(), vec![1.0, 2.0, 0.1, 0.2, 3.0, 4.0, 0.3, 0.4]);
        let q = p.with_flat(&[0.0; 8]).unwrap();
        assert_eq!(q.component(1).mean(), &[0.0, 0.0]);
        let uniform: MixtureParams =
            serde_json::from_str(r#"{"components":[{"mean":[0.0],"log_std":[0.0]}]}"#).unwrap();
        assert!(uniform.is_uniform());
    }
}
