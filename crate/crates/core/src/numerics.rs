//! Shared math primitives: log-sum-exp, diagonal Gaussians and seeded,
//! splittable random streams.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

/// `0.5 * ln(2π)`.
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Stable `ln Σ exp(v_i)`, reduced in ascending index order.
///
/// `+inf` or NaN entries propagate; an all `-inf` input is a degenerate
/// mixture and is reported as an error.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(contract("log_sum_exp of an empty slice"));
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::DegenerateMixture);
    }
    if !max.is_finite() {
        return Ok(max);
    }
    let mut acc = 0.0;
    for &v in values {
        acc += (v - max).exp();
    }
    Ok(max + acc.ln())
}

/// Numerically stable `ln σ(x)`.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Diagonal Gaussian parameterized by its mean and per-coordinate log standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDiagGaussian")]
pub struct DiagGaussian {
    mean: Vec<f64>,
    log_std: Vec<f64>,
}

#[derive(Deserialize)]
struct RawDiagGaussian {
    mean: Vec<f64>,
    log_std: Vec<f64>,
}

impl TryFrom<RawDiagGaussian> for DiagGaussian {
    type Error = Error;

    fn try_from(raw: RawDiagGaussian) -> Result<Self> {
        DiagGaussian::new(raw.mean, raw.log_std)
    }
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self> {
        if mean.is_empty() {
            return Err(contract("gaussian dimension must be at least 1"));
        }
        if mean.len() != log_std.len() {
            return Err(contract(format!(
                "mean has {} entries but log_std has {}",
                mean.len(),
                log_std.len()
            )));
        }
        if let Some(i) = log_std.iter().position(|v| !v.is_finite()) {
            return Err(contract(format!("log_std[{i}] = {} is not finite", log_std[i])));
        }
        if let Some(i) = mean.iter().position(|v| !v.is_finite()) {
            return Err(contract(format!("mean[{i}] = {} is not finite", mean[i])));
        }
        Ok(Self { mean, log_std })
    }

    pub fn standard(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], log_std: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn log_std(&self) -> &[f64] {
        &self.log_std
    }

    pub fn std(&self, i: usize) -> f64 {
        self.log_std[i].exp()
    }

    /// Mutable access for optimizers. Callers must keep entries finite.
    pub(crate) fn parts_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.mean, &mut self.log_std)
    }
}

/// `Σ_i [ -½ ln 2π - log_std_i - ½ ((z_i - mean_i) / std_i)² ]`.
///
/// Panics if `z` and `g` disagree on dimension.
pub fn gaussian_log_pdf(g: &DiagGaussian, z: &[f64]) -> f64 {
    assert_eq!(z.len(), g.dim(), "gaussian_log_pdf: dimension mismatch");
    let mut acc = 0.0;
    for i in 0..z.len() {
        let ls = g.log_std[i];
        let u = (z[i] - g.mean[i]) * (-ls).exp();
        acc += -HALF_LN_2PI - ls - 0.5 * u * u;
    }
    acc
}

/// Seeded random stream. Streams with distinct `(seed, stream_id)` pairs
/// are independent ChaCha8 streams; replaying a pair reproduces the
/// sequence bit for bit.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self { seed, stream_id, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// A fresh child stream keyed on this stream's identity and `tag`.
    /// The parent's position does not matter.
    pub fn fork(&self, tag: u64) -> RngStream {
        RngStream::new(self.seed, splitmix64(self.stream_id ^ splitmix64(tag.wrapping_add(0x51_7cc1_b727_220a))))
    }

    /// Two-level fork, e.g. `(replicate, component)`.
    pub fn fork2(&self, a: u64, b: u64) -> RngStream {
        self.fork(a).fork(b)
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// `z = mean + exp(log_std) ⊙ eps` for a given noise vector.
pub fn reparam_from_eps(g: &DiagGaussian, eps: &[f64]) -> Vec<f64> {
    assert_eq!(eps.len(), g.dim(), "reparam_from_eps: dimension mismatch");
    eps.iter()
        .enumerate()
        .map(|(i, e)| g.mean[i] + g.log_std[i].exp() * e)
        .collect()
}

/// Draws `eps ~ N(0, I)` from `rng` and returns `(z, eps)`.
pub fn reparam_sample(g: &DiagGaussian, rng: &mut RngStream) -> (Vec<f64>, Vec<f64>) {
    let eps: Vec<f64> = (0..g.dim()).map(|_| rng.standard_normal()).collect();
    (reparam_from_eps(g, &eps), eps)
}
