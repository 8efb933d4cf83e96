//! Funnel-prior toy model with an autoregressive Bernoulli likelihood.
//!
//! `z = (z1, z2)`, `z1 ~ N(0, 3)`, `z2 | z1 ~ N(0, e^{z1/2})`; every datum is
//! a binary vector whose i-th coordinate is Bernoulli with logit
//! `θ_i + Σ_{j<i} β^{i-j} x_j`, `θ = W z`, `W_{uv} ~ logNormal(0, 0.1)`.
//! All N data points share the one latent `z`.
//!
//! The second argument of each normal is read as a standard deviation
//! ([`ScaleConvention::Std`]) unless the variance reading is selected.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::joint::JointModel;
use crate::numerics::{log_sigmoid, log_sum_exp, sigmoid, RngStream, HALF_LN_2PI};

const GENERATE_STREAM: u64 = 0x746f_795f_6d6f_6465;

/// How to read the scale arguments of the funnel and of the log-normal weights.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleConvention {
    #[default]
    Std,
    Variance,
}

impl ScaleConvention {
    /// Standard deviation of z1.
    pub fn z1_std(self) -> f64 {
        match self {
            ScaleConvention::Std => 3.0,
            ScaleConvention::Variance => 3f64.sqrt(),
        }
    }

    /// `c` in `std(z2 | z1) = e^{c z1}`.
    pub fn z2_log_std_slope(self) -> f64 {
        match self {
            ScaleConvention::Std => 0.5,
            ScaleConvention::Variance => 0.25,
        }
    }

    /// Standard deviation of `ln W_{uv}`.
    pub fn weight_log_std(self) -> f64 {
        match self {
            ScaleConvention::Std => 0.1,
            ScaleConvention::Variance => 0.1f64.sqrt(),
        }
    }
}

/// Generation settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerateOptions {
    pub seed: u64,
    pub d_x: usize,
    pub n: usize,
    pub beta: f64,
    pub convention: ScaleConvention,
}

impl GenerateOptions {
    pub fn new(seed: u64, d_x: usize, n: usize) -> Self {
        Self { seed, d_x, n, beta: 0.1, convention: ScaleConvention::Std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawToyModel")]
pub struct ToyModel {
    #[serde(rename = "W")]
    w: Vec<[f64; 2]>,
    beta: f64,
    data: Vec<Vec<u8>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    z_true: Option<[f64; 2]>,
    convention: ScaleConvention,
    sequential_likelihood: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawToyModel {
    #[serde(rename = "W")]
    w: Vec<[f64; 2]>,
    beta: f64,
    data: Vec<Vec<u8>>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    z_true: Option<[f64; 2]>,
    #[serde(default)]
    convention: ScaleConvention,
    #[serde(default)]
    sequential_likelihood: bool,
}

impl TryFrom<RawToyModel> for ToyModel {
    type Error = Error;

    fn try_from(raw: RawToyModel) -> Result<Self> {
        let mut m = ToyModel::from_parts(raw.w, raw.beta, raw.data, raw.convention)?;
        m.seed = raw.seed;
        m.z_true = raw.z_true;
        m.sequential_likelihood = raw.sequential_likelihood;
        Ok(m)
    }
}

impl ToyModel {
    /// Builds a model from explicit parts. Rows of `w` are the `d_x` output
    /// coordinates; every datum must have length `d_x` and entries in {0, 1}.
    pub fn from_parts(
        w: Vec<[f64; 2]>,
        beta: f64,
        data: Vec<Vec<u8>>,
        convention: ScaleConvention,
    ) -> Result<Self> {
        if w.is_empty() {
            return Err(contract("W needs at least one row"));
        }
        if w.iter().flatten().any(|v| !v.is_finite()) || !beta.is_finite() {
            return Err(contract("W and beta must be finite"));
        }
        let d_x = w.len();
        for (n, x) in data.iter().enumerate() {
            if x.len() != d_x {
                return Err(contract(format!("datum {n} has length {} but d_x = {d_x}", x.len())));
            }
            if x.iter().any(|&b| b > 1) {
                return Err(contract(format!("datum {n} has a non-binary entry")));
            }
        }
        Ok(Self { w, beta, data, seed: None, z_true: None, convention, sequential_likelihood: false })
    }

    /// Draws W, a latent `z*` from the funnel prior and N data points.
    pub fn generate(seed: u64, d_x: usize, n: usize) -> Result<Self> {
        Self::generate_with(GenerateOptions::new(seed, d_x, n))
    }

    pub fn generate_with(opts: GenerateOptions) -> Result<Self> {
        if opts.d_x < 1 || opts.n < 1 {
            return Err(contract("d_x and N must both be at least 1"));
        }
        let mut rng = RngStream::new(opts.seed, GENERATE_STREAM);
        let conv = opts.convention;
        let w: Vec<[f64; 2]> = (0..opts.d_x)
            .map(|_| {
                let a = (conv.weight_log_std() * rng.standard_normal()).exp();
                let b = (conv.weight_log_std() * rng.standard_normal()).exp();
                [a, b]
            })
            .collect();
        let z1 = conv.z1_std() * rng.standard_normal();
        let z2 = (conv.z2_log_std_slope() * z1).exp() * rng.standard_normal();
        let mut model = Self::from_parts(w, opts.beta, Vec::new(), conv)?;
        let z = [z1, z2];
        model.data = (0..opts.n).map(|_| model.sample_datum(&z, &mut rng)).collect();
        model.seed = Some(opts.seed);
        model.z_true = Some(z);
        Ok(model)
    }

    /// Samples one binary vector coordinate by coordinate from `p(x | z)`.
    pub fn sample_datum(&self, z: &[f64], rng: &mut RngStream) -> Vec<u8> {
        let mut x = Vec::with_capacity(self.d_x());
        let mut carry = 0.0;
        for i in 0..self.d_x() {
            if i > 0 {
                carry = self.beta * (carry + x[i - 1] as f64);
            }
            let logit = self.theta(i, z) + carry;
            x.push(u8::from(rng.uniform() < sigmoid(logit)));
        }
        x
    }

    pub fn d_x(&self) -> usize {
        self.w.len()
    }

    pub fn d_z(&self) -> usize {
        2
    }

    pub fn n(&self) -> usize {
        self.data.len()
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn weights(&self) -> &[[f64; 2]] {
        &self.w
    }

    pub fn data(&self) -> &[Vec<u8>] {
        &self.data
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn z_true(&self) -> Option<[f64; 2]> {
        self.z_true
    }

    pub fn convention(&self) -> ScaleConvention {
        self.convention
    }

    pub fn sequential_likelihood(&self) -> bool {
        self.sequential_likelihood
    }

    /// Evaluate the autoregressive offsets with the explicit double sum
    /// instead of the running recursion.
    pub fn set_sequential_likelihood(&mut self, on: bool) {
        self.sequential_likelihood = on;
    }

    pub fn with_data(&self, data: Vec<Vec<u8>>) -> Result<Self> {
        let mut m = Self::from_parts(self.w.clone(), self.beta, data, self.convention)?;
        m.seed = self.seed;
        m.z_true = self.z_true;
        m.sequential_likelihood = self.sequential_likelihood;
        Ok(m)
    }

    #[inline]
    fn theta(&self, i: usize, z: &[f64]) -> f64 {
        self.w[i][0] * z[0] + self.w[i][1] * z[1]
    }

    /// `Σ_{j<i} β^{i-j} x_j` written out term by term.
    fn ar_offset_direct(&self, x: &[u8], i: usize) -> f64 {
        let mut acc = 0.0;
        for j in 0..i {
            acc += self.beta.powi((i - j) as i32) * x[j] as f64;
        }
        acc
    }

    /// Walks every coordinate of every datum, handing `(row, x_i, logit)` to `visit`.
    #[inline]
    fn for_each_logit(&self, data: &[Vec<u8>], z: &[f64], mut visit: impl FnMut(usize, u8, f64)) {
        for x in data {
            let mut carry = 0.0;
            for i in 0..x.len() {
                let offset = if self.sequential_likelihood {
                    self.ar_offset_direct(x, i)
                } else {
                    if i > 0 {
                        carry = self.beta * (carry + x[i - 1] as f64);
                    }
                    carry
                };
                visit(i, x[i], self.theta(i, z) + offset);
            }
        }
    }

    /// `∂²/∂z2² ln p(x, z)` for the evidence integrator.
    fn z2_curvature(&self, data: &[Vec<u8>], z: &[f64]) -> f64 {
        let c = self.convention.z2_log_std_slope();
        let mut h = -(-2.0 * c * z[0]).exp();
        self.for_each_logit(data, z, |i, _, logit| {
            let s = sigmoid(logit);
            h -= s * (1.0 - s) * self.w[i][1] * self.w[i][1];
        });
        h
    }
}

impl JointModel for ToyModel {
    type Datum = [Vec<u8>];

    fn latent_dim(&self) -> usize {
        2
    }

    fn log_prior(&self, z: &[f64]) -> f64 {
        let s1 = self.convention.z1_std();
        let c = self.convention.z2_log_std_slope();
        let u1 = z[0] / s1;
        let u2 = z[1] * (-c * z[0]).exp();
        -2.0 * HALF_LN_2PI - s1.ln() - 0.5 * u1 * u1 - c * z[0] - 0.5 * u2 * u2
    }

    fn log_likelihood(&self, x: &[Vec<u8>], z: &[f64]) -> f64 {
        let mut acc = 0.0;
        self.for_each_logit(x, z, |_, xi, logit| {
            acc += if xi == 1 { log_sigmoid(logit) } else { log_sigmoid(-logit) };
        });
        acc
    }

    fn log_prior_grad(&self, z: &[f64], grad: &mut [f64]) -> f64 {
        let s1 = self.convention.z1_std();
        let c = self.convention.z2_log_std_slope();
        let e = (-2.0 * c * z[0]).exp();
        grad[0] += -z[0] / (s1 * s1) - c + c * z[1] * z[1] * e;
        grad[1] += -z[1] * e;
        self.log_prior(z)
    }

    fn log_likelihood_grad(&self, x: &[Vec<u8>], z: &[f64], grad: &mut [f64]) -> f64 {
        let mut acc = 0.0;
        let (mut g0, mut g1) = (0.0, 0.0);
        self.for_each_logit(x, z, |i, xi, logit| {
            let r = if xi == 1 {
                acc += log_sigmoid(logit);
                1.0 - sigmoid(logit)
            } else {
                acc += log_sigmoid(-logit);
                -sigmoid(logit)
            };
            g0 += r * self.w[i][0];
            g1 += r * self.w[i][1];
        });
        grad[0] += g0;
        grad[1] += g1;
        acc
    }
}

/// Resolution of the evidence integrator: a uniform outer grid over z1 and,
/// for each z1, a trapezoid rule in z2 centred on the conditional mode and
/// spaced by its curvature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    /// Outer grid covers `[-half_width, half_width]` in z1.
    pub z1_half_width: f64,
    pub n_z1: usize,
    /// Inner nodes per conditional standard deviation in z2.
    pub z2_nodes_per_std: f64,
    /// Largest accepted change between a grid and its refinement.
    pub tolerance: f64,
}

impl GridSpec {
    pub fn for_model(model: &ToyModel) -> Self {
        Self {
            z1_half_width: 8.0 * model.convention.z1_std(),
            n_z1: 200,
            z2_nodes_per_std: 4.0,
            tolerance: 1e-4,
        }
    }

    pub fn refined(&self) -> Self {
        Self { n_z1: 2 * self.n_z1, z2_nodes_per_std: 2.0 * self.z2_nodes_per_std, ..*self }
    }
}

const INNER_DROP: f64 = 45.0;
const INNER_MAX_NODES: usize = 200_000;

/// `ln ∫ exp(ln p(x, z1, z2)) dz2` for one z1.
fn log_inner_integral(model: &ToyModel, data: &[Vec<u8>], z1: f64, nodes_per_std: f64) -> f64 {
    let lp = |z2: f64| model.log_joint(data, &[z1, z2]);
    let dlp = |z2: f64| {
        let mut g = [0.0; 2];
        model.log_prior_grad(&[z1, z2], &mut g);
        model.log_likelihood_grad(data, &[z1, z2], &mut g);
        g[1]
    };
    // Damped Newton on a log-concave function of z2.
    let mut z2 = 0.0;
    let mut f = lp(z2);
    for _ in 0..200 {
        let g = dlp(z2);
        let h = model.z2_curvature(data, &[z1, z2]);
        let mut step = -g / h;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = z2 + step;
            let fc = lp(cand);
            if fc >= f {
                z2 = cand;
                f = fc;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted || step.abs() < 1e-13 * z2.abs().max(1e-300) + 1e-300 {
            break;
        }
    }
    let sigma = 1.0 / (-model.z2_curvature(data, &[z1, z2])).sqrt();
    let h = sigma / nodes_per_std;
    // Walk out until the integrand has dropped far below the mode.
    let mut lo = 1usize;
    while f - lp(z2 - lo as f64 * h) < INNER_DROP && lo < INNER_MAX_NODES / 2 {
        lo = (lo * 2).max(lo + 1);
    }
    let mut hi = 1usize;
    while f - lp(z2 + hi as f64 * h) < INNER_DROP && hi < INNER_MAX_NODES / 2 {
        hi = (hi * 2).max(hi + 1);
    }
    let mut vals = Vec::with_capacity(lo + hi + 1);
    for k in -(lo as i64)..=(hi as i64) {
        vals.push(lp(z2 + k as f64 * h));
    }
    log_sum_exp(&vals).expect("finite integrand") + h.ln()
}

fn log_evidence_once(model: &ToyModel, data: &[Vec<u8>], spec: &GridSpec) -> f64 {
    let n = spec.n_z1.max(2);
    let h = 2.0 * spec.z1_half_width / (n - 1) as f64;
    let mut vals = Vec::with_capacity(n);
    for j in 0..n {
        let z1 = -spec.z1_half_width + j as f64 * h;
        let v = log_inner_integral(model, data, z1, spec.z2_nodes_per_std);
        // trapezoid end weights
        vals.push(if j == 0 || j == n - 1 { v - std::f64::consts::LN_2 } else { v });
    }
    log_sum_exp(&vals).expect("finite integrand") + h.ln()
}

/// `ln ∫∫ p(x, z) dz` over the model's own data. The grid is refined once;
/// if the two values differ by more than `spec.tolerance` the oracle fails.
pub fn log_evidence(model: &ToyModel, spec: &GridSpec) -> Result<f64> {
    log_evidence_of(model, model.data(), spec)
}

/// As [`log_evidence`] for an arbitrary set of data points sharing one latent.
pub fn log_evidence_of(model: &ToyModel, data: &[Vec<u8>], spec: &GridSpec) -> Result<f64> {
    let coarse = log_evidence_once(model, data, spec);
    let fine = log_evidence_once(model, data, &spec.refined());
    if !(coarse.is_finite() && fine.is_finite()) {
        return Err(Error::OracleConvergence("non-finite evidence integral".into()));
    }
    if (coarse - fine).abs() > spec.tolerance {
        return Err(Error::OracleConvergence(format!(
            "evidence changed by {:.3e} under refinement ({coarse} -> {fine})",
            (coarse - fine).abs()
        )));
    }
    Ok(fine)
}

/// Unnormalized log posterior on a regular grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorGrid {
    pub z1: Vec<f64>,
    pub z2: Vec<f64>,
    /// `values[i][j]` is the log joint at `(z1[i], z2[j])`.
    pub values: Vec<Vec<f64>>,
}

impl PosteriorGrid {
    pub fn argmax(&self) -> (f64, f64) {
        let mut best = (f64::NEG_INFINITY, 0, 0);
        for (i, row) in self.values.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v > best.0 {
                    best = (v, i, j);
                }
            }
        }
        (self.z1[best.1], self.z2[best.2])
    }

    /// Writes `z1,z2,log_density` rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "z1,z2,log_density")?;
        for (i, row) in self.values.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                writeln!(out, "{},{},{}", self.z1[i], self.z2[j], v)?;
            }
        }
        Ok(())
    }
}

/// Grid bounds `[lo, hi]` applied to both coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridBounds {
    pub lo: f64,
    pub hi: f64,
}

impl Default for GridBounds {
    fn default() -> Self {
        Self { lo: -9.0, hi: 9.0 }
    }
}

pub const DEFAULT_GRID_RESOLUTION: usize = 300;

pub fn posterior_grid(model: &ToyModel, bounds: GridBounds, resolution: usize) -> Result<PosteriorGrid> {
    posterior_grid_threaded(model, bounds, resolution, 1)
}

/// [`posterior_grid`] with rows split across up to `threads` workers. The
/// result does not depend on the thread count.
pub fn posterior_grid_threaded(
    model: &ToyModel,
    bounds: GridBounds,
    resolution: usize,
    threads: usize,
) -> Result<PosteriorGrid> {
    if resolution < 2 || !(bounds.hi > bounds.lo) || !bounds.lo.is_finite() || !bounds.hi.is_finite() {
        return Err(contract("grid needs resolution >= 2 and finite bounds with hi > lo"));
    }
    let axis: Vec<f64> = (0..resolution)
        .map(|i| bounds.lo + (bounds.hi - bounds.lo) * i as f64 / (resolution - 1) as f64)
        .collect();
    let row = |z1: f64| -> Vec<f64> { axis.iter().map(|&z2| model.log_joint(model.data(), &[z1, z2])).collect() };
    let mut values = vec![Vec::new(); resolution];
    let chunk = resolution.div_ceil(threads.max(1));
    std::thread::scope(|scope| {
        for (c, rows) in values.chunks_mut(chunk).enumerate() {
            let (axis, row) = (&axis, &row);
            scope.spawn(move || {
                for (i, slot) in rows.iter_mut().enumerate() {
                    *slot = row(axis[c * chunk + i]);
                }
            });
        }
    });
    Ok(PosteriorGrid { z1: axis.clone(), z2: axis, values })
}
