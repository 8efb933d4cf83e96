//! Adam, KL warm-up and the optimization loops for a plain mixture and for
//! the amortized mixture encoder.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::estimators::{
    draw_subsets, estimate, estimate_iw_miselbo, estimate_with_subsets, exact_miselbo, EstimatorConfig,
    EvalOptions,
};
use crate::joint::JointModel;
use crate::nnet::{InjectionMode, Misvae, Tape};
use crate::numerics::RngStream;
use crate::toymodel::ToyModel;
use crate::vfamily::MixtureParams;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

const TRAIN_STREAM: u64 = 0x7472_6169_6e00;
const EVAL_STREAM: u64 = 0x6576_616c_0000;
const INIT_TAG: u64 = u64::MAX - 1;
const BATCH_TAG: u64 = u64::MAX - 2;

/// Quadrature order used for the exact end-of-run MISELBO.
pub const FINAL_QUAD_ORDER: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { first_moment: vec![0.0; n], second_moment: vec![0.0; n], step: 0 }
    }
}

/// One bias-corrected Adam update, descending on `grads`. `name` labels a
/// parameter index in the error raised for a non-finite gradient; nothing is
/// modified in that case.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    name: impl Fn(usize) -> String,
) -> Result<()> {
    if params.len() != grads.len() || state.first_moment.len() != params.len() {
        return Err(contract(format!(
            "Adam shapes differ: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric { component: i, detail: format!("non-finite gradient for {}", name(i)) });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        let m = ADAM_BETA1 * state.first_moment[i] + (1.0 - ADAM_BETA1) * g;
        let v = ADAM_BETA2 * state.second_moment[i] + (1.0 - ADAM_BETA2) * g * g;
        state.first_moment[i] = m;
        state.second_moment[i] = v;
        params[i] -= lr * (m / c1) / ((v / c2).sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// Linear ramp `min(1, epoch / warmup)`; a zero warm-up is always 1.
pub fn kl_weight(epoch: usize, warmup: usize) -> f64 {
    if warmup == 0 {
        1.0
    } else {
        (epoch as f64 / warmup as f64).min(1.0)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    PlainMixture,
    Misvae,
}

fn default_batch_size() -> usize {
    0
}

fn default_eval_every() -> usize {
    1000
}

fn default_eval_l() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub estimator: EstimatorConfig,
    pub learning_rate: f64,
    pub iterations: usize,
    /// Data points per step; 0 means the whole dataset.
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub kl_warmup_epochs: usize,
    pub seed: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(rename = "eval_L", default = "default_eval_l")]
    pub eval_l: usize,
    #[serde(default)]
    pub injection: InjectionMode,
}

impl TrainConfig {
    pub fn new(estimator: EstimatorConfig, learning_rate: f64, iterations: usize, seed: u64) -> Self {
        Self {
            estimator,
            learning_rate,
            iterations,
            batch_size: 0,
            kl_warmup_epochs: 0,
            seed,
            eval_every: default_eval_every(),
            eval_l: default_eval_l(),
            injection: InjectionMode::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.estimator.validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(contract(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.iterations < 1 {
            return Err(contract("iterations must be at least 1"));
        }
        if self.eval_every < 1 || self.eval_l < 1 {
            return Err(contract("eval_every and eval_L must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub iteration: usize,
    /// Cumulative training wall time in seconds, evaluation passes excluded.
    pub time: f64,
    pub elbo: f64,
    pub eval_miselbo: Option<f64>,
    pub p_evals: u64,
    pub q_evals: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub rows: Vec<RunRow>,
}

pub const RUN_LOG_HEADER: &str = "iteration,Time,ELBO,eval_miselbo,p_evals,q_evals";

impl RunLog {
    /// CSV with one row per iteration; `eval_miselbo` is blank between evaluations.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{RUN_LOG_HEADER}")?;
        for r in &self.rows {
            let eval = r.eval_miselbo.map(|v| v.to_string()).unwrap_or_default();
            writeln!(out, "{},{},{},{},{},{}", r.iteration, r.time, r.elbo, eval, r.p_evals, r.q_evals)?;
        }
        Ok(())
    }

    pub fn last(&self) -> Option<&RunRow> {
        self.rows.last()
    }

    pub fn last_eval(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.eval_miselbo)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Trained {
    PlainMixture { params: MixtureParams },
    Misvae { network: Misvae },
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub trained: Trained,
    pub log: RunLog,
    /// MISELBO of the final parameters by quadrature, summed over data for
    /// the encoder. `None` when the latent dimension is above 2.
    pub final_miselbo: Option<f64>,
}

struct Tracker {
    log: RunLog,
    clock: f64,
    p: u64,
    q: u64,
}

impl Tracker {
    fn new() -> Self {
        Self { log: RunLog::default(), clock: 0.0, p: 0, q: 0 }
    }

    fn record(&mut self, iteration: usize, elapsed: f64, elbo: f64, eval: Option<f64>, p: u64, q: u64) {
        self.clock += elapsed;
        self.p += p;
        self.q += q;
        self.log.rows.push(RunRow {
            iteration,
            time: self.clock,
            elbo,
            eval_miselbo: eval,
            p_evals: self.p,
            q_evals: self.q,
        });
    }
}

fn is_eval_step(cfg: &TrainConfig, it: usize) -> bool {
    (it + 1).is_multiple_of(cfg.eval_every) || it + 1 == cfg.iterations
}

fn at(iteration: usize) -> impl Fn(Error) -> Error {
    move |e| Error::AtIteration { iteration, source: Box::new(e) }
}

fn check_finite(params: &[f64], name: impl Fn(usize) -> String) -> Result<()> {
    match params.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Numeric { component: i, detail: format!("{} became non-finite", name(i)) }),
        None => Ok(()),
    }
}

fn mixture_param_name(d: usize) -> impl Fn(usize) -> String {
    move |i| {
        let (k, r) = (i / (2 * d), i % (2 * d));
        if r < d {
            format!("component {k} mean[{r}]")
        } else {
            format!("component {k} log_std[{}]", r - d)
        }
    }
}

/// Fits a free-parameter mixture to one datum of `model`. `init` defaults to
/// means from N(0, 1) and unit scales.
pub fn fit_mixture<M: JointModel>(
    model: &M,
    x: &M::Datum,
    cfg: &TrainConfig,
    init: Option<MixtureParams>,
) -> Result<FitOutput> {
    cfg.validate()?;
    let root = RngStream::new(cfg.seed, TRAIN_STREAM);
    let eval_root = RngStream::new(cfg.seed, EVAL_STREAM);
    let d = model.latent_dim();
    let mut q = match init {
        Some(q) => q,
        None => MixtureParams::init_standard(cfg.estimator.a, d, &mut root.fork(INIT_TAG))?,
    };
    let mut flat = q.to_flat();
    let mut adam = AdamState::new(flat.len());
    let mut tracker = Tracker::new();
    let name = mixture_param_name(d);
    for it in 0..cfg.iterations {
        let start = Instant::now();
        let opts = EvalOptions { gradient: true, kl_weight: kl_weight(it, cfg.kl_warmup_epochs) };
        let est = estimate(model, &q, x, &cfg.estimator, &root.fork(it as u64), &opts).map_err(at(it))?;
        let grad: Vec<f64> = est.grad.as_deref().unwrap_or_default().iter().map(|g| -g).collect();
        adam_step(&mut flat, &grad, &mut adam, cfg.learning_rate, &name).map_err(at(it))?;
        check_finite(&flat, &name).map_err(at(it))?;
        q.set_flat(&flat).map_err(at(it))?;
        let elapsed = start.elapsed().as_secs_f64();
        let eval = if is_eval_step(cfg, it) {
            Some(estimate_iw_miselbo(model, &q, x, cfg.eval_l, &eval_root.fork(it as u64)).map_err(at(it))?.value)
        } else {
            None
        };
        tracker.record(it + 1, elapsed, est.value, eval, est.p_evals, est.q_evals);
    }
    let final_miselbo = if d <= 2 { Some(exact_miselbo(model, &q, x, FINAL_QUAD_ORDER)?) } else { None };
    Ok(FitOutput { trained: Trained::PlainMixture { params: q }, log: tracker.log, final_miselbo })
}

/// Value and network gradient of the batch-averaged estimator for the
/// encoder. Each datum is its own observation with its own latent; the
/// M subsets come from `rng` and are shared by the whole batch.
pub fn misvae_objective(
    net: &Misvae,
    model: &ToyModel,
    batch: &[usize],
    cfg: &EstimatorConfig,
    rng: &RngStream,
    kl: f64,
) -> Result<(f64, Vec<f64>, u64, u64)> {
    if batch.is_empty() {
        return Err(contract("empty batch"));
    }
    let subsets = draw_subsets(cfg, rng)?;
    let opts = EvalOptions { gradient: true, kl_weight: kl };
    let scale = 1.0 / batch.len() as f64;
    let mut grad = vec![0.0; net.num_params()];
    let (mut value, mut p, mut q) = (0.0, 0u64, 0u64);
    for &n in batch {
        let datum = model
            .data()
            .get(n)
            .ok_or_else(|| contract(format!("datum {n} out of range")))?;
        let x: Vec<f64> = datum.iter().map(|&b| b as f64).collect();
        let mut tape = Tape::new();
        let pass = net.forward(&mut tape, &x)?;
        let mix = pass.mixture(&tape)?;
        let est = estimate_with_subsets(model, &mix, std::slice::from_ref(datum), cfg, &subsets, &rng.fork(n as u64), &opts)?;
        let upstream: Vec<f64> = est.grad.as_deref().unwrap_or_default().iter().map(|g| g * scale).collect();
        net.backprop(tape, &pass, &upstream, &mut grad)?;
        value += scale * est.value;
        p += est.p_evals;
        q += est.q_evals;
    }
    Ok((value, grad, p, q))
}

/// Sum over data of the encoder's per-datum IW-MISELBO.
pub fn misvae_eval(net: &Misvae, model: &ToyModel, l: usize, rng: &RngStream) -> Result<f64> {
    let mut total = 0.0;
    for (n, datum) in model.data().iter().enumerate() {
        let x: Vec<f64> = datum.iter().map(|&b| b as f64).collect();
        let q = net.encode(&x)?;
        total += estimate_iw_miselbo(model, &q, std::slice::from_ref(datum), l, &rng.fork(n as u64))?.value;
    }
    Ok(total)
}

/// Sum over data of the encoder's per-datum MISELBO by quadrature.
pub fn misvae_exact(net: &Misvae, model: &ToyModel) -> Result<f64> {
    let mut total = 0.0;
    for datum in model.data() {
        let x: Vec<f64> = datum.iter().map(|&b| b as f64).collect();
        let q = net.encode(&x)?;
        total += exact_miselbo(model, &q, std::slice::from_ref(datum), FINAL_QUAD_ORDER)?;
    }
    Ok(total)
}

/// Trains the amortized encoder against the toy model with its decoder
/// weights held fixed. Logged ELBO values are batch means scaled to the
/// full dataset.
pub fn fit_misvae(model: &ToyModel, cfg: &TrainConfig) -> Result<FitOutput> {
    cfg.validate()?;
    let n = model.n();
    if n == 0 {
        return Err(contract("the model has no data"));
    }
    let b = if cfg.batch_size == 0 { n } else { cfg.batch_size };
    if b > n {
        return Err(contract(format!("batch_size {b} exceeds the {n} data points")));
    }
    let root = RngStream::new(cfg.seed, TRAIN_STREAM);
    let eval_root = RngStream::new(cfg.seed, EVAL_STREAM);
    let mut net = Misvae::new(model.d_x(), model.d_z(), cfg.estimator.a, cfg.injection, &mut root.fork(INIT_TAG))?;
    let mut flat = net.to_flat();
    let mut adam = AdamState::new(flat.len());
    let mut tracker = Tracker::new();
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle = root.fork(BATCH_TAG);
    let mut cursor = n;
    for it in 0..cfg.iterations {
        let start = Instant::now();
        let mut batch = Vec::with_capacity(b);
        while batch.len() < b {
            if cursor == n {
                for i in (1..n).rev() {
                    order.swap(i, shuffle.below(i + 1));
                }
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let epoch = it * b / n;
        let (value, grad, p, q) =
            misvae_objective(&net, model, &batch, &cfg.estimator, &root.fork(it as u64), kl_weight(epoch, cfg.kl_warmup_epochs))
                .map_err(at(it))?;
        let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
        let name = |i| format!("network parameter {i}");
        adam_step(&mut flat, &neg, &mut adam, cfg.learning_rate, name).map_err(at(it))?;
        check_finite(&flat, name).map_err(at(it))?;
        net.set_flat(&flat).map_err(at(it))?;
        let elapsed = start.elapsed().as_secs_f64();
        let eval = if is_eval_step(cfg, it) {
            Some(misvae_eval(&net, model, cfg.eval_l, &eval_root.fork(it as u64)).map_err(at(it))?)
        } else {
            None
        };
        tracker.record(it + 1, elapsed, value * n as f64, eval, p, q);
    }
    let final_miselbo = Some(misvae_exact(&net, model)?);
    Ok(FitOutput { trained: Trained::Misvae { network: net }, log: tracker.log, final_miselbo })
}

/// Dispatches on the model kind. The plain mixture is fitted to the whole
/// dataset under one shared latent.
pub fn fit(kind: ModelKind, model: &ToyModel, cfg: &TrainConfig) -> Result<FitOutput> {
    match kind {
        ModelKind::PlainMixture => {
            if cfg.batch_size != 0 && cfg.batch_size != model.n() {
                return Err(contract("the plain mixture trains on the full dataset; set batch_size to 0 or N"));
            }
            fit_mixture(model, model.data(), cfg, None)
        }
        ModelKind::Misvae => fit_misvae(model, cfg),
    }
}
