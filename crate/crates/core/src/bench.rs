//! Timing and evaluation-count harness for the estimators on the toy model.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::estimators::{estimate, EstimatorConfig, EstimatorKind, EvalOptions};
use crate::numerics::RngStream;
use crate::toymodel::ToyModel;
use crate::vfamily::MixtureParams;

/// Cells shorter than this are re-timed with twice the iterations.
pub const MIN_REPETITION_SECONDS: f64 = 1e-3;

/// Cartesian product of kinds, A values and S values. Combinations with
/// S > A, and A2A with S ≠ A, are skipped.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchGrid {
    pub kinds: Vec<EstimatorKind>,
    #[serde(rename = "A")]
    pub a: Vec<usize>,
    #[serde(rename = "S")]
    pub s: Vec<usize>,
}

fn default_iterations() -> usize {
    200
}

fn default_warmup() -> usize {
    20
}

fn default_repetitions() -> usize {
    5
}

fn default_d_x() -> usize {
    20
}

fn default_n_data() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSpec {
    #[serde(default)]
    pub grid: Option<BenchGrid>,
    /// Explicit cells, run after the grid cells.
    #[serde(default)]
    pub cells: Vec<EstimatorConfig>,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default)]
    pub sequential_likelihood: bool,
    #[serde(default = "default_d_x")]
    pub d_x: usize,
    #[serde(default = "default_n_data")]
    pub n_data: usize,
    /// Lower bound on the duration of one timed repetition; raised to
    /// [`MIN_REPETITION_SECONDS`] if smaller.
    #[serde(default)]
    pub min_repetition_seconds: f64,
    /// Seeds the toy model, the mixture parameters and the estimator draws.
    pub seed: u64,
}

impl BenchSpec {
    pub fn new(cells: Vec<EstimatorConfig>, seed: u64) -> Self {
        Self {
            grid: None,
            cells,
            iterations: default_iterations(),
            warmup: default_warmup(),
            repetitions: default_repetitions(),
            sequential_likelihood: false,
            d_x: default_d_x(),
            n_data: default_n_data(),
            min_repetition_seconds: MIN_REPETITION_SECONDS,
            seed,
        }
    }

    /// Valid cells in run order.
    pub fn expand(&self) -> Result<Vec<EstimatorConfig>> {
        let mut out = Vec::new();
        if let Some(g) = &self.grid {
            for &kind in &g.kinds {
                for &a in &g.a {
                    for &s in &g.s {
                        if s == 0 || a == 0 || s > a || (kind == EstimatorKind::A2A && s != a) {
                            continue;
                        }
                        out.push(EstimatorConfig::new(kind, a, s));
                    }
                }
            }
        }
        for c in &self.cells {
            c.validate()?;
            out.push(*c);
        }
        if out.is_empty() {
            return Err(contract("the bench spec has no valid cells"));
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 || self.repetitions < 1 {
            return Err(contract("iterations and repetitions must be at least 1"));
        }
        if self.d_x < 1 || self.n_data < 1 {
            return Err(contract("d_x and n_data must be at least 1"));
        }
        self.expand().map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub config: EstimatorConfig,
    pub seconds_per_iter_median: f64,
    pub seconds_per_iter_iqr: f64,
    /// Per-iteration seconds of every repetition, in run order.
    pub samples: Vec<f64>,
    pub iterations_per_repetition: usize,
    pub p_evals: u64,
    pub q_evals: u64,
}

impl BenchRow {
    /// Wall time of `iterations` iterations at the median rate.
    pub fn total_seconds(&self, iterations: usize) -> f64 {
        self.seconds_per_iter_median * iterations as f64
    }
}

pub const BENCH_HEADER: &str = "kind,A,S,M,J,L,seconds_per_iter_median,seconds_per_iter_iqr,p_evals,q_evals";

pub fn write_csv<W: Write>(rows: &[BenchRow], mut out: W) -> Result<()> {
    writeln!(out, "{BENCH_HEADER}")?;
    for r in rows {
        let c = &r.config;
        writeln!(
            out,
            "{},{},{},{},{},{},{:e},{:e},{},{}",
            c.kind, c.a, c.s, c.m, c.j, c.l, r.seconds_per_iter_median, r.seconds_per_iter_iqr, r.p_evals, r.q_evals
        )?;
    }
    Ok(())
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile(&v, 0.5)
}

pub fn iqr(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile(&v, 0.75) - quantile(&v, 0.25)
}

/// The model a spec benchmarks on.
pub fn bench_model(spec: &BenchSpec) -> Result<ToyModel> {
    let mut model = ToyModel::generate(spec.seed, spec.d_x, spec.n_data)?;
    model.set_sequential_likelihood(spec.sequential_likelihood);
    Ok(model)
}

struct Cell<'a> {
    cfg: &'a EstimatorConfig,
    q: MixtureParams,
    root: RngStream,
    counter: u64,
    iters: usize,
    counts: (u64, u64),
    samples: Vec<f64>,
}

impl Cell<'_> {
    fn step(&mut self, model: &ToyModel, opts: &EvalOptions) -> Result<()> {
        let est = estimate(model, &self.q, model.data(), self.cfg, &self.root.fork(self.counter), opts)?;
        self.counter += 1;
        self.counts = (est.p_evals, est.q_evals);
        Ok(())
    }

    fn time(&mut self, model: &ToyModel, opts: &EvalOptions) -> Result<f64> {
        let start = Instant::now();
        for _ in 0..self.iters {
            self.step(model, opts)?;
        }
        Ok(start.elapsed().as_secs_f64())
    }
}

/// Times every cell of `spec`. Each iteration is one estimator value plus
/// gradient. Repetitions are interleaved across cells so that slow drift of
/// the machine hits all cells alike.
pub fn run_bench(spec: &BenchSpec) -> Result<Vec<BenchRow>> {
    spec.validate()?;
    let model = bench_model(spec)?;
    let configs = spec.expand()?;
    let opts = EvalOptions::with_gradient();
    let min_secs = spec.min_repetition_seconds.max(MIN_REPETITION_SECONDS);
    let mut cells = Vec::with_capacity(configs.len());
    for cfg in &configs {
        let q = MixtureParams::init_standard(cfg.a, model.d_z(), &mut RngStream::new(spec.seed, 1))?;
        let mut cell = Cell {
            cfg,
            q,
            root: RngStream::new(spec.seed, 2),
            counter: 0,
            iters: spec.iterations,
            counts: (0, 0),
            samples: Vec::with_capacity(spec.repetitions),
        };
        for _ in 0..spec.warmup {
            cell.step(&model, &opts)?;
        }
        while cell.time(&model, &opts)? < min_secs {
            cell.iters *= 2;
        }
        cells.push(cell);
    }
    for _ in 0..spec.repetitions {
        for cell in cells.iter_mut() {
            let secs = cell.time(&model, &opts)?;
            cell.samples.push(secs / cell.iters as f64);
        }
    }
    Ok(cells
        .into_iter()
        .map(|c| BenchRow {
            config: *c.cfg,
            seconds_per_iter_median: median(&c.samples),
            seconds_per_iter_iqr: iqr(&c.samples),
            iterations_per_repetition: c.iters,
            p_evals: c.counts.0,
            q_evals: c.counts.1,
            samples: c.samples,
        })
        .collect())
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchEnvironment {
    pub cpu_model: String,
    pub logical_cpus: usize,
    pub core_pinning: String,
    pub os: String,
    pub arch: String,
    pub threads: usize,
    pub crate_version: String,
}

impl BenchEnvironment {
    pub fn capture(threads: usize) -> Self {
        let cpu_model = std::fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|s| {
                s.lines()
                    .find(|l| l.starts_with("model name"))
                    .and_then(|l| l.split_once(':'))
                    .map(|(_, v)| v.trim().to_string())
            })
            .unwrap_or_else(|| "unknown".into());
        Self {
            cpu_model,
            logical_cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            core_pinning: "none".into(),
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            threads,
            crate_version: env!("CARGO_PKG_VERSION").into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_s2s_grid() -> BenchSpec {
        let mut spec = BenchSpec::new(vec![], 1);
        spec.grid = Some(BenchGrid { kinds: vec![EstimatorKind::S2S], a: vec![1, 2, 3, 4], s: vec![1, 2, 3, 4] });
        spec
    }

    #[test]
    fn grid_skips_invalid_cells() {
        assert_eq!(square_s2s_grid().expand().unwrap().len(), 10);
        let mut spec = square_s2s_grid();
        spec.grid.as_mut().unwrap().kinds = vec![EstimatorKind::A2A];
        assert_eq!(spec.expand().unwrap().len(), 4);
        spec.grid = Some(BenchGrid::default());
        assert!(spec.expand().is_err());
    }

    #[test]
    fn quantiles() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(iqr(&[1.0, 2.0, 3.0, 4.0, 5.0]), 2.0);
        assert!((log_log_slope(&[1.0, 2.0, 4.0], &[3.0, 12.0, 48.0]) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn counters_and_csv() {
        let mut spec = BenchSpec::new(vec![EstimatorConfig::s2a(20, 1), EstimatorConfig::a2a(3)], 4);
        spec.iterations = 5;
        spec.warmup = 1;
        spec.repetitions = 3;
        let rows = run_bench(&spec).unwrap();
        assert_eq!((rows[0].p_evals, rows[0].q_evals), (1, 20));
        assert_eq!((rows[1].p_evals, rows[1].q_evals), (3, 9));
        assert!(rows.iter().all(|r| r.samples.len() == 3 && r.seconds_per_iter_median > 0.0));
        assert!(rows.iter().all(|r| r.iterations_per_repetition as f64 * r.seconds_per_iter_median >= MIN_REPETITION_SECONDS * 0.99));
        let mut out = Vec::new();
        write_csv(&rows, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with(BENCH_HEADER));
        assert!(text.lines().nth(1).unwrap().starts_with("s2a,20,1,1,1,1,"));
    }

    #[test]
    fn spec_json_is_strict() {
        let ok = r#"{"grid":{"kinds":["s2s"],"A":[1,2],"S":[1]},"seed":3}"#;
        let spec: BenchSpec = serde_json::from_str(ok).unwrap();
        assert_eq!(spec.repetitions, 5);
        assert!(serde_json::from_str::<BenchSpec>(r#"{"seed":3,"reps":5}"#).is_err());
        assert!(serde_json::from_str::<BenchSpec>(r#"{"cells":[]}"#).is_err());
    }
}
