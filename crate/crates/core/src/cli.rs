//! Command-line front end: `fit`, `verify`, `bench` and `posterior-grid`.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bench::{self, BenchEnvironment, BenchSpec};
use crate::error::{contract, Error, Result};
use crate::nnet::InjectionMode;
use crate::toymodel::{
    log_evidence, posterior_grid_threaded, GenerateOptions, GridBounds, GridSpec, ScaleConvention, ToyModel,
    DEFAULT_GRID_RESOLUTION,
};
use crate::training::{fit, FitOutput, ModelKind, TrainConfig};
use crate::verify::{self, Mutation, Scale, Status};

pub const EXIT_OK: u8 = 0;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;
pub const EXIT_VERIFY: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "miselbo", version, about = "Mixture-ELBO estimators: training, verification and benchmarks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a mixture or an amortized mixture encoder on the toy model.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the estimator property suite.
    Verify {
        #[arg(long, value_enum, default_value = "fast")]
        scale: ScaleArg,
        /// Swap in a known-wrong denominator to confirm the suite fails.
        #[arg(long, value_enum, default_value = "none", hide = true)]
        mutation: MutationArg,
    },
    /// Time estimator cells described by a JSON spec.
    Bench {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export the unnormalized log posterior of a toy model on a grid.
    PosteriorGrid {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = -9.0, allow_hyphen_values = true)]
        lo: f64,
        #[arg(long, default_value_t = 9.0, allow_hyphen_values = true)]
        hi: f64,
        #[arg(long, default_value_t = DEFAULT_GRID_RESOLUTION)]
        resolution: usize,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScaleArg {
    Fast,
    Full,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MutationArg {
    None,
    S2sFullDenominator,
    S2aSubsetDenominator,
}

/// Where the toy model comes from: a JSON file or generation from a seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default = "default_d_x")]
    pub d_x: usize,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub convention: ScaleConvention,
    #[serde(default)]
    pub sequential_likelihood: bool,
}

fn default_d_x() -> usize {
    20
}

fn default_n() -> usize {
    5
}

fn default_beta() -> f64 {
    0.1
}

impl ModelSource {
    pub fn load(&self, base: &Path) -> Result<ToyModel> {
        let mut model = match (&self.path, self.seed) {
            (Some(p), None) => {
                let p = if p.is_absolute() { p.clone() } else { base.join(p) };
                read_json::<ToyModel>(&p)?
            }
            (None, Some(seed)) => ToyModel::generate_with(GenerateOptions {
                seed,
                d_x: self.d_x,
                n: self.n,
                beta: self.beta,
                convention: self.convention,
            })?,
            _ => return Err(contract("model needs exactly one of `path` or `seed`")),
        };
        if self.sequential_likelihood {
            model.set_sequential_likelihood(true);
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub model: ModelSource,
    #[serde(default)]
    pub model_kind: ModelKind,
    pub training: TrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Conventions {
    pub funnel_scale: ScaleConvention,
    pub one_hot_injection: InjectionMode,
}

/// Written last, atomically, into every output directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub outputs: Vec<String>,
    pub conventions: Option<Conventions>,
    pub threads: usize,
    pub revision: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitMetadata {
    pub config: FitConfig,
    pub model_kind: ModelKind,
    pub seed: u64,
    pub revision: String,
    pub eval_l: usize,
    pub eval_note: String,
    pub iterations: usize,
    pub p_evals: u64,
    pub q_evals: u64,
    pub final_elbo_estimate: f64,
    pub final_eval_miselbo: Option<f64>,
    pub final_miselbo: Option<f64>,
    pub log_evidence: Option<f64>,
}

pub fn revision() -> String {
    option_env!("MISELBO_REVISION").map_or_else(|| format!("miselbo {}", env!("CARGO_PKG_VERSION")), String::from)
}

fn now_unix() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

/// `MIS_THREADS`, default 1.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var("MIS_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(contract(format!("MIS_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| contract(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| contract(format!("{}: {e}", path.display())))
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn write_with<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<fs::File>) -> Result<()>,
{
    let mut w = BufWriter::new(fs::File::create(path)?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn prepare_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| contract(format!("cannot create output directory {}: {e}", dir.display())))
}

/// File name of the training curve, e.g. `data_S1_A20_s2a.csv`.
pub fn run_log_name(cfg: &TrainConfig) -> String {
    format!("data_S{}_A{}_{}.csv", cfg.estimator.s, cfg.estimator.a, cfg.estimator.kind)
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Contract(_) | Error::Json(_) | Error::Io(_) => EXIT_CONFIG,
        Error::OracleScale(_) | Error::OracleConvergence(_) => EXIT_VERIFY,
        Error::AtIteration { .. } | Error::Numeric { .. } | Error::DegenerateMixture => EXIT_NUMERIC,
    }
}

pub fn cmd_fit(config_path: &Path, out: &Path) -> Result<()> {
    let started = now_unix();
    let threads = threads_from_env()?;
    let cfg: FitConfig = read_json(config_path)?;
    cfg.training.validate()?;
    let base = config_path.parent().unwrap_or(Path::new("."));
    let model = cfg.model.load(base)?;
    prepare_out_dir(out)?;

    let FitOutput { trained, log, final_miselbo } = fit(cfg.model_kind, &model, &cfg.training)?;
    let le = log_evidence(&model, &GridSpec::for_model(&model)).ok();

    let log_name = run_log_name(&cfg.training);
    write_with(&out.join(&log_name), |w| log.write_csv(w))?;
    write_json(&out.join("params.json"), &trained)?;
    write_json(&out.join("model.json"), &model)?;
    let last = log.last().expect("at least one iteration");
    let meta = FitMetadata {
        config: cfg.clone(),
        model_kind: cfg.model_kind,
        seed: cfg.training.seed,
        revision: revision(),
        eval_l: cfg.training.eval_l,
        eval_note: format!(
            "eval_miselbo is the importance-weighted MISELBO with L = {} samples per component; final_miselbo is exact by Gauss-Hermite quadrature",
            cfg.training.eval_l
        ),
        iterations: cfg.training.iterations,
        p_evals: last.p_evals,
        q_evals: last.q_evals,
        final_elbo_estimate: last.elbo,
        final_eval_miselbo: log.last_eval(),
        final_miselbo,
        log_evidence: le,
    };
    write_json(&out.join("metadata.json"), &meta)?;
    let manifest = RunManifest {
        command: "fit".into(),
        config: serde_json::to_value(&cfg)?,
        seed: Some(cfg.training.seed),
        started_unix: started,
        finished_unix: now_unix(),
        outputs: vec![log_name, "params.json".into(), "model.json".into(), "metadata.json".into()],
        conventions: Some(Conventions { funnel_scale: model.convention(), one_hot_injection: cfg.training.injection }),
        threads,
        revision: revision(),
    };
    write_atomic(&out.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)?;
    if let Some(v) = final_miselbo {
        println!("final -MISELBO {:.4}", -v);
    }
    Ok(())
}

/// Prints one line per check; returns whether everything passed and
/// whether any oracle failed.
pub fn cmd_verify(scale: Scale, mutation: Mutation) -> (bool, bool) {
    let results = verify::run_suite(scale, mutation);
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| r.status == Status::Fail).count();
    let oracle = results.iter().filter(|r| r.status == Status::OracleFailure).count();
    println!("{} checks, {failed} failed, {oracle} oracle failures", results.len());
    (failed == 0 && oracle == 0, oracle > 0)
}

pub fn cmd_bench(spec_path: &Path, out: &Path) -> Result<()> {
    let started = now_unix();
    let threads = threads_from_env()?;
    let spec: BenchSpec = read_json(spec_path)?;
    spec.validate()?;
    prepare_out_dir(out)?;
    let rows = bench::run_bench(&spec)?;
    write_with(&out.join("bench.csv"), |w| bench::write_csv(&rows, w))?;
    write_json(&out.join("environment.json"), &BenchEnvironment::capture(threads))?;
    let manifest = RunManifest {
        command: "bench".into(),
        config: serde_json::to_value(&spec)?,
        seed: Some(spec.seed),
        started_unix: started,
        finished_unix: now_unix(),
        outputs: vec!["bench.csv".into(), "environment.json".into()],
        conventions: None,
        threads,
        revision: revision(),
    };
    write_atomic(&out.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)?;
    bench::write_csv(&rows, io::stdout().lock())?;
    Ok(())
}

pub fn cmd_posterior_grid(model_path: &Path, out: &Path, bounds: GridBounds, resolution: usize) -> Result<()> {
    let threads = threads_from_env()?;
    let model: ToyModel = read_json(model_path)?;
    let grid = posterior_grid_threaded(&model, bounds, resolution, threads)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        prepare_out_dir(parent)?;
    }
    write_with(out, |w| grid.write_csv(w))
}

fn report(err: &Error) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(exit_code_for(err))
}

pub fn run(cli: Cli) -> ExitCode {
    let result = match cli.command {
        Command::Fit { config, out } => cmd_fit(&config, &out),
        Command::Verify { scale, mutation } => {
            let scale = match scale {
                ScaleArg::Fast => Scale::Fast,
                ScaleArg::Full => Scale::Full,
            };
            let mutation = match mutation {
                MutationArg::None => Mutation::None,
                MutationArg::S2sFullDenominator => Mutation::S2sFullDenominator,
                MutationArg::S2aSubsetDenominator => Mutation::S2aSubsetDenominator,
            };
            let (ok, _) = cmd_verify(scale, mutation);
            return ExitCode::from(if ok { EXIT_OK } else { EXIT_VERIFY });
        }
        Command::Bench { spec, out } => cmd_bench(&spec, &out),
        Command::PosteriorGrid { model, out, lo, hi, resolution } => {
            cmd_posterior_grid(&model, &out, GridBounds { lo, hi }, resolution)
        }
    };
    match result {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(e) => report(&e),
    }
}

/// Parses arguments; usage errors exit with the configuration code.
pub fn main_from_env() -> ExitCode {
    match Cli::try_parse() {
        Ok(cli) => run(cli),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            ExitCode::from(code)
        }
    }
}
