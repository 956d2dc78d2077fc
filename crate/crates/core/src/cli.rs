//! Command-line front end: `gen`, `fit`, `tune` and `bench`.
//!
//! Data goes to files or standard output; progress and errors go to
//! standard error. Exit codes are 0 on success, 2 for invalid input,
//! 3 when the iteration budget runs out, 4 on divergence and 5 when every
//! tuning configuration fails.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::json;

use crate::error::{GgflError, Result};
use crate::harness::{error_theta, grid_search, kfold_cv, log_spaced, rmse_y, temporal_weights, GridSpec, TuneOptions, Variant};
use crate::hpr::{solve_prepared, PreparedProblem, SolveReport, SolveStatus, SolverOptions, WarmStart};
use crate::io::{load_dataset, read_json, save_dataset, write_json, write_tensor};
use crate::linsolve::Backend;
use crate::model::{Hyperparams, NormKind};
use crate::synthetic::{gen_dataset, GenConfig};

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_INVALID: u8 = 2;
pub const EXIT_MAX_ITERS: u8 = 3;
pub const EXIT_DIVERGED: u8 = 4;
pub const EXIT_TUNING_FAILED: u8 = 5;

#[derive(Debug, Parser)]
#[command(name = "ggfl", version, about = "Graph-guided fused lasso regression for spatiotemporal data")]
pub struct Cli {
    /// Worker threads for data generation and tuning (default: all cores).
    #[arg(long, global = true, env = "GGFL_WORKERS")]
    pub workers: Option<usize>,

    /// Repeat for more log output on stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Fit one model.
    Fit(FitArgs),
    /// Select hyperparameters on a validation split or by k-fold CV.
    Tune(TuneArgs),
    /// Time fits along one dimension.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridShape(pub usize, pub usize);

impl FromStr for GridShape {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (a, b) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("expected ROWSxCOLS, got '{s}'"))?;
        let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("bad grid extent '{v}': {e}"));
        Ok(GridShape(parse(a)?, parse(b)?))
    }
}

/// A comma list (`0.1,1,10`) or a log range (`log:1e-2:1e2:5`).
#[derive(Debug, Clone, PartialEq)]
pub struct ValueList(pub Vec<f64>);

impl FromStr for ValueList {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if let Some(rest) = s.strip_prefix("log:") {
            let parts: Vec<&str> = rest.split(':').collect();
            if parts.len() != 3 {
                return Err(format!("expected log:LO:HI:COUNT, got '{s}'"));
            }
            let lo: f64 = parts[0].parse().map_err(|e| format!("{e}"))?;
            let hi: f64 = parts[1].parse().map_err(|e| format!("{e}"))?;
            let count: usize = parts[2].parse().map_err(|e| format!("{e}"))?;
            return log_spaced(lo, hi, count).map(ValueList).map_err(|e| e.to_string());
        }
        s.split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|e| format!("bad value '{v}': {e}")))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(ValueList)
    }
}

fn parse_norm(s: &str) -> std::result::Result<NormKind, String> {
    match s {
        "1" => Ok(NormKind::L1),
        "2" => Ok(NormKind::L2),
        other => Err(format!("norm must be 1 or 2, got '{other}'")),
    }
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 60)]
    pub t: usize,
    #[arg(long, default_value = "10x10")]
    pub grid: GridShape,
    #[arg(long, default_value_t = 1)]
    pub m: usize,
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, default_value_t = 1000)]
    pub n_val: usize,
    #[arg(long, default_value_t = 1000)]
    pub n_test: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub noise_var: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SolverArgs {
    #[arg(long, default_value_t = 2000)]
    pub max_iters: usize,
    /// Stopping tolerance on the normalized KKT residual.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub sigma0: f64,
    #[arg(long, default_value_t = 50)]
    pub check_period: usize,
    /// Run a single epoch with σ fixed at `--sigma0`.
    #[arg(long)]
    pub no_restart: bool,
    /// Keep restarts but never change σ.
    #[arg(long)]
    pub fixed_sigma: bool,
    /// Skip Halpern averaging (plain splitting iteration).
    #[arg(long)]
    pub no_halpern: bool,
    /// Record ‖R(H̄)‖ at every check in the trace.
    #[arg(long)]
    pub track_residual: bool,
    /// auto | cholesky | cg | spectral
    #[arg(long, default_value = "auto")]
    pub backend: Backend,
}

impl SolverArgs {
    fn options(&self, default_tol: f64) -> SolverOptions {
        SolverOptions {
            sigma0: self.sigma0,
            eta_tol: self.tol.unwrap_or(default_tol),
            max_total_iters: self.max_iters,
            check_period: self.check_period,
            restart_enabled: !self.no_restart,
            adaptive_sigma: !self.no_restart && !self.fixed_sigma,
            halpern_enabled: !self.no_halpern,
            track_residual_mapping: self.track_residual,
            backend: self.backend,
            ..SolverOptions::default()
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct PenaltyArgs {
    /// Sets every λ not given explicitly.
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub lambda_t: Option<f64>,
    #[arg(long)]
    pub lambda_g: Option<f64>,
    /// Temporal norm (1 or 2).
    #[arg(long, default_value = "2", value_parser = parse_norm)]
    pub p: NormKind,
    /// Spatial norm (1 or 2).
    #[arg(long, default_value = "2", value_parser = parse_norm)]
    pub q: NormKind,
}

impl PenaltyArgs {
    pub fn hyperparams(&self, variant: Variant) -> Result<Hyperparams> {
        let l = self.lambda;
        let lt = self.lambda_t.unwrap_or(l);
        let lg = match variant {
            Variant::SGgfl => lt,
            _ => self.lambda_g.unwrap_or(l),
        };
        let l2 = match variant {
            Variant::MultiGgfl => self.lambda2.unwrap_or(l),
            _ => {
                if self.lambda2.is_some_and(|v| v != 0.0) {
                    return Err(GgflError::InvalidConfig(
                        "lambda2 applies only to the multiggfl variant".into(),
                    ));
                }
                0.0
            }
        };
        Hyperparams::new(self.lambda1.unwrap_or(l), l2, lt, lg, self.p, self.q)
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Dataset manifest or its directory.
    #[arg(long)]
    pub data: PathBuf,
    /// ggfl | s-ggfl | multiggfl
    #[arg(long, default_value = "multiggfl")]
    pub variant: Variant,
    #[command(flatten)]
    pub penalty: PenaltyArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Start from the final state stored in a previous report.
    #[arg(long)]
    pub warm_start: Option<PathBuf>,
    /// Weight sample k by BASE^(n-1-k), favouring later samples.
    #[arg(long)]
    pub recency_base: Option<f64>,
    #[arg(long, default_value = "fit")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "ggfl")]
    pub variant: Variant,
    #[arg(long, default_value = "log:1e-4:1e-2:5")]
    pub lambda1: ValueList,
    /// Used by multiggfl only.
    #[arg(long, default_value = "log:1e-4:1e-2:5")]
    pub lambda2: ValueList,
    /// Also the tied λ_t = λ_g axis for s-ggfl.
    #[arg(long, default_value = "log:1e-2:1e2:5")]
    pub lambda_t: ValueList,
    #[arg(long, default_value = "log:1e-2:1e2:5")]
    pub lambda_g: ValueList,
    /// Tie λ₂ to λ₁ (multiggfl).
    #[arg(long)]
    pub tie_sparsity: bool,
    #[arg(long, default_value = "2", value_parser = parse_norm)]
    pub p: NormKind,
    #[arg(long, default_value = "2", value_parser = parse_norm)]
    pub q: NormKind,
    /// k-fold CV on the training split instead of the validation split.
    #[arg(long)]
    pub cv: Option<usize>,
    #[arg(long, default_value_t = 1e-3)]
    pub tuning_tol: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub final_tol: f64,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long, default_value = "tune")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Axis {
    T,
    S,
    M,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_enum)]
    pub axis: Axis,
    /// Values along the axis; for `s` each value must be a perfect square.
    #[arg(long)]
    pub values: ValueList,
    #[arg(long, default_value = "1e-2")]
    pub lambda0: ValueList,
    #[arg(long, default_value_t = 20)]
    pub t: usize,
    #[arg(long, default_value = "6x6")]
    pub grid: GridShape,
    #[arg(long, default_value_t = 1)]
    pub m: usize,
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Repeat each point and keep the fastest run.
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// CSV output path (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub const BENCH_HEADER: &str = "axis,value,lambda0,t,s,m,n,status,iters,setup_ms,iter_ms,ms_per_iter,wall_ms";

pub fn exit_code(err: &GgflError) -> u8 {
    match err {
        GgflError::InvalidConfig(_)
        | GgflError::InvalidParameter(_)
        | GgflError::InvalidDimension(_)
        | GgflError::DimensionMismatch(_) => EXIT_INVALID,
        GgflError::Divergence(_) => EXIT_DIVERGED,
        GgflError::TuningFailed(_) => EXIT_TUNING_FAILED,
        _ => EXIT_FAILURE,
    }
}

/// Parses `std::env::args`, runs the command and maps the outcome to an exit code.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_env("GGFL_LOG").init();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn run(cli: Cli) -> Result<u8> {
    let workers = match cli.workers {
        Some(0) => return Err(GgflError::InvalidConfig("--workers must be at least 1".into())),
        Some(n) => n,
        None => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| GgflError::InvalidConfig(format!("cannot start {workers} workers: {e}")))?;
    pool.install(|| match cli.command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Fit(a) => cmd_fit(&a),
        Command::Tune(a) => cmd_tune(&a),
        Command::Bench(a) => cmd_bench(&a),
    })
}

pub fn cmd_gen(a: &GenArgs) -> Result<u8> {
    let cfg = GenConfig {
        t: a.t,
        grid: (a.grid.0, a.grid.1),
        m: a.m,
        n: a.n,
        n_val: a.n_val,
        n_test: a.n_test,
        noise_var: a.noise_var,
        seed: a.seed,
        ..GenConfig::default()
    };
    let ds = gen_dataset(&cfg)?;
    let manifest = save_dataset(&a.out, &ds)?;
    let mut bytes = std::fs::metadata(a.out.join(crate::io::MANIFEST_NAME))?.len();
    for f in manifest.files() {
        bytes += std::fs::metadata(a.out.join(f))?.len();
    }
    println!(
        "generated t={} s={} m={} n={}/{}/{} seed={} change_point={} files={} bytes={} dir={}",
        cfg.t,
        cfg.s(),
        cfg.m,
        cfg.n,
        cfg.n_val,
        cfg.n_test,
        cfg.seed,
        ds.change_point,
        manifest.files().len() + 1,
        bytes,
        a.out.display()
    );
    Ok(EXIT_OK)
}

fn write_fit_outputs(dir: &Path, report: &SolveReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_json(&dir.join("report.json"), report)?;
    std::fs::write(dir.join("trace.csv"), report.trace_csv())?;
    write_tensor(&dir.join("theta.bin"), &report.theta)?;
    Ok(())
}

pub fn cmd_fit(a: &FitArgs) -> Result<u8> {
    let ds = load_dataset(&a.data)?;
    let hp = a.penalty.hyperparams(a.variant)?;
    let opts = a.solver.options(1e-4);
    let mut train = ds.train.clone();
    if let Some(base) = a.recency_base {
        let n = train.dims().n as i64;
        let idx: Vec<i64> = (0..n).collect();
        train = train.with_weights(Some(temporal_weights(&idx, base, None)?))?;
    }
    let warm = match &a.warm_start {
        Some(p) => {
            let prev: SolveReport = read_json(p)?;
            Some(WarmStart {
                state: prev.final_state,
                sigma: prev.final_sigma,
            })
        }
        None => None,
    };
    let prep = PreparedProblem::new(train, ds.graph.clone(), opts.backend, opts.cg)?;
    info!("fitting with {hp:?} on backend {:?}", prep.structure().backend());
    let report = match solve_prepared(&prep, &hp, &opts, warm.as_ref()) {
        Ok(r) => r,
        Err(GgflError::Divergence(partial)) => {
            write_fit_outputs(&a.out, &partial)?;
            eprintln!("error: solver diverged after {} iterations", partial.total_iters);
            return Ok(EXIT_DIVERGED);
        }
        Err(e) => return Err(e),
    };
    write_fit_outputs(&a.out, &report)?;
    let test_rmse = ds.test.as_ref().map(|t| rmse_y(&report.theta, t)).transpose()?;
    let err = ds.truth.as_ref().map(|t| error_theta(&report.theta, t)).transpose()?;
    let summary = json!({
        "status": report.status,
        "iters": report.total_iters,
        "eta_kkt": report.final_kkt.map(|k| k.eta),
        "objective": report.objective,
        "final_sigma": report.final_sigma,
        "test_rmse": test_rmse.map(|r| r.mean),
        "error_theta": err.map(|e| e.total),
        "out": a.out.display().to_string(),
    });
    println!("{summary}");
    Ok(match report.status {
        SolveStatus::Converged => EXIT_OK,
        SolveStatus::MaxIters => EXIT_MAX_ITERS,
        SolveStatus::Diverged => EXIT_DIVERGED,
    })
}

pub fn cmd_tune(a: &TuneArgs) -> Result<u8> {
    let ds = load_dataset(&a.data)?;
    let grid = match a.variant {
        Variant::Ggfl => GridSpec::ggfl(a.lambda1.0.clone(), a.lambda_t.0.clone(), a.lambda_g.0.clone()),
        Variant::SGgfl => GridSpec::s_ggfl(a.lambda1.0.clone(), a.lambda_t.0.clone()),
        Variant::MultiGgfl => GridSpec {
            tie_sparsity: a.tie_sparsity,
            ..GridSpec::multi_ggfl(
                a.lambda1.0.clone(),
                a.lambda2.0.clone(),
                a.lambda_t.0.clone(),
                a.lambda_g.0.clone(),
            )
        },
    };
    let grid = GridSpec { p: a.p, q: a.q, ..grid };
    let opts = TuneOptions {
        solver: SolverOptions {
            record_objective: false,
            ..a.solver.options(a.final_tol)
        },
        tuning_tol: a.tuning_tol,
        final_tol: a.final_tol,
    };
    let start = Instant::now();
    let mut report = match a.cv {
        Some(k) => kfold_cv(&ds.train, &ds.graph, k, &grid, &opts)?,
        None => {
            let val = ds.validation.as_ref().ok_or_else(|| {
                GgflError::InvalidConfig("dataset has no validation split; pass --cv K".into())
            })?;
            grid_search(&ds.train, val, &ds.graph, &grid, &opts)?
        }
    };
    if let Some(test) = &ds.test {
        report.evaluate(test, ds.truth.as_ref())?;
    }
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("tune.csv"), report.csv())?;
    std::fs::write(a.out.join("tune.json"), report.summary_json()? + "\n")?;
    write_fit_outputs(&a.out, &report.final_fit)?;
    let s = &report.selected;
    println!(
        "{}",
        json!({
            "selected_id": report.selected_id,
            "lambda1": s.lambda1,
            "lambda2": s.lambda2,
            "lambda_t": s.lambda_t,
            "lambda_g": s.lambda_g,
            "val_rmse": report.selected_val_rmse,
            "final_status": report.final_fit.status,
            "final_iters": report.final_fit.total_iters,
            "test_rmse": report.test_rmse.as_ref().map(|r| r.mean),
            "error_theta": report.error_theta.as_ref().map(|e| e.total),
            "wall_ms": start.elapsed().as_secs_f64() * 1e3,
        })
    );
    Ok(EXIT_OK)
}

fn axis_name(a: Axis) -> &'static str {
    match a {
        Axis::T => "t",
        Axis::S => "s",
        Axis::M => "m",
    }
}

pub fn cmd_bench(a: &BenchArgs) -> Result<u8> {
    let opts = a.solver.options(1e-4);
    let mut out = String::from(BENCH_HEADER);
    out.push('\n');
    for &v in &a.values.0 {
        if !(v >= 1.0 && v.fract() == 0.0) {
            return Err(GgflError::InvalidConfig(format!("axis values must be positive integers, got {v}")));
        }
        let v = v as usize;
        let mut cfg = GenConfig {
            t: a.t,
            grid: (a.grid.0, a.grid.1),
            m: a.m,
            n: a.n,
            n_val: 0,
            n_test: 0,
            seed: a.seed,
            ..GenConfig::default()
        };
        match a.axis {
            Axis::T => cfg.t = v,
            Axis::M => cfg.m = v,
            Axis::S => {
                let side = (v as f64).sqrt().round() as usize;
                if side * side != v {
                    return Err(GgflError::InvalidConfig(format!("s = {v} is not a perfect square")));
                }
                cfg.grid = (side, side);
            }
        }
        let ds = gen_dataset(&cfg)?;
        let prep = PreparedProblem::new(ds.train.clone(), ds.graph.clone(), opts.backend, opts.cg)?;
        for &l0 in &a.lambda0.0 {
            let hp = Hyperparams {
                lambda2: if cfg.m > 1 { l0 } else { 0.0 },
                ..Hyperparams::uniform(l0)
            };
            let mut best: Option<(SolveReport, f64)> = None;
            for _ in 0..a.repeats.max(1) {
                let t0 = Instant::now();
                let rep = solve_prepared(&prep, &hp, &opts, None)?;
                let wall = t0.elapsed().as_secs_f64() * 1e3;
                if best.as_ref().is_none_or(|(b, _)| rep.timings.iterations_ms < b.timings.iterations_ms) {
                    best = Some((rep, wall));
                }
            }
            let (rep, wall) = best.expect("at least one repeat");
            let per = rep.timings.iterations_ms / rep.total_iters.max(1) as f64;
            out.push_str(&format!(
                "{},{},{:e},{},{},{},{},{},{},{:.3},{:.3},{:.6},{:.3}\n",
                axis_name(a.axis),
                v,
                l0,
                cfg.t,
                cfg.s(),
                cfg.m,
                cfg.n,
                serde_json::to_value(rep.status)?.as_str().unwrap_or("unknown"),
                rep.total_iters,
                prep_setup_ms(&rep),
                rep.timings.iterations_ms,
                per,
                wall
            ));
            info!("{} = {v}, lambda0 = {l0}: {} iterations, {per:.3} ms/iter", axis_name(a.axis), rep.total_iters);
        }
    }
    match &a.out {
        Some(p) => std::fs::write(p, out)?,
        None => print!("{out}"),
    }
    Ok(EXIT_OK)
}

fn prep_setup_ms(rep: &SolveReport) -> f64 {
    rep.timings.assembly_ms + rep.timings.factorization_ms
}
