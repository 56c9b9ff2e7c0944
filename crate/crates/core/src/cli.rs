//! Command-line front end.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{error, info};
use rayon::prelude::*;
use serde::Serialize;

use crate::ecosystem::{Checkpoint, Strategy};
use crate::error::Error;
use crate::gridworld::{generate_level, render_ascii, reset};
use crate::harness::{
    aggregate_runs, export_aggregate, export_comparison, export_metrics, read_metrics,
    run_experiment, save_run, AggregateRecord, ExperimentConfig, ExportFormat, RunFailure,
    RunReport, AGGREGATE_METRICS,
};
use crate::plot::write_line_chart;

pub const OUT_ENV: &str = "ECOPOOL_OUT";
const DEFAULT_OUT_ROOT: &str = "runs";

#[derive(Debug, Parser)]
#[command(
    name = "ecopool",
    version,
    about = "Agent eco-system experiments on FourRooms gridworlds"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one strategy for the configured number of runs.
    Run(RunArgs),
    /// Run several strategies on the same level schedule.
    Compare(CompareArgs),
    /// Print a generated level.
    ShowEnv(ShowEnvArgs),
    /// Summarize a pool checkpoint.
    InspectPool(InspectPoolArgs),
    /// Re-export the metrics of a run directory.
    Export(ExportArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Experiment config file (TOML).
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Number of training environments per run.
    #[arg(long, value_name = "N")]
    pub envs: Option<u64>,
    #[arg(long, value_name = "N")]
    pub runs: Option<u64>,
    #[arg(long, value_name = "N")]
    pub eval_every: Option<u64>,
    /// Learn-epoch budget per new agent.
    #[arg(long, value_name = "N")]
    pub budget: Option<usize>,
    /// Worker threads for independent runs.
    #[arg(long, value_name = "N")]
    pub jobs: Option<usize>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Basic,
    Random,
    Best,
    Forked,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Basic => Strategy::Basic,
            StrategyArg::Random => Strategy::Random,
            StrategyArg::Best => Strategy::Best,
            StrategyArg::Forked => Strategy::Forked,
        }
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyArg>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    /// Strategies to compare, repeated or comma-separated.
    #[arg(long, value_enum, value_delimiter = ',', required = true)]
    pub strategy: Vec<StrategyArg>,
}

#[derive(Debug, Args)]
pub struct ShowEnvArgs {
    #[arg(long)]
    pub seed: u64,
    /// Config file whose `[level]` section is used.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub width: Option<u32>,
    #[arg(long)]
    pub height: Option<u32>,
    #[arg(long)]
    pub max_steps: Option<u32>,
    /// Print only the level JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct InspectPoolArgs {
    /// Checkpoint directory or `checkpoint.json` file.
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Csv,
    Json,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    pub run_dir: PathBuf,
    #[arg(long, value_enum)]
    pub format: FormatArg,
}

/// Failure of a command, mapped onto the exit-code contract.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

fn usage(e: Error) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime(e: Error) -> CliError {
    CliError::Runtime(e.to_string())
}

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(args) => cmd_run(&args),
        Command::Compare(args) => cmd_compare(&args),
        Command::ShowEnv(args) => cmd_show_env(&args),
        Command::InspectPool(args) => cmd_inspect_pool(&args),
        Command::Export(args) => cmd_export(&args),
    }
}

/// Loads the config file (or defaults) and applies command-line overrides.
pub fn resolve_config(o: &Overrides) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &o.config {
        Some(path) => ExperimentConfig::load(path).map_err(usage)?,
        None => ExperimentConfig::default(),
    };
    if let Some(v) = o.envs {
        cfg.n_train_envs = v;
    }
    if let Some(v) = o.runs {
        cfg.n_runs = v;
    }
    if let Some(v) = o.eval_every {
        cfg.eval_every = v;
    }
    if let Some(v) = o.budget {
        cfg.budget = v;
    }
    if let Some(v) = o.jobs {
        cfg.jobs = v;
    }
    if let Some(v) = &o.out {
        cfg.output_dir = Some(v.clone());
    }
    Ok(cfg)
}

fn output_dir(cfg: &ExperimentConfig, default_leaf: &str) -> PathBuf {
    cfg.output_dir.clone().unwrap_or_else(|| {
        let root = std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT));
        root.join(default_leaf)
    })
}

#[derive(Serialize)]
struct Meta<'a> {
    tool_version: &'a str,
    strategy: Strategy,
    n_runs: u64,
    n_train_envs: u64,
    eval_every: u64,
    n_eval_envs: u64,
    rollout_steps: usize,
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| runtime(Error::io(path, e)))
}

/// Runs every `(strategy, run)` pair on a pool of `cfg.jobs` threads.
/// Results come back in input order.
pub fn run_all(
    cfg: &ExperimentConfig,
    strategies: &[Strategy],
) -> Vec<(Strategy, Result<RunReport, RunFailure>)> {
    let jobs: Vec<(Strategy, u64)> = strategies
        .iter()
        .flat_map(|&s| (0..cfg.n_runs).map(move |r| (s, r)))
        .collect();
    let work = || {
        jobs.par_iter()
            .map(|&(s, r)| {
                let c = ExperimentConfig {
                    strategy: s,
                    ..cfg.clone()
                };
                (s, run_experiment(&c, r))
            })
            .collect()
    };
    match rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
    {
        Ok(pool) => pool.install(work),
        Err(_) => work(),
    }
}

/// Writes one strategy's run directory: config, metadata, per-run results and
/// the aggregate. Returns the aggregate, or the first run error.
fn persist_strategy(
    cfg: &ExperimentConfig,
    strategy: Strategy,
    results: Vec<Result<RunReport, RunFailure>>,
    dir: &Path,
) -> Result<Vec<AggregateRecord>, CliError> {
    fs::create_dir_all(dir).map_err(|e| runtime(Error::io(dir, e)))?;
    let c = ExperimentConfig {
        strategy,
        output_dir: None,
        ..cfg.clone()
    };
    write_text(&dir.join("config.toml"), &c.to_toml())?;
    let meta = Meta {
        tool_version: env!("CARGO_PKG_VERSION"),
        strategy,
        n_runs: cfg.n_runs,
        n_train_envs: cfg.n_train_envs,
        eval_every: cfg.eval_every,
        n_eval_envs: cfg.n_eval_envs,
        rollout_steps: cfg.ppo.rollout_steps,
    };
    write_text(
        &dir.join("meta.json"),
        &serde_json::to_string_pretty(&meta).map_err(|e| runtime(e.into()))?,
    )?;

    let mut first_error = None;
    let mut records = Vec::new();
    for (run, result) in results.into_iter().enumerate() {
        let run_dir = dir.join(format!("run_{run:03}"));
        let report = match result {
            Ok(r) => r,
            Err(RunFailure { partial, error: e }) => {
                error!("{strategy} run {run} aborted: {e}");
                first_error.get_or_insert(format!("{strategy} run {run}: {e}"));
                *partial
            }
        };
        save_run(&report, &run_dir).map_err(runtime)?;
        records.push(report.records);
    }
    if let Some(e) = first_error {
        return Err(CliError::Runtime(e));
    }
    let agg = aggregate_runs(&records).map_err(runtime)?;
    export_aggregate(&agg, ExportFormat::Csv, &dir.join("aggregate.csv")).map_err(runtime)?;
    Ok(agg)
}

pub fn cmd_run(args: &RunArgs) -> Result<(), CliError> {
    let mut cfg = resolve_config(&args.overrides)?;
    if let Some(s) = args.strategy {
        cfg.strategy = s.into();
    }
    cfg.validate().map_err(usage)?;
    let dir = output_dir(&cfg, cfg.strategy.name());
    info!(
        "running {} x {} envs into {}",
        cfg.strategy,
        cfg.n_train_envs,
        dir.display()
    );
    let results = run_all(&cfg, &[cfg.strategy])
        .into_iter()
        .map(|(_, r)| r)
        .collect();
    persist_strategy(&cfg, cfg.strategy, results, &dir)?;
    println!("{}", dir.display());
    Ok(())
}

/// Runs every strategy on the shared seed schedule and writes per-strategy
/// directories, `combined.csv` and `plotdata/` under `dir`.
pub fn compare(
    cfg: &ExperimentConfig,
    strategies: &[Strategy],
    dir: &Path,
) -> Result<Vec<(Strategy, Vec<AggregateRecord>)>, CliError> {
    cfg.validate().map_err(usage)?;
    if strategies.len() < 2 {
        return Err(CliError::Usage(
            "compare needs at least two strategies".into(),
        ));
    }
    let mut unique = strategies.to_vec();
    unique.sort();
    unique.dedup();
    if unique.len() != strategies.len() {
        return Err(CliError::Usage("strategies must be distinct".into()));
    }

    let mut all = run_all(cfg, strategies);
    let mut per_strategy = Vec::new();
    let mut first_error = None;
    for &s in strategies {
        let results: Vec<_> = all
            .iter()
            .position(|(st, _)| *st == s)
            .map(|start| {
                all.drain(start..start + cfg.n_runs as usize)
                    .map(|(_, r)| r)
                    .collect()
            })
            .unwrap_or_default();
        match persist_strategy(cfg, s, results, &dir.join(s.name())) {
            Ok(agg) => per_strategy.push((s, agg)),
            Err(e) => {
                first_error.get_or_insert(e);
            }
        }
    }
    if let Some(e) = first_error {
        return Err(e);
    }

    export_comparison(&per_strategy, &dir.join("combined.csv")).map_err(runtime)?;
    let plot_dir = dir.join("plotdata");
    fs::create_dir_all(&plot_dir).map_err(|e| runtime(Error::io(&plot_dir, e)))?;
    for (s, agg) in &per_strategy {
        export_aggregate(agg, ExportFormat::Csv, &plot_dir.join(format!("{s}.csv")))
            .map_err(runtime)?;
    }
    let series: Vec<(String, Vec<AggregateRecord>)> = per_strategy
        .iter()
        .map(|(s, a)| (s.to_string(), a.clone()))
        .collect();
    for metric in AGGREGATE_METRICS {
        write_line_chart(&plot_dir.join(format!("{metric}.svg")), metric, &series)
            .map_err(runtime)?;
    }
    Ok(per_strategy)
}

pub fn cmd_compare(args: &CompareArgs) -> Result<(), CliError> {
    let cfg = resolve_config(&args.overrides)?;
    let strategies: Vec<Strategy> = args.strategy.iter().map(|&s| s.into()).collect();
    let dir = output_dir(&cfg, "compare");
    compare(&cfg, &strategies, &dir)?;
    println!("{}", dir.display());
    Ok(())
}

pub fn cmd_show_env(args: &ShowEnvArgs) -> Result<(), CliError> {
    let mut level_cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p).map_err(usage)?.level,
        None => Default::default(),
    };
    if let Some(w) = args.width {
        level_cfg.width = w;
    }
    if let Some(h) = args.height {
        level_cfg.height = h;
    }
    if let Some(m) = args.max_steps {
        level_cfg.max_steps = m;
    }
    let level = generate_level(args.seed, &level_cfg).map_err(usage)?;
    let mut out = std::io::stdout().lock();
    let text = if args.json {
        format!("{}\n", level.to_json())
    } else {
        let (state, _) = reset(&level);
        format!("{}{}\n", render_ascii(&state), level.to_json())
    };
    out.write_all(text.as_bytes())
        .map_err(|e| CliError::Runtime(e.to_string()))
}

pub fn cmd_inspect_pool(args: &InspectPoolArgs) -> Result<(), CliError> {
    let cp = Checkpoint::load(&args.checkpoint).map_err(usage)?;
    if args.json {
        println!(
            "{}",
            serde_json::to_string_pretty(&cp).map_err(|e| runtime(e.into()))?
        );
        return Ok(());
    }
    println!("strategy:   {}", cp.strategy);
    println!("threshold:  {}", cp.threshold);
    println!("agents:     {}", cp.agents.len());
    println!(
        "main agent: {}",
        cp.main_agent_ref.as_deref().unwrap_or("none")
    );
    println!("{:>6} {:>12} {:>7}  solved", "id", "birth_env", "|solved|");
    for a in &cp.agents {
        let solved: Vec<String> = a.solved.iter().map(|s| s.to_string()).collect();
        println!(
            "{:>6} {:>12} {:>7}  {}",
            a.id,
            a.birth_env,
            a.solved.len(),
            solved.join(",")
        );
    }
    Ok(())
}

/// Converts `metrics.csv` files under `run_dir` (the directory itself or its
/// `run_*` children) to the requested format, plus the aggregate.
pub fn cmd_export(args: &ExportArgs) -> Result<(), CliError> {
    let (format, ext) = match args.format {
        FormatArg::Csv => (ExportFormat::Csv, "csv"),
        FormatArg::Json => (ExportFormat::Json, "json"),
    };
    let dir = &args.run_dir;
    let mut run_dirs: Vec<PathBuf> = if dir.join("metrics.csv").is_file() {
        vec![dir.clone()]
    } else {
        fs::read_dir(dir)
            .map_err(|e| usage(Error::io(dir, e)))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("metrics.csv").is_file())
            .collect()
    };
    run_dirs.sort();
    if run_dirs.is_empty() {
        return Err(CliError::Usage(format!(
            "{}: no metrics.csv found",
            dir.display()
        )));
    }
    let mut runs = Vec::new();
    for d in &run_dirs {
        let records = read_metrics(&d.join("metrics.csv")).map_err(runtime)?;
        let target = d.join(format!("metrics.{ext}"));
        export_metrics(&records, format, &target).map_err(runtime)?;
        println!("{}", target.display());
        runs.push(records);
    }
    let agg = aggregate_runs(&runs).map_err(runtime)?;
    let target = dir.join(format!("aggregate.{ext}"));
    export_aggregate(&agg, format, &target).map_err(runtime)?;
    println!("{}", target.display());
    Ok(())
}
