//! Experiment protocol: stream training levels through a pool, measure the
//! adaptability index on held-out levels at a fixed cadence, and aggregate
//! repeated runs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ecosystem::{
    ecosystem_learn, Credit, EcoSettings, EnvOutcome, Pool, Strategy, DEFAULT_BUDGET,
    DEFAULT_THRESHOLD,
};
use crate::error::{Error, Result};
use crate::gridworld::{generate_level, Level, LevelConfig};
use crate::ppo::{test_agent, PpoConfig};

/// How the per-level reward of the whole pool is extracted for ζ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ZetaMode {
    /// Best agent's reward on each level.
    #[default]
    Max,
    /// Mean of all agents' rewards on each level.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub strategy: Strategy,
    pub n_train_envs: u64,
    pub eval_every: u64,
    pub n_eval_envs: u64,
    pub train_seed_base: u64,
    pub eval_seed_base: u64,
    pub n_runs: u64,
    pub threshold: f64,
    /// Learn-epoch budget per new agent.
    pub budget: usize,
    pub optimize_pool: bool,
    pub zeta_mode: ZetaMode,
    /// Worker threads for independent runs; 0 uses every core.
    pub jobs: usize,
    pub output_dir: Option<PathBuf>,
    pub ppo: PpoConfig,
    pub level: LevelConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            strategy: Strategy::Forked,
            n_train_envs: 500,
            eval_every: 50,
            n_eval_envs: 20,
            train_seed_base: 0,
            eval_seed_base: 1 << 40,
            n_runs: 5,
            threshold: DEFAULT_THRESHOLD,
            budget: DEFAULT_BUDGET,
            optimize_pool: true,
            zeta_mode: ZetaMode::Max,
            jobs: 0,
            output_dir: None,
            ppo: PpoConfig::default(),
            level: LevelConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)
            .map_err(|e| Error::Config(e.message().to_string() + &key_hint(&e)))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentConfig::from_toml(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), strip_config_prefix(&e))))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialization is infallible")
    }

    pub fn settings(&self) -> EcoSettings {
        EcoSettings {
            threshold: self.threshold,
            budget: self.budget,
            optimize_pool: self.optimize_pool,
            ppo: self.ppo,
            level: self.level,
        }
    }

    /// Seed of training level `index` in run `run`.
    pub fn train_seed(&self, run: u64, index: u64) -> u64 {
        self.train_seed_base + run * self.n_train_envs + index
    }

    pub fn eval_seeds(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.n_eval_envs).map(move |j| self.eval_seed_base + j)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::Config(format!("{key}: {msg}")));
        if self.n_train_envs == 0 {
            return bad("n_train_envs", "must be positive".into());
        }
        if self.eval_every == 0 || !self.n_train_envs.is_multiple_of(self.eval_every) {
            return bad(
                "eval_every",
                format!("must divide n_train_envs ({})", self.n_train_envs),
            );
        }
        if self.n_eval_envs == 0 {
            return bad("n_eval_envs", "must be positive".into());
        }
        if self.n_runs == 0 {
            return bad("n_runs", "must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad("threshold", "must be in [0, 1]".into());
        }
        if self.budget == 0 {
            return bad("budget", "must be at least 1".into());
        }
        self.ppo.validate()?;
        self.level
            .validate()
            .map_err(|e| Error::Config(format!("level: {e}")))?;

        let train_len = self
            .n_runs
            .checked_mul(self.n_train_envs)
            .ok_or_else(|| Error::Config("n_runs * n_train_envs overflows".into()))?;
        let train_end = self
            .train_seed_base
            .checked_add(train_len)
            .ok_or_else(|| Error::Config("train_seed_base: seed range overflows".into()))?;
        let eval_end = self
            .eval_seed_base
            .checked_add(self.n_eval_envs)
            .ok_or_else(|| Error::Config("eval_seed_base: seed range overflows".into()))?;
        if self.train_seed_base < eval_end && self.eval_seed_base < train_end {
            return bad(
                "eval_seed_base",
                format!(
                    "seed ranges overlap (train {}..{}, eval {}..{})",
                    self.train_seed_base, train_end, self.eval_seed_base, eval_end
                ),
            );
        }
        Ok(())
    }
}

fn key_hint(e: &toml::de::Error) -> String {
    match e.span() {
        Some(span) => format!(" (at byte {})", span.start),
        None => String::new(),
    }
}

fn strip_config_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

/// Snapshot of one run at a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub envs_seen: u64,
    pub zeta: f64,
    pub pool_size: u64,
    pub cumulative_training_steps: u64,
    pub cumulative_tests: u64,
    pub failures: u64,
}

pub const METRICS_COLUMNS: [&str; 6] = [
    "envs_seen",
    "zeta",
    "pool_size",
    "cum_steps",
    "cum_tests",
    "failures",
];

/// Mean and standard error of one metric across runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateRecord {
    pub envs_seen: u64,
    pub zeta: Stat,
    pub pool_size: Stat,
    pub cum_steps: Stat,
    pub cum_tests: Stat,
    pub failures: Stat,
}

impl AggregateRecord {
    pub fn metric(&self, name: &str) -> Option<Stat> {
        match name {
            "zeta" => Some(self.zeta),
            "pool_size" => Some(self.pool_size),
            "cum_steps" => Some(self.cum_steps),
            "cum_tests" => Some(self.cum_tests),
            "failures" => Some(self.failures),
            _ => None,
        }
    }
}

pub const AGGREGATE_METRICS: [&str; 5] =
    ["zeta", "pool_size", "cum_steps", "cum_tests", "failures"];

/// Everything a run produced, for persistence and auditing.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub run: u64,
    pub strategy: Strategy,
    pub records: Vec<MetricsRecord>,
    pub outcomes: Vec<EnvOutcome>,
    pub train_seeds: Vec<u64>,
    pub eval_seeds: Vec<u64>,
    /// Dominance violations found after each pool change; should stay empty.
    pub dominance_violations: Vec<(u64, u64, u64)>,
    pub pool: Pool,
}

impl RunReport {
    pub fn credits(&self) -> &[Credit] {
        self.pool.credits()
    }

    pub fn audit(&self) -> Audit {
        Audit {
            run: self.run,
            strategy: self.strategy,
            train_seeds: self.train_seeds.clone(),
            eval_seeds: self.eval_seeds.clone(),
            outcomes: self.outcomes.clone(),
            credits: self.pool.credits().to_vec(),
            dominance_violations: self.dominance_violations.clone(),
        }
    }
}

/// Audit log written next to each run's metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Audit {
    pub run: u64,
    pub strategy: Strategy,
    pub train_seeds: Vec<u64>,
    pub eval_seeds: Vec<u64>,
    pub outcomes: Vec<EnvOutcome>,
    pub credits: Vec<Credit>,
    /// `(level seed, dominated agent, dominating agent)`.
    pub dominance_violations: Vec<(u64, u64, u64)>,
}

impl Audit {
    pub fn load(path: &Path) -> Result<Audit> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e))
    }
}

/// A run that stopped early, with everything it produced before the error.
#[derive(Debug)]
pub struct RunFailure {
    pub partial: Box<RunReport>,
    pub error: Error,
}

/// Mean over `eval_levels` of the pool's reward on each level. The pool is
/// only read. Returns `(zeta, tests_run)`.
pub fn adaptability_index(
    pool: &Pool,
    eval_levels: &[Level],
    mode: ZetaMode,
) -> Result<(f64, u64)> {
    if eval_levels.is_empty() {
        return Err(Error::Config(
            "adaptability index needs at least one level".into(),
        ));
    }
    let mut total = 0.0;
    let mut tests = 0;
    for level in eval_levels {
        let mut best = 0.0f64;
        let mut sum = 0.0;
        for agent in pool.agents() {
            let r = test_agent(&agent.params, level)?;
            tests += 1;
            best = best.max(r);
            sum += r;
        }
        total += match mode {
            ZetaMode::Max => best,
            ZetaMode::Mean if pool.is_empty() => 0.0,
            ZetaMode::Mean => sum / pool.len() as f64,
        };
    }
    Ok((total / eval_levels.len() as f64, tests))
}

/// Presents `cfg.n_train_envs` levels of run `run` to a fresh pool.
pub fn run_experiment(cfg: &ExperimentConfig, run: u64) -> Result<RunReport, RunFailure> {
    let eval_seeds: Vec<u64> = cfg.eval_seeds().collect();
    let mut report = RunReport {
        run,
        strategy: cfg.strategy,
        records: Vec::new(),
        outcomes: Vec::new(),
        train_seeds: Vec::new(),
        eval_seeds: eval_seeds.clone(),
        dominance_violations: Vec::new(),
        pool: Pool::new(cfg.strategy, cfg.settings(), run),
    };
    match drive(cfg, run, &eval_seeds, &mut report) {
        Ok(()) => Ok(report),
        Err(error) => Err(RunFailure {
            partial: Box::new(report),
            error,
        }),
    }
}

fn drive(
    cfg: &ExperimentConfig,
    run: u64,
    eval_seeds: &[u64],
    report: &mut RunReport,
) -> Result<()> {
    cfg.validate()?;
    let eval_levels = eval_seeds
        .iter()
        .map(|&s| generate_level(s, &cfg.level))
        .collect::<Result<Vec<_>>>()?;
    let mut cum_steps = 0;
    let mut cum_tests = 0;
    let mut failures = 0;

    for i in 0..cfg.n_train_envs {
        let seed = cfg.train_seed(run, i);
        let level = generate_level(seed, &cfg.level)?;
        report.train_seeds.push(seed);
        let outcome = ecosystem_learn(&mut report.pool, &level)?;
        cum_steps += outcome.training_steps_used;
        cum_tests += outcome.tests_run;
        failures += outcome.failed as u64;
        report.outcomes.push(outcome);
        if outcome.created_new && cfg.optimize_pool {
            for (f, g) in report.pool.dominance_violations() {
                report.dominance_violations.push((seed, f, g));
            }
        }

        let seen = i + 1;
        if seen % cfg.eval_every == 0 {
            let (zeta, _) = adaptability_index(&report.pool, &eval_levels, cfg.zeta_mode)?;
            report.records.push(MetricsRecord {
                envs_seen: seen,
                zeta,
                pool_size: report.pool.len() as u64,
                cumulative_training_steps: cum_steps,
                cumulative_tests: cum_tests,
                failures,
            });
            log::info!(
                "{} run {run}: {seen} envs, zeta {zeta:.3}, pool {}, steps {cum_steps}",
                cfg.strategy,
                report.pool.len()
            );
        }
    }
    Ok(())
}

/// Mean of `values`; standard error `s / sqrt(n)` with the `n - 1` sample
/// deviation, 0 for a single value.
pub fn mean_stderr(values: &[f64]) -> Stat {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return Stat { mean, stderr: 0.0 };
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Stat {
        mean,
        stderr: var.sqrt() / n.sqrt(),
    }
}

/// Per-checkpoint mean and standard error over runs.
pub fn aggregate_runs(runs: &[Vec<MetricsRecord>]) -> Result<Vec<AggregateRecord>> {
    let first = runs
        .first()
        .ok_or_else(|| Error::MismatchedCheckpoints("no runs".into()))?;
    let checkpoints: Vec<u64> = first.iter().map(|r| r.envs_seen).collect();
    for (i, run) in runs.iter().enumerate() {
        let cps: Vec<u64> = run.iter().map(|r| r.envs_seen).collect();
        if cps != checkpoints {
            return Err(Error::MismatchedCheckpoints(format!(
                "run {i} has checkpoints {cps:?}, run 0 has {checkpoints:?}"
            )));
        }
    }
    let stat = |k: usize, f: fn(&MetricsRecord) -> f64| {
        mean_stderr(&runs.iter().map(|r| f(&r[k])).collect::<Vec<_>>())
    };
    Ok(checkpoints
        .iter()
        .enumerate()
        .map(|(k, &envs_seen)| AggregateRecord {
            envs_seen,
            zeta: stat(k, |r| r.zeta),
            pool_size: stat(k, |r| r.pool_size as f64),
            cum_steps: stat(k, |r| r.cumulative_training_steps as f64),
            cum_tests: stat(k, |r| r.cumulative_tests as f64),
            failures: stat(k, |r| r.failures as f64),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Csv,
    Json,
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn csv_bytes(header: &[String], rows: &[Vec<String>]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(row).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

/// One row per checkpoint. CSV uses [`METRICS_COLUMNS`]; JSON is an array of
/// objects with the record's field names.
pub fn export_metrics(records: &[MetricsRecord], format: ExportFormat, path: &Path) -> Result<()> {
    let bytes = match format {
        ExportFormat::Json => serde_json::to_vec_pretty(records)?,
        ExportFormat::Csv => {
            let header: Vec<String> = METRICS_COLUMNS.iter().map(|s| s.to_string()).collect();
            let rows: Vec<Vec<String>> = records
                .iter()
                .map(|r| {
                    vec![
                        r.envs_seen.to_string(),
                        r.zeta.to_string(),
                        r.pool_size.to_string(),
                        r.cumulative_training_steps.to_string(),
                        r.cumulative_tests.to_string(),
                        r.failures.to_string(),
                    ]
                })
                .collect();
            csv_bytes(&header, &rows)
        }
    };
    write_file(path, &bytes)
}

#[derive(Deserialize)]
struct MetricsRow {
    envs_seen: u64,
    zeta: f64,
    pool_size: u64,
    cum_steps: u64,
    cum_tests: u64,
    failures: u64,
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "json") {
        return serde_json::from_slice(&text).map_err(|e| Error::format(path, e));
    }
    let mut reader = csv::Reader::from_reader(&text[..]);
    reader
        .deserialize::<MetricsRow>()
        .map(|row| {
            let r = row.map_err(|e| Error::format(path, e))?;
            Ok(MetricsRecord {
                envs_seen: r.envs_seen,
                zeta: r.zeta,
                pool_size: r.pool_size,
                cumulative_training_steps: r.cum_steps,
                cumulative_tests: r.cum_tests,
                failures: r.failures,
            })
        })
        .collect()
}

/// `envs_seen`, then `{metric}_mean` and `{metric}_stderr` per metric.
pub fn export_aggregate(
    records: &[AggregateRecord],
    format: ExportFormat,
    path: &Path,
) -> Result<()> {
    let bytes = match format {
        ExportFormat::Json => serde_json::to_vec_pretty(records)?,
        ExportFormat::Csv => {
            let mut header = vec!["envs_seen".to_string()];
            for m in AGGREGATE_METRICS {
                header.push(format!("{m}_mean"));
                header.push(format!("{m}_stderr"));
            }
            let rows: Vec<Vec<String>> = records
                .iter()
                .map(|r| {
                    let mut row = vec![r.envs_seen.to_string()];
                    for m in AGGREGATE_METRICS {
                        let s = r.metric(m).expect("known metric");
                        row.push(s.mean.to_string());
                        row.push(s.stderr.to_string());
                    }
                    row
                })
                .collect();
            csv_bytes(&header, &rows)
        }
    };
    write_file(path, &bytes)
}

/// Side-by-side table: per checkpoint, ζ, pool size and cumulative steps
/// (means over runs) for each strategy.
pub fn export_comparison(
    per_strategy: &[(Strategy, Vec<AggregateRecord>)],
    path: &Path,
) -> Result<()> {
    let mut header = vec!["envs_seen".to_string()];
    for (s, _) in per_strategy {
        for m in ["zeta", "pool_size", "cum_steps"] {
            header.push(format!("{s}_{m}"));
        }
    }
    let n = per_strategy.first().map_or(0, |(_, a)| a.len());
    let mut rows = Vec::with_capacity(n);
    for k in 0..n {
        let mut row = vec![per_strategy[0].1[k].envs_seen.to_string()];
        for (s, agg) in per_strategy {
            let rec = agg.get(k).ok_or_else(|| {
                Error::MismatchedCheckpoints(format!("{s} has fewer checkpoints"))
            })?;
            row.push(rec.zeta.mean.to_string());
            row.push(rec.pool_size.mean.to_string());
            row.push(rec.cum_steps.mean.to_string());
        }
        rows.push(row);
    }
    write_file(path, &csv_bytes(&header, &rows))
}

/// Writes a run's metrics, audit log and final pool under `dir`.
pub fn save_run(report: &RunReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    export_metrics(&report.records, ExportFormat::Csv, &dir.join("metrics.csv"))?;
    let audit = serde_json::to_vec_pretty(&report.audit())?;
    write_file(&dir.join("audit.json"), &audit)?;
    report.pool.save_checkpoint(&dir.join("pool"))
}
