//! Acceptance suite. Prints one `[PASS]`/`[FAIL]` line per criterion and
//! exits non-zero if any criterion fails.

mod common;

use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use common::{brute_force, instance, max_relative_error, trajectory};
use ecopool::cli::run_all;
use ecopool::ecosystem::Strategy;
use ecopool::gridworld::{generate_level, step, success_reward, Action, Level, LevelConfig};
use ecopool::harness::{
    adaptability_index, aggregate_runs, mean_stderr, run_experiment, save_run, Audit,
    ExperimentConfig, MetricsRecord, RunReport, ZetaMode,
};
use ecopool::policy::{init_params, LossSpec};
use ecopool::ppo::{compute_gae, learn_epoch, test_agent, Learner, PpoConfig};
use ecopool::rng;
use rand::Rng;

const CHILD_ENV: &str = "ECOPOOL_ACCEPTANCE_CHILD";
const DETERMINISM_SEEDS: u64 = 100;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn report(n: u32, name: &str, elapsed: Duration, v: &Verdict) {
    let tag = if v.pass { "PASS" } else { "FAIL" };
    println!(
        "[{tag}] AC-{n:<2} {name}: {} ({:.1}s)",
        v.detail,
        elapsed.as_secs_f64()
    );
    let _ = std::io::stdout().flush();
}

fn level_dump() -> String {
    let cfg = LevelConfig::default();
    (0..DETERMINISM_SEEDS)
        .map(|s| generate_level(s, &cfg).unwrap().to_json() + "\n")
        .collect()
}

fn child_level_dump() -> Vec<u8> {
    let out = Command::new(std::env::current_exe().unwrap())
        .env(CHILD_ENV, "levels")
        .output()
        .unwrap();
    assert!(out.status.success());
    out.stdout
}

fn run_binary(out: &Path) -> Vec<u8> {
    let status = Command::new(env!("CARGO_BIN_EXE_ecopool"))
        .args([
            "run",
            "--strategy",
            "basic",
            "--envs",
            "10",
            "--runs",
            "1",
            "--eval-every",
            "10",
        ])
        .arg("--out")
        .arg(out)
        .env_remove("RUST_LOG")
        .output()
        .unwrap();
    assert!(
        status.status.success(),
        "{}",
        String::from_utf8_lossy(&status.stderr)
    );
    fs::read(out.join("run_000/metrics.csv")).unwrap()
}

fn ac1_determinism() -> Verdict {
    let a = child_level_dump();
    let b = child_level_dump();
    let local = level_dump();
    let levels_ok = a == b && a == local.as_bytes();

    let tmp = tempfile::tempdir().unwrap();
    let m1 = run_binary(&tmp.path().join("a"));
    let m2 = run_binary(&tmp.path().join("b"));
    let rows = m1.iter().filter(|&&c| c == b'\n').count();
    verdict(
        levels_ok && m1 == m2 && rows == 2,
        format!(
            "{DETERMINISM_SEEDS} levels identical across 2 processes: {levels_ok}; \
             10-env metrics.csv identical across 2 executions: {} ({rows} lines)",
            m1 == m2
        ),
    )
}

fn ac2_gradients() -> Verdict {
    let mut rng = rng::stream(2024, 0);
    let mut worst = 0.0f64;
    let cases = 30;
    for case in 0..cases {
        let spec = LossSpec {
            clip_eps: rng.gen_range(0.05..0.4),
            value_coef: rng.gen_range(0.0..1.0),
            entropy_coef: rng.gen_range(0.0..0.2),
        };
        let n = rng.gen_range(1..8);
        let hidden = rng.gen_range(2..10);
        let (params, batch) = instance(10_000 + case, n, hidden, &spec);
        worst = worst.max(max_relative_error(&params, &batch, &spec));
    }
    verdict(
        worst < 1e-4,
        format!("{cases} random cases, max relative error {worst:.2e} (< 1e-4)"),
    )
}

fn ac3_gae() -> Verdict {
    let mut rng = rng::stream(3, 0);
    let mut worst = 0.0f64;
    let cases = 100;
    for _ in 0..cases {
        let n = rng.gen_range(1..=32);
        let rewards: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let dones: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.15)).collect();
        let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let last = rng.gen_range(-1.0..1.0);
        let (gamma, lambda) = (rng.gen_range(0.8..1.0), rng.gen_range(0.0..1.0));
        let expected = brute_force(&rewards, &dones, &values, last, gamma, lambda);
        let gae = compute_gae(
            &trajectory(rewards, dones, values.clone(), last),
            gamma,
            lambda,
        )
        .unwrap();
        for t in 0..n {
            worst = worst.max((gae.advantages[t] - expected[t]).abs());
            worst = worst.max((gae.returns[t] - expected[t] - values[t]).abs());
        }
    }
    verdict(
        worst < 1e-12,
        format!("{cases} trajectories (T <= 32), max |diff| {worst:.1e} (< 1e-12)"),
    )
}

fn ac4_zeta_and_aggregation() -> Verdict {
    // Zeta on a real pool against a brute-force reward table.
    let cfg = ExperimentConfig {
        strategy: Strategy::Basic,
        n_train_envs: 5,
        eval_every: 5,
        n_eval_envs: 12,
        n_runs: 1,
        ..ExperimentConfig::default()
    };
    let run = run_experiment(&cfg, 0).unwrap();
    let levels: Vec<Level> = cfg
        .eval_seeds()
        .map(|s| generate_level(s, &cfg.level).unwrap())
        .collect();
    let before = run.pool.fingerprint();
    let (zeta, _) = adaptability_index(&run.pool, &levels, ZetaMode::Max).unwrap();
    let read_only = run.pool.fingerprint() == before;
    let oracle: f64 = levels
        .iter()
        .map(|l| {
            run.pool
                .agents()
                .iter()
                .map(|a| test_agent(&a.params, l).unwrap())
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / levels.len() as f64;
    let zeta_err = (zeta - oracle).abs();

    // Aggregation against a two-pass oracle on random tables.
    let mut rng = rng::stream(4, 0);
    let mut agg_err = 0.0f64;
    for _ in 0..20 {
        let n_runs = rng.gen_range(2..7);
        let n_cps = rng.gen_range(1..6);
        let table: Vec<Vec<f64>> = (0..n_runs)
            .map(|_| (0..n_cps).map(|_| rng.gen_range(0.0..1.0)).collect())
            .collect();
        let runs: Vec<Vec<MetricsRecord>> = table
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(k, &z)| MetricsRecord {
                        envs_seen: k as u64 + 1,
                        zeta: z,
                        pool_size: 0,
                        cumulative_training_steps: 0,
                        cumulative_tests: 0,
                        failures: 0,
                    })
                    .collect()
            })
            .collect();
        let agg = aggregate_runs(&runs).unwrap();
        for (k, a) in agg.iter().enumerate() {
            let col: Vec<f64> = table.iter().map(|r| r[k]).collect();
            let n = col.len() as f64;
            let mean = col.iter().sum::<f64>() / n;
            let ss: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum();
            let se = (ss / (n - 1.0) / n).sqrt();
            agg_err = agg_err
                .max((a.zeta.mean - mean).abs())
                .max((a.zeta.stderr - se).abs());
        }
    }
    let s = mean_stderr(&[1.0, 2.0, 3.0]);
    let exact = s.mean == 2.0 && s.stderr == 1.0 / 3f64.sqrt();
    verdict(
        zeta_err < 1e-12 && read_only && agg_err < 1e-12 && exact,
        format!(
            "zeta |diff| {zeta_err:.1e} over {} agents x {} levels, pool unchanged: {read_only}; \
             aggregation |diff| {agg_err:.1e}; (1,2,3) -> stderr 1/sqrt(3) exact: {exact}",
            run.pool.len(),
            levels.len()
        ),
    )
}

fn ac5_reward() -> Verdict {
    let a = success_reward(20, 100);
    let b = success_reward(100, 100);
    // A level whose goal is unreachable within the budget: spin in place.
    let level = generate_level(
        5,
        &LevelConfig {
            max_steps: 3,
            ..LevelConfig::default()
        },
    )
    .unwrap();
    let (mut state, _) = ecopool::gridworld::reset(&level);
    let mut timeout_reward = None;
    for _ in 0..3 {
        let s = step(&state, Action::TurnLeft).unwrap();
        if s.done {
            timeout_reward = Some(s.reward);
        }
        state = s.state;
    }
    verdict(
        a == 0.82 && b == 0.1 && timeout_reward == Some(0.0),
        format!("20/100 -> {a}, 100/100 -> {b}, timeout -> {timeout_reward:?}"),
    )
}

fn ac7_smoke() -> Verdict {
    let level = generate_level(7, &LevelConfig::default()).unwrap();
    let cfg = PpoConfig::default();
    let mut results = Vec::new();
    for seed in 0..5u64 {
        let mut learner = Learner::new(init_params(seed), &cfg);
        let mut r = rng::stream(seed, 7);
        let mut solved = None;
        for epoch in 1..=300 {
            learn_epoch(&mut learner, &level, &cfg, &mut r).unwrap();
            let reward = test_agent(&learner.params, &level).unwrap();
            if reward >= 0.8 {
                solved = Some(epoch);
                break;
            }
        }
        results.push(solved);
    }
    let ok = results.iter().filter(|r| r.is_some()).count();
    let shown: Vec<String> = results
        .iter()
        .map(|r| r.map_or("-".into(), |e| e.to_string()))
        .collect();
    verdict(
        ok >= 4,
        format!(
            "level 7, {ok}/5 seeds reach greedy reward >= 0.8 (epochs: {})",
            shown.join(", ")
        ),
    )
}

type DeskCheck = fn(&Desk) -> Verdict;

struct Desk {
    basic: Vec<RunReport>,
    forked: Vec<RunReport>,
    elapsed: Duration,
}

fn desk_compare() -> Desk {
    let cfg = ExperimentConfig {
        n_train_envs: 50,
        eval_every: 10,
        n_runs: 3,
        level: LevelConfig::default(),
        ..ExperimentConfig::default()
    };
    let start = Instant::now();
    let mut basic = Vec::new();
    let mut forked = Vec::new();
    for (s, r) in run_all(&cfg, &[Strategy::Basic, Strategy::Forked]) {
        let r = r.unwrap_or_else(|f| panic!("{s} run failed: {}", f.error));
        match s {
            Strategy::Forked => forked.push(r),
            _ => basic.push(r),
        }
    }
    Desk {
        basic,
        forked,
        elapsed: start.elapsed(),
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn final_record(r: &RunReport) -> &MetricsRecord {
    r.records.last().unwrap()
}

fn ac6_dominance(desk: &Desk) -> Verdict {
    let runs: Vec<&RunReport> = desk.basic.iter().chain(&desk.forked).collect();
    let logged: usize = runs.iter().map(|r| r.dominance_violations.len()).sum();
    let final_pools: usize = runs
        .iter()
        .map(|r| r.pool.dominance_violations().len())
        .sum();
    let checks: usize = runs
        .iter()
        .map(|r| {
            r.outcomes
                .iter()
                .filter(|o| o.created_new && !o.failed)
                .count()
        })
        .sum();
    verdict(
        logged == 0 && final_pools == 0,
        format!(
            "{} runs, {checks} optimize_pool passes, {logged} subset violations",
            runs.len()
        ),
    )
}

fn ac8_steps(desk: &Desk) -> Verdict {
    let steps = |rs: &[RunReport]| {
        median(
            rs.iter()
                .map(|r| final_record(r).cumulative_training_steps as f64)
                .collect(),
        )
    };
    let (b, f) = (steps(&desk.basic), steps(&desk.forked));
    let ratio = b / f;
    verdict(
        f < b && ratio >= 1.5,
        format!("median cumulative steps basic {b}, forked {f}, basic/forked {ratio:.2} (>= 1.5)"),
    )
}

fn ac9_zeta(desk: &Desk) -> Verdict {
    let pairs: Vec<(f64, f64)> = desk
        .basic
        .iter()
        .zip(&desk.forked)
        .map(|(b, f)| (final_record(b).zeta, final_record(f).zeta))
        .collect();
    let wins = pairs.iter().filter(|(b, f)| f >= b).count();
    let shown: Vec<String> = pairs
        .iter()
        .map(|(b, f)| format!("{f:.3} vs {b:.3}"))
        .collect();
    verdict(
        wins >= 2,
        format!(
            "final zeta forked vs basic per run [{}]: forked >= basic in {wins}/3 (>= 2)",
            shown.join(", ")
        ),
    )
}

fn ac10_credits(desk: &Desk) -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let mut violations = 0;
    let mut checked = 0;
    for (i, r) in desk.basic.iter().chain(&desk.forked).enumerate() {
        let dir = tmp.path().join(format!("run{i}"));
        save_run(r, &dir).unwrap();
        let audit = Audit::load(&dir.join("audit.json")).unwrap();
        for o in audit.outcomes.iter().filter(|o| !o.failed) {
            checked += 1;
            let solver_in_pool = o.solved_by.is_some();
            let credited = audit.credits.iter().any(|c| {
                Some(c.agent_id) == o.solved_by && c.level_seed == o.level_seed && c.reward >= 0.8
            });
            if !(solver_in_pool && credited) {
                violations += 1;
            }
        }
    }
    verdict(
        violations == 0,
        format!("{checked} non-failed levels audited, {violations} without a passing credit"),
    )
}

fn main() -> ExitCode {
    if std::env::var(CHILD_ENV).as_deref() == Ok("levels") {
        print!("{}", level_dump());
        return ExitCode::SUCCESS;
    }

    let mut results: Vec<(u32, &str, Duration, Verdict)> = Vec::new();
    let mut timed =
        |n: u32, name: &'static str, limit: Option<Duration>, f: &dyn Fn() -> Verdict| {
            let start = Instant::now();
            let mut v = f();
            let elapsed = start.elapsed();
            if let Some(limit) = limit.filter(|l| elapsed > *l) {
                v.pass = false;
                v.detail += &format!("; runtime over {}s", limit.as_secs());
            }
            eprintln!("AC-{n} finished in {:.1}s", elapsed.as_secs_f64());
            results.push((n, name, elapsed, v));
        };
    timed(
        1,
        "determinism",
        Some(Duration::from_secs(120)),
        &ac1_determinism,
    );
    timed(
        2,
        "gradient check",
        Some(Duration::from_secs(60)),
        &ac2_gradients,
    );
    timed(3, "GAE oracle", None, &ac3_gae);
    timed(
        4,
        "zeta and aggregation oracles",
        None,
        &ac4_zeta_and_aggregation,
    );
    timed(5, "reward formula", None, &ac5_reward);
    timed(
        7,
        "PPO smoke convergence",
        Some(Duration::from_secs(600)),
        &ac7_smoke,
    );

    let desk = desk_compare();
    eprintln!(
        "desk compare finished in {:.0}s",
        desk.elapsed.as_secs_f64()
    );
    let shared: [(u32, &str, DeskCheck); 4] = [
        (6, "pool dominance invariant", ac6_dominance),
        (8, "forked needs fewer training steps", ac8_steps),
        (9, "forked adaptability >= basic", ac9_zeta),
        (10, "solving post-condition", ac10_credits),
    ];
    for (n, name, f) in shared {
        results.push((n, name, desk.elapsed, f(&desk)));
    }

    results.sort_by_key(|r| r.0);
    println!("desk compare (AC-6, 8, 9, 10): basic vs forked, 50 envs x 3 runs, 9x9");
    for (n, name, elapsed, v) in &results {
        report(*n, name, *elapsed, v);
    }
    let all_pass = results.iter().all(|r| r.3.pass);
    if all_pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
