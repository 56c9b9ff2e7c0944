//! The eco-system: a pool of specialist agents grown one unseen level at a
//! time.
//!
//! For each level the pool is scanned for an agent that already solves it.
//! If none does, a new agent is initialized according to the pool's
//! [`Strategy`], trained on the level until it solves it, inserted, and
//! then used to prune agents whose solved-sets it covers.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use log::{debug, info};
use rand::{Rng as _, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridworld::{generate_level, Level, LevelConfig};
use crate::policy::{clone_params, init_params, PolicyParams};
use crate::ppo::{learn_epoch, test_agent, Learner, PpoConfig};
use crate::rng::{self, Rng};

pub const DEFAULT_THRESHOLD: f64 = 0.8;
pub const DEFAULT_BUDGET: usize = 300;
pub const CHECKPOINT_VERSION: u32 = 1;

const STREAM_POOL: u64 = 0xEC0;
const STREAM_TRAIN: u64 = 0x7A1;

/// How a newly created agent gets its initial weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Fresh random weights.
    Basic,
    /// Copy of a uniformly chosen pool agent.
    Random,
    /// Copy of the pool agent that scored highest on the new level.
    Best,
    /// Copy of a main agent kept outside the pool.
    Forked,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Basic,
        Strategy::Random,
        Strategy::Best,
        Strategy::Forked,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Basic => "basic",
            Strategy::Random => "random",
            Strategy::Best => "best",
            Strategy::Forked => "forked",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown strategy {s:?} (expected basic, random, best or forked)"
                ))
            })
    }
}

/// Training and scan settings shared by every agent of a pool.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EcoSettings {
    pub threshold: f64,
    /// Maximum learn-epochs spent on one new agent.
    pub budget: usize,
    /// Run the dominance-pruning pass after each insertion.
    pub optimize_pool: bool,
    pub ppo: PpoConfig,
    pub level: LevelConfig,
}

impl Default for EcoSettings {
    fn default() -> Self {
        EcoSettings {
            threshold: DEFAULT_THRESHOLD,
            budget: DEFAULT_BUDGET,
            optimize_pool: true,
            ppo: PpoConfig::default(),
            level: LevelConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub id: u64,
    pub params: PolicyParams,
    /// Seeds of the levels this agent is credited with solving.
    pub solved: BTreeSet<u64>,
    pub birth_env: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CreditKind {
    /// The level the agent was trained on.
    Birth,
    /// An existing agent solved a new level during the scan.
    Scan,
    /// Taken over from another agent during pruning.
    Absorbed,
}

/// Every insertion into a solved-set, with the test reward that justified it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Credit {
    pub agent_id: u64,
    pub level_seed: u64,
    pub reward: f64,
    pub kind: CreditKind,
}

/// Bookkeeping for one `ecosystem_learn` call.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvOutcome {
    pub level_seed: u64,
    pub solved_by: Option<u64>,
    pub created_new: bool,
    pub training_steps_used: u64,
    pub epochs_used: u64,
    pub failed: bool,
    pub tests_run: u64,
    /// Test reward of the credited agent on this level.
    pub credit_reward: Option<f64>,
    pub agents_removed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pool {
    agents: Vec<Agent>,
    main_agent: Option<PolicyParams>,
    strategy: Strategy,
    settings: EcoSettings,
    rng: Rng,
    next_id: u64,
    credits: Vec<Credit>,
}

/// Result of scanning the pool on one level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scan {
    /// First agent in pool order whose reward met the threshold.
    pub solver: Option<u64>,
    /// First agent with the highest observed reward.
    pub best_id: Option<u64>,
    pub best_reward: f64,
    pub solver_reward: Option<f64>,
    pub tests_run: u64,
}

/// Result of [`train_until_solved`].
#[derive(Debug, Clone)]
pub struct Training {
    pub agent: Agent,
    pub epochs_used: u64,
    pub steps_used: u64,
    pub failed: bool,
    pub final_reward: f64,
    pub tests_run: u64,
}

impl Pool {
    /// Empty pool. In forked mode the main agent is created here.
    pub fn new(strategy: Strategy, settings: EcoSettings, seed: u64) -> Self {
        let mut rng = rng::stream(seed, STREAM_POOL);
        let main_agent = (strategy == Strategy::Forked).then(|| init_params(rng.next_u64()));
        Pool {
            agents: Vec::new(),
            main_agent,
            strategy,
            settings,
            rng,
            next_id: 0,
            credits: Vec::new(),
        }
    }

    pub fn agents(&self) -> &[Agent] {
        &self.agents
    }

    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }

    pub fn main_agent(&self) -> Option<&PolicyParams> {
        self.main_agent.as_ref()
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn settings(&self) -> &EcoSettings {
        &self.settings
    }

    pub fn threshold(&self) -> f64 {
        self.settings.threshold
    }

    pub fn credits(&self) -> &[Credit] {
        &self.credits
    }

    pub fn agent(&self, id: u64) -> Option<&Agent> {
        self.agents.iter().find(|a| a.id == id)
    }

    fn agent_mut(&mut self, id: u64) -> Option<&mut Agent> {
        self.agents.iter_mut().find(|a| a.id == id)
    }

    fn level(&self, seed: u64) -> Result<Level> {
        generate_level(seed, &self.settings.level)
    }

    /// Ordered pairs `(f, g)` of distinct agents with `solved(f) ⊆ solved(g)`.
    pub fn dominance_violations(&self) -> Vec<(u64, u64)> {
        let mut out = Vec::new();
        for f in &self.agents {
            for g in &self.agents {
                if f.id != g.id && f.solved.is_subset(&g.solved) {
                    out.push((f.id, g.id));
                }
            }
        }
        out
    }

    /// Serialized state including every parameter. Two pools with equal
    /// fingerprints are indistinguishable to the eco-system.
    pub fn fingerprint(&self) -> String {
        let mut s = String::new();
        for a in &self.agents {
            s.push_str(&format!("{}:{:?}:{};", a.id, a.solved, a.params.to_json()));
        }
        if let Some(m) = &self.main_agent {
            s.push_str(&m.to_json());
        }
        s.push_str(&format!("{:?}{}", self.rng, self.next_id));
        s
    }

    /// Writes `checkpoint.json` plus one params file per agent into `dir`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut agents = Vec::with_capacity(self.agents.len());
        for a in &self.agents {
            let params_ref = format!("agent_{:05}.json", a.id);
            a.params.save(&dir.join(&params_ref))?;
            agents.push(AgentEntry {
                id: a.id,
                birth_env: a.birth_env,
                solved: a.solved.iter().copied().collect(),
                params_ref,
            });
        }
        let main_agent_ref = match &self.main_agent {
            Some(m) => {
                let name = "main_agent.json".to_string();
                m.save(&dir.join(&name))?;
                Some(name)
            }
            None => None,
        };
        let cp = Checkpoint {
            version: CHECKPOINT_VERSION,
            strategy: self.strategy,
            threshold: self.settings.threshold,
            agents,
            main_agent_ref,
        };
        let path = dir.join("checkpoint.json");
        let text = serde_json::to_string_pretty(&cp)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Rebuilds a pool from a checkpoint directory. The random stream is
    /// re-seeded from `seed`.
    pub fn load_checkpoint(dir: &Path, settings: EcoSettings, seed: u64) -> Result<Pool> {
        let cp = Checkpoint::load(dir)?;
        let mut pool = Pool::new(
            cp.strategy,
            EcoSettings {
                threshold: cp.threshold,
                ..settings
            },
            seed,
        );
        for entry in &cp.agents {
            pool.agents.push(Agent {
                id: entry.id,
                params: PolicyParams::load(&dir.join(&entry.params_ref))?,
                solved: entry.solved.iter().copied().collect(),
                birth_env: entry.birth_env,
            });
        }
        pool.next_id = pool.agents.iter().map(|a| a.id + 1).max().unwrap_or(0);
        pool.main_agent = match &cp.main_agent_ref {
            Some(name) => Some(PolicyParams::load(&dir.join(name))?),
            None => None,
        };
        if (pool.strategy == Strategy::Forked) != pool.main_agent.is_some() {
            return Err(Error::format(
                dir.join("checkpoint.json"),
                "main agent must be present exactly in forked mode",
            ));
        }
        Ok(pool)
    }

    #[cfg(test)]
    pub(crate) fn push_agent_for_test(&mut self, params: PolicyParams, solved: &[u64]) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        self.agents.push(Agent {
            id,
            params,
            solved: solved.iter().copied().collect(),
            birth_env: solved.first().copied().unwrap_or(0),
        });
        id
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentEntry {
    pub id: u64,
    pub birth_env: u64,
    pub solved: Vec<u64>,
    pub params_ref: String,
}

/// On-disk pool description; parameters live in sibling files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub strategy: Strategy,
    pub threshold: f64,
    pub agents: Vec<AgentEntry>,
    pub main_agent_ref: Option<String>,
}

impl Checkpoint {
    /// Reads `checkpoint.json` from `path`, which may be the file or its directory.
    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = if path.is_dir() {
            path.join("checkpoint.json")
        } else {
            path.to_path_buf()
        };
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let cp: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::format(&file, e))?;
        if cp.version != CHECKPOINT_VERSION {
            return Err(Error::format(
                &file,
                format!("unsupported version {}", cp.version),
            ));
        }
        Ok(cp)
    }
}

/// Scans agents in pool order. Basic, Random and Forked stop at the first
/// solver; Best always visits every agent to find the best scorer.
pub fn find_best_agent(pool: &Pool, level: &Level) -> Result<Scan> {
    let exhaustive = pool.strategy == Strategy::Best;
    let mut scan = Scan {
        solver: None,
        best_id: None,
        best_reward: 0.0,
        solver_reward: None,
        tests_run: 0,
    };
    for agent in &pool.agents {
        let reward = test_agent(&agent.params, level)?;
        scan.tests_run += 1;
        if scan.best_id.is_none() || reward > scan.best_reward {
            scan.best_id = Some(agent.id);
            scan.best_reward = reward;
        }
        if reward >= pool.settings.threshold && scan.solver.is_none() {
            scan.solver = Some(agent.id);
            scan.solver_reward = Some(reward);
            if !exhaustive {
                break;
            }
        }
    }
    Ok(scan)
}

/// Creates the next agent according to the pool's strategy. Degenerate
/// cases (no pool member to copy from) fall back to fresh weights.
pub fn initialize_agent(pool: &mut Pool, best_id: Option<u64>, birth_env: u64) -> Agent {
    let id = pool.next_id;
    pool.next_id += 1;
    let params = match pool.strategy {
        Strategy::Basic => None,
        Strategy::Random if !pool.agents.is_empty() => {
            let idx = pool.rng.gen_range(0..pool.agents.len());
            Some(clone_params(&pool.agents[idx].params))
        }
        Strategy::Best => best_id
            .and_then(|b| pool.agent(b))
            .map(|a| clone_params(&a.params)),
        Strategy::Forked => pool.main_agent.as_ref().map(clone_params),
        Strategy::Random => None,
    };
    let params = params.unwrap_or_else(|| {
        if pool.strategy != Strategy::Basic {
            info!(
                "{} initialization has no source for agent {id}; using fresh weights",
                pool.strategy
            );
        }
        init_params(pool.rng.next_u64())
    });
    Agent {
        id,
        params,
        solved: BTreeSet::new(),
        birth_env,
    }
}

/// Alternates learn-epochs and greedy tests until the agent meets the
/// threshold or `budget` epochs are spent.
pub fn train_until_solved(
    agent: Agent,
    level: &Level,
    settings: &EcoSettings,
    rng: &mut Rng,
) -> Result<Training> {
    let mut learner = Learner::new(agent.params, &settings.ppo);
    let mut reward = test_agent(&learner.params, level)?;
    let mut tests_run = 1;
    let mut epochs = 0u64;
    let mut steps = 0u64;
    while reward < settings.threshold && (epochs as usize) < settings.budget {
        steps += learn_epoch(&mut learner, level, &settings.ppo, rng)? as u64;
        epochs += 1;
        reward = test_agent(&learner.params, level)?;
        tests_run += 1;
    }
    let failed = reward < settings.threshold;
    Ok(Training {
        agent: Agent {
            params: learner.params,
            ..agent
        },
        epochs_used: epochs,
        steps_used: steps,
        failed,
        final_reward: reward,
        tests_run,
    })
}

/// Credits the newest agent with every level of the others it solves and
/// removes agents whose solved-set it covers, then sorts the pool.
/// Returns `(tests_run, agents_removed)`.
pub fn optimize_pool(pool: &mut Pool, new_id: u64) -> Result<(u64, u64)> {
    let new_idx = pool
        .agents
        .iter()
        .position(|a| a.id == new_id)
        .ok_or_else(|| Error::Config(format!("agent {new_id} is not in the pool")))?;
    let mut tested: BTreeMap<u64, f64> = BTreeMap::new();
    let mut tests = 0u64;
    let mut removed = Vec::new();

    for f in 0..pool.agents.len() {
        if f == new_idx {
            continue;
        }
        let seeds: Vec<u64> = pool.agents[f].solved.iter().copied().collect();
        for w in seeds {
            if pool.agents[new_idx].solved.contains(&w) {
                continue;
            }
            let reward = match tested.get(&w) {
                Some(&r) => r,
                None => {
                    let level = pool.level(w)?;
                    let r = test_agent(&pool.agents[new_idx].params, &level)?;
                    tests += 1;
                    tested.insert(w, r);
                    r
                }
            };
            if reward >= pool.settings.threshold {
                pool.agents[new_idx].solved.insert(w);
                pool.credits.push(Credit {
                    agent_id: new_id,
                    level_seed: w,
                    reward,
                    kind: CreditKind::Absorbed,
                });
            }
        }
        if pool.agents[f]
            .solved
            .is_subset(&pool.agents[new_idx].solved)
        {
            removed.push(pool.agents[f].id);
        }
    }
    if !removed.is_empty() {
        debug!("agent {new_id} replaces {removed:?}");
        pool.agents.retain(|a| !removed.contains(&a.id));
    }
    sort_pool(pool);
    Ok((tests, removed.len() as u64))
}

/// Orders agents by solved-set size, largest first, ties by ascending id.
pub fn sort_pool(pool: &mut Pool) {
    pool.agents
        .sort_by(|a, b| b.solved.len().cmp(&a.solved.len()).then(a.id.cmp(&b.id)));
}

/// Presents one unseen level to the eco-system.
pub fn ecosystem_learn(pool: &mut Pool, level: &Level) -> Result<EnvOutcome> {
    let seed = level.seed();
    let scan = find_best_agent(pool, level)?;
    let mut outcome = EnvOutcome {
        level_seed: seed,
        solved_by: None,
        created_new: false,
        training_steps_used: 0,
        epochs_used: 0,
        failed: false,
        tests_run: scan.tests_run,
        credit_reward: None,
        agents_removed: 0,
    };

    if let (Some(solver), Some(reward)) = (scan.solver, scan.solver_reward) {
        let agent = pool.agent_mut(solver).expect("solver is in the pool");
        agent.solved.insert(seed);
        pool.credits.push(Credit {
            agent_id: solver,
            level_seed: seed,
            reward,
            kind: CreditKind::Scan,
        });
        outcome.solved_by = Some(solver);
        outcome.credit_reward = Some(reward);
        return Ok(outcome);
    }

    let agent = initialize_agent(pool, scan.best_id, seed);
    let mut train_rng = rng::stream(pool.rng.next_u64(), STREAM_TRAIN);
    let training = train_until_solved(agent, level, &pool.settings, &mut train_rng)?;
    outcome.created_new = true;
    outcome.training_steps_used = training.steps_used;
    outcome.epochs_used = training.epochs_used;
    outcome.tests_run += training.tests_run;

    if training.failed {
        info!(
            "level {seed}: agent {} not solved after {} epochs (reward {:.3})",
            training.agent.id, training.epochs_used, training.final_reward
        );
        outcome.failed = true;
        return Ok(outcome);
    }

    let mut agent = training.agent;
    let id = agent.id;
    agent.solved.insert(seed);
    pool.credits.push(Credit {
        agent_id: id,
        level_seed: seed,
        reward: training.final_reward,
        kind: CreditKind::Birth,
    });
    if pool.strategy == Strategy::Forked {
        pool.main_agent = Some(clone_params(&agent.params));
    }
    pool.agents.push(agent);
    if pool.settings.optimize_pool {
        let (tests, removed) = optimize_pool(pool, id)?;
        outcome.tests_run += tests;
        outcome.agents_removed = removed;
    } else {
        sort_pool(pool);
    }
    outcome.solved_by = Some(id);
    outcome.credit_reward = Some(training.final_reward);
    Ok(outcome)
}
