//! C interface to `ecopool`.
//!
//! Every object crosses the boundary as an opaque handle created by a
//! `*_new`/`*_generate`/`*_load` function and released by the matching
//! `*_free`. Functions return an [`EcoStatus`]; on failure the message is
//! available from [`eco_last_error`] on the same thread. Strings handed out
//! by the library must be released with [`eco_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use ecopool::ecosystem::{ecosystem_learn, EcoSettings, Pool, Strategy};
use ecopool::gridworld::{
    self, generate_level, Action, Dir, EnvState, Level, LevelConfig, Observation, Pos, OBS_LEN,
};
use ecopool::harness::{adaptability_index, ZetaMode};
use ecopool::policy::{forward, init_params, PolicyParams};
use ecopool::ppo::test_agent;
use ecopool::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EcoStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    EpisodeDone = 3,
    Io = 4,
    Format = 5,
    Runtime = 6,
    Panic = 7,
}

/// What happened when a pool was shown one level.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct EcoOutcome {
    pub level_seed: u64,
    /// Id of the agent credited with the level, or -1.
    pub solved_by: i64,
    pub created_new: bool,
    pub failed: bool,
    pub training_steps: u64,
    pub tests_run: u64,
    pub agents_removed: u64,
}

pub struct EcoLevel(Level);

pub struct EcoEnv {
    level: Level,
    pos: Pos,
    dir: Dir,
    steps_used: u32,
    done: bool,
}

pub struct EcoPolicy(PolicyParams);

pub struct EcoPool(Pool);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: EcoStatus, msg: impl Into<String>) -> EcoStatus {
    set_error(msg);
    status
}

fn status_of(e: &Error) -> EcoStatus {
    match e {
        Error::EpisodeDone => EcoStatus::EpisodeDone,
        Error::Io { .. } => EcoStatus::Io,
        Error::Format { .. } | Error::Json(_) => EcoStatus::Format,
        Error::InvalidLevelConfig(_)
        | Error::InvalidLevel(_)
        | Error::Config(_)
        | Error::Shape(_) => EcoStatus::InvalidArgument,
        _ => EcoStatus::Runtime,
    }
}

/// Runs `f`, converting errors and panics into a status plus message.
fn guard(f: impl FnOnce() -> Result<(), EcoStatus>) -> EcoStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EcoStatus::Ok,
        Ok(Err(status)) => status,
        Err(_) => fail(EcoStatus::Panic, "internal panic"),
    }
}

fn check<T>(r: ecopool::Result<T>) -> Result<T, EcoStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, EcoStatus> {
    p.as_ref()
        .ok_or_else(|| fail(EcoStatus::NullPointer, format!("{what} is null")))
}

unsafe fn as_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, EcoStatus> {
    p.as_mut()
        .ok_or_else(|| fail(EcoStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out<T>(p: *mut T, value: T, what: &str) -> Result<(), EcoStatus> {
    if p.is_null() {
        return Err(fail(EcoStatus::NullPointer, format!("{what} is null")));
    }
    p.write(value);
    Ok(())
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, EcoStatus> {
    if p.is_null() {
        return Err(fail(EcoStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(EcoStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

fn owned_string(s: String) -> *mut c_char {
    CString::new(s).map_or(ptr::null_mut(), CString::into_raw)
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

fn write_obs(obs: &Observation, dst: *mut u8) {
    if dst.is_null() {
        return;
    }
    let flat: Vec<u8> = obs.grid.iter().flatten().flatten().copied().collect();
    // SAFETY: the caller provides room for OBS_LEN bytes.
    unsafe { ptr::copy_nonoverlapping(flat.as_ptr(), dst, OBS_LEN) };
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn eco_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Length of an observation buffer: 7 x 7 cells x 3 channels, row-major,
/// agent at row 6, column 3, facing up.
#[no_mangle]
pub extern "C" fn eco_observation_len() -> usize {
    OBS_LEN
}

/// Copy of the last error message on this thread, or NULL if the last call
/// succeeded. Release with `eco_string_free`.
#[no_mangle]
pub extern "C" fn eco_last_error() -> *mut c_char {
    LAST_ERROR.with(|e| {
        e.borrow()
            .as_ref()
            .map_or(ptr::null_mut(), |s| s.clone().into_raw())
    })
}

/// # Safety
/// `s` must come from this library and not have been freed yet.
#[no_mangle]
pub unsafe extern "C" fn eco_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Generates the level for `seed`. Zero for `width`, `height` or
/// `max_steps` selects the default (9, 9, 100).
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn eco_level_generate(
    seed: u64,
    width: u32,
    height: u32,
    max_steps: u32,
    out: *mut *mut EcoLevel,
) -> EcoStatus {
    guard(|| {
        let d = LevelConfig::default();
        let cfg = LevelConfig {
            width: if width == 0 { d.width } else { width },
            height: if height == 0 { d.height } else { height },
            max_steps: if max_steps == 0 {
                d.max_steps
            } else {
                max_steps
            },
        };
        let level = check(generate_level(seed, &cfg))?;
        unsafe { self::out(out, boxed(EcoLevel(level)), "out") }
    })
}

/// # Safety
/// `json` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn eco_level_from_json(
    json: *const c_char,
    out: *mut *mut EcoLevel,
) -> EcoStatus {
    guard(|| {
        let text = unsafe { c_str(json, "json") }?;
        let level = check(Level::from_json(text))?;
        unsafe { self::out(out, boxed(EcoLevel(level)), "out") }
    })
}

/// Canonical JSON of the level. Release with `eco_string_free`.
///
/// # Safety
/// `level` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn eco_level_to_json(
    level: *const EcoLevel,
    out: *mut *mut c_char,
) -> EcoStatus {
    guard(|| {
        let level = unsafe { as_ref(level, "level") }?;
        unsafe { self::out(out, owned_string(level.0.to_json()), "out") }
    })
}

/// ASCII rendering of the level at its start state.
///
/// # Safety
/// `level` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn eco_level_render(
    level: *const EcoLevel,
    out: *mut *mut c_char,
) -> EcoStatus {
    guard(|| {
        let level = unsafe { as_ref(level, "level") }?;
        let (state, _) = gridworld::reset(&level.0);
        unsafe { self::out(out, owned_string(gridworld::render_ascii(&state)), "out") }
    })
}

/// # Safety
/// `level` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn eco_level_seed(level: *const EcoLevel) -> u64 {
    level.as_ref().map_or(0, |l| l.0.seed())
}

/// # Safety
/// `level` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn eco_level_free(level: *mut EcoLevel) {
    if !level.is_null() {
        drop(Box::from_raw(level));
    }
}

/// Environment over a copy of `level`, already reset. The first
/// observation is written to `obs` if it is not NULL.
///
/// # Safety
/// `level` must be a live handle; `out` must be valid for writes; `obs`
/// must be NULL or have room for `eco_observation_len()` bytes.
#[no_mangle]
pub unsafe extern "C" fn eco_env_new(
    level: *const EcoLevel,
    obs: *mut u8,
    out: *mut *mut EcoEnv,
) -> EcoStatus {
    guard(|| {
        let level = unsafe { as_ref(level, "level") }?.0.clone();
        let (state, o) = gridworld::reset(&level);
        write_obs(&o, obs);
        let env = EcoEnv {
            pos: state.agent_pos,
            dir: state.agent_dir,
            steps_used: 0,
            done: false,
            level,
        };
        unsafe { self::out(out, boxed(env), "out") }
    })
}

/// # Safety
/// As for `eco_env_new`.
#[no_mangle]
pub unsafe extern "C" fn eco_env_reset(env: *mut EcoEnv, obs: *mut u8) -> EcoStatus {
    guard(|| {
        let env = unsafe { as_mut(env, "env") }?;
        let (state, o) = gridworld::reset(&env.level);
        (env.pos, env.dir, env.steps_used, env.done) = (state.agent_pos, state.agent_dir, 0, false);
        write_obs(&o, obs);
        Ok(())
    })
}

/// Applies `action` (0 turn left, 1 turn right, 2 forward).
///
/// # Safety
/// `env` must be a live handle; `obs` must be NULL or have room for
/// `eco_observation_len()` bytes; `reward` and `done` must be NULL or valid
/// for writes.
#[no_mangle]
pub unsafe extern "C" fn eco_env_step(
    env: *mut EcoEnv,
    action: u32,
    obs: *mut u8,
    reward: *mut f64,
    done: *mut bool,
) -> EcoStatus {
    guard(|| {
        let env = unsafe { as_mut(env, "env") }?;
        let action = Action::from_index(action as usize).ok_or_else(|| {
            fail(
                EcoStatus::InvalidArgument,
                format!("unknown action {action}"),
            )
        })?;
        let state = EnvState {
            level: &env.level,
            agent_pos: env.pos,
            agent_dir: env.dir,
            steps_used: env.steps_used,
            done: env.done,
        };
        let s = check(gridworld::step(&state, action))?;
        let (pos, dir, steps, finished) = (
            s.state.agent_pos,
            s.state.agent_dir,
            s.state.steps_used,
            s.done,
        );
        write_obs(&s.observation, obs);
        if !reward.is_null() {
            unsafe { reward.write(s.reward) };
        }
        if !done.is_null() {
            unsafe { done.write(finished) };
        }
        (env.pos, env.dir, env.steps_used, env.done) = (pos, dir, steps, finished);
        Ok(())
    })
}

/// # Safety
/// `env` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn eco_env_free(env: *mut EcoEnv) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// Freshly initialized policy.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn eco_policy_new(seed: u64, out: *mut *mut EcoPolicy) -> EcoStatus {
    guard(|| unsafe { self::out(out, boxed(EcoPolicy(init_params(seed))), "out") })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn eco_policy_load(
    path: *const c_char,
    out: *mut *mut EcoPolicy,
) -> EcoStatus {
    guard(|| {
        let path = PathBuf::from(unsafe { c_str(path, "path") }?);
        let params = check(PolicyParams::load(&path))?;
        unsafe { self::out(out, boxed(EcoPolicy(params)), "out") }
    })
}

/// # Safety
/// `policy` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn eco_policy_save(
    policy: *const EcoPolicy,
    path: *const c_char,
) -> EcoStatus {
    guard(|| {
        let policy = unsafe { as_ref(policy, "policy") }?;
        let path = PathBuf::from(unsafe { c_str(path, "path") }?);
        check(policy.0.save(&path)).map(drop)
    })
}

/// Action probabilities and value estimate for one observation. Writes
/// three probabilities to `probs` and the greedy action to `action`; either
/// output may be NULL.
///
/// # Safety
/// `obs` must point to `eco_observation_len()` bytes; `probs` must be NULL or
/// have room for 3 doubles; `action` and `value` NULL or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn eco_policy_act(
    policy: *const EcoPolicy,
    obs: *const u8,
    probs: *mut f64,
    action: *mut u32,
    value: *mut f64,
) -> EcoStatus {
    guard(|| {
        let policy = unsafe { as_ref(policy, "policy") }?;
        if obs.is_null() {
            return Err(fail(EcoStatus::NullPointer, "obs is null"));
        }
        let bytes = unsafe { std::slice::from_raw_parts(obs, OBS_LEN) };
        let mut o = Observation {
            grid: Default::default(),
        };
        for (dst, src) in o.grid.iter_mut().flatten().flatten().zip(bytes) {
            *dst = *src;
        }
        if !o.is_valid() {
            return Err(fail(
                EcoStatus::InvalidArgument,
                "observation has codes outside 0..=3",
            ));
        }
        let (dist, v) = check(forward(&policy.0, &o))?;
        unsafe {
            if !probs.is_null() {
                ptr::copy_nonoverlapping(dist.probs.as_ptr(), probs, 3);
            }
            if !action.is_null() {
                action.write(dist.greedy().index() as u32);
            }
            if !value.is_null() {
                value.write(v);
            }
        }
        Ok(())
    })
}

/// Total reward of one greedy episode of `policy` on `level`.
///
/// # Safety
/// Handles must be live; `reward` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn eco_policy_test(
    policy: *const EcoPolicy,
    level: *const EcoLevel,
    reward: *mut f64,
) -> EcoStatus {
    guard(|| {
        let policy = unsafe { as_ref(policy, "policy") }?;
        let level = unsafe { as_ref(level, "level") }?;
        let r = check(test_agent(&policy.0, &level.0))?;
        unsafe { out(reward, r, "reward") }
    })
}

/// # Safety
/// `policy` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn eco_policy_free(policy: *mut EcoPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Empty pool. `strategy`: 0 basic, 1 random, 2 best, 3 forked. `budget` is
/// the learn-epoch cap per new agent; 0 selects the default.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn eco_pool_new(
    strategy: u32,
    seed: u64,
    budget: u32,
    out: *mut *mut EcoPool,
) -> EcoStatus {
    guard(|| {
        let strategy = match strategy {
            0 => Strategy::Basic,
            1 => Strategy::Random,
            2 => Strategy::Best,
            3 => Strategy::Forked,
            s => {
                return Err(fail(
                    EcoStatus::InvalidArgument,
                    format!("unknown strategy {s}"),
                ))
            }
        };
        let mut settings = EcoSettings::default();
        if budget > 0 {
            settings.budget = budget as usize;
        }
        unsafe {
            self::out(
                out,
                boxed(EcoPool(Pool::new(strategy, settings, seed))),
                "out",
            )
        }
    })
}

/// Shows `level` to the pool: credits an existing solver or trains a new
/// agent. The level must use the pool's level dimensions (9 x 9, 100 steps).
///
/// # Safety
/// Handles must be live; `outcome` must be NULL or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn eco_pool_learn(
    pool: *mut EcoPool,
    level: *const EcoLevel,
    outcome: *mut EcoOutcome,
) -> EcoStatus {
    guard(|| {
        let pool = unsafe { as_mut(pool, "pool") }?;
        let level = unsafe { as_ref(level, "level") }?;
        let cfg = pool.0.settings().level;
        let l = &level.0;
        if (l.width(), l.height(), l.max_steps()) != (cfg.width, cfg.height, cfg.max_steps) {
            return Err(fail(
                EcoStatus::InvalidArgument,
                "level dimensions differ from the pool's level configuration",
            ));
        }
        let o = check(ecosystem_learn(&mut pool.0, l))?;
        if !outcome.is_null() {
            let c = EcoOutcome {
                level_seed: o.level_seed,
                solved_by: o.solved_by.map_or(-1, |id| id as i64),
                created_new: o.created_new,
                failed: o.failed,
                training_steps: o.training_steps_used,
                tests_run: o.tests_run,
                agents_removed: o.agents_removed,
            };
            unsafe { outcome.write(c) };
        }
        Ok(())
    })
}

/// # Safety
/// `pool` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn eco_pool_len(pool: *const EcoPool) -> usize {
    pool.as_ref().map_or(0, |p| p.0.len())
}

/// Adaptability index: mean over `levels` of the best pool reward on each.
/// The pool is not modified.
///
/// # Safety
/// `levels` must point to `n_levels` live handles; `zeta` must be valid for
/// writes.
#[no_mangle]
pub unsafe extern "C" fn eco_pool_zeta(
    pool: *const EcoPool,
    levels: *const *const EcoLevel,
    n_levels: usize,
    zeta: *mut f64,
) -> EcoStatus {
    guard(|| {
        let pool = unsafe { as_ref(pool, "pool") }?;
        if levels.is_null() {
            return Err(fail(EcoStatus::NullPointer, "levels is null"));
        }
        let handles = unsafe { std::slice::from_raw_parts(levels, n_levels) };
        let levels = handles
            .iter()
            .map(|&h| unsafe { as_ref(h, "level") }.map(|l| l.0.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let (z, _) = check(adaptability_index(&pool.0, &levels, ZetaMode::Max))?;
        unsafe { out(zeta, z, "zeta") }
    })
}

/// Writes a checkpoint directory readable by `ecopool inspect-pool`.
///
/// # Safety
/// `pool` must be a live handle; `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn eco_pool_save(pool: *const EcoPool, dir: *const c_char) -> EcoStatus {
    guard(|| {
        let pool = unsafe { as_ref(pool, "pool") }?;
        let dir = PathBuf::from(unsafe { c_str(dir, "dir") }?);
        check(pool.0.save_checkpoint(&dir)).map(drop)
    })
}

/// # Safety
/// `pool` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn eco_pool_free(pool: *mut EcoPool) {
    if !pool.is_null() {
        drop(Box::from_raw(pool));
    }
}
