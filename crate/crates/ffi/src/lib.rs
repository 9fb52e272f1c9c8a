//! C interface to the quinoa engine.
//!
//! Handles are opaque pointers created by `*_new`/`*_load` and released with
//! the matching `*_free`. Every fallible call returns a [`QuinoaStatus`]; on
//! failure [`quinoa_last_error`] describes the cause on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use quinoa::checkpoint::Checkpoint;
use quinoa::config::RunConfig;
use quinoa::envs::{EnvKind, Environment};
use quinoa::flow::FlowPolicy;
use quinoa::temperature::{solve_alpha, DualBatch, TemperatureConfig};
use quinoa::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Result of a C call. The first four values match the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuinoaStatus {
    Ok = 0,
    Config = 1,
    Numeric = 2,
    Io = 3,
    NullPointer = 4,
    InvalidArgument = 5,
    Panic = 6,
}

/// A policy loaded from a checkpoint, with its own sampling generator.
pub struct QuinoaPolicy {
    policy: FlowPolicy,
    rng: ChaCha8Rng,
}

/// One environment instance with its own reset generator.
pub struct QuinoaEnv {
    env: Box<dyn Environment>,
    rng: ChaCha8Rng,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let text = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = text);
}

struct Failure(QuinoaStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match quinoa::cli::exit_code(&e) {
            1 => QuinoaStatus::Config,
            3 => QuinoaStatus::Io,
            _ => QuinoaStatus::Numeric,
        };
        Failure(code, e.to_string())
    }
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure(QuinoaStatus::InvalidArgument, message.into())
}

fn guard(body: impl FnOnce() -> Result<(), Failure>) -> QuinoaStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => QuinoaStatus::Ok,
        Ok(Err(Failure(code, message))) => {
            set_error(&message);
            code
        }
        Err(_) => {
            set_error("internal panic");
            QuinoaStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(QuinoaStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// # Safety
/// `p` must be null or point to `len` readable values.
unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts(p, len))
}

/// # Safety
/// `p` must be null or point to `len` writable values.
unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Failure> {
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// # Safety
/// `p` must be null or a NUL-terminated string.
unsafe fn string<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    non_null(p, what)?;
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))
}

fn expect_len(got: usize, want: usize, what: &str) -> Result<(), Failure> {
    if got == want {
        Ok(())
    } else {
        Err(invalid(format!("{what} has length {got}, expected {want}")))
    }
}

/// Message for the last failed call on this thread; empty if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn quinoa_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads the live policy from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn quinoa_policy_load(path: *const c_char, seed: u64, out: *mut *mut QuinoaPolicy) -> QuinoaStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let path = string(path, "path")?;
        let ckpt = Checkpoint::load(Path::new(path))?;
        let handle = QuinoaPolicy { policy: ckpt.nets.policy().clone(), rng: ChaCha8Rng::seed_from_u64(seed) };
        *out = Box::into_raw(Box::new(handle));
        Ok(())
    })
}

/// # Safety
/// `policy` must be null or a handle from [`quinoa_policy_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn quinoa_policy_free(policy: *mut QuinoaPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// State dimension of the policy, or 0 for a null handle.
///
/// # Safety
/// `policy` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn quinoa_policy_state_dim(policy: *const QuinoaPolicy) -> usize {
    policy.as_ref().map_or(0, |p| p.policy.state_dim())
}

/// Action dimension of the policy, or 0 for a null handle.
///
/// # Safety
/// `policy` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn quinoa_policy_action_dim(policy: *const QuinoaPolicy) -> usize {
    policy.as_ref().map_or(0, |p| p.policy.action_dim())
}

/// Draws one action in `(−1, 1)^D` and optionally its log-density.
///
/// # Safety
/// `policy` must be a live handle, `state` must hold `state_len` values,
/// `action` must have room for `action_len` values and `log_prob` must be
/// null or writable.
#[no_mangle]
pub unsafe extern "C" fn quinoa_policy_sample(
    policy: *mut QuinoaPolicy,
    state: *const f64,
    state_len: usize,
    action: *mut f64,
    action_len: usize,
    log_prob: *mut f64,
) -> QuinoaStatus {
    guard(|| {
        non_null(policy, "policy")?;
        let p = &mut *policy;
        expect_len(state_len, p.policy.state_dim(), "state")?;
        expect_len(action_len, p.policy.action_dim(), "action")?;
        let s = slice(state, state_len, "state")?;
        let out = slice_mut(action, action_len, "action")?;
        let (a, lp) = p.policy.sample(s, &mut p.rng)?;
        out.copy_from_slice(&a);
        if !log_prob.is_null() {
            *log_prob = lp;
        }
        Ok(())
    })
}

/// `log π(a|s)` for one state–action pair.
///
/// # Safety
/// `policy` must be a live handle, the arrays must hold the given number of
/// values and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn quinoa_policy_log_prob(
    policy: *const QuinoaPolicy,
    state: *const f64,
    state_len: usize,
    action: *const f64,
    action_len: usize,
    out: *mut f64,
) -> QuinoaStatus {
    guard(|| {
        non_null(policy, "policy")?;
        non_null(out, "out")?;
        let p = &*policy;
        expect_len(state_len, p.policy.state_dim(), "state")?;
        expect_len(action_len, p.policy.action_dim(), "action")?;
        *out = p.policy.log_prob(slice(state, state_len, "state")?, slice(action, action_len, "action")?)?;
        Ok(())
    })
}

/// Creates an environment by name (`bandit`, `pendulum`, `pointmass`).
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn quinoa_env_new(name: *const c_char, seed: u64, out: *mut *mut QuinoaEnv) -> QuinoaStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let kind: EnvKind = string(name, "name")?.parse()?;
        *out = Box::into_raw(Box::new(QuinoaEnv { env: kind.make(), rng: ChaCha8Rng::seed_from_u64(seed) }));
        Ok(())
    })
}

/// # Safety
/// `env` must be null or a handle from [`quinoa_env_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn quinoa_env_free(env: *mut QuinoaEnv) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// # Safety
/// `env` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn quinoa_env_state_dim(env: *const QuinoaEnv) -> usize {
    env.as_ref().map_or(0, |e| e.env.spec().state_dim)
}

/// # Safety
/// `env` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn quinoa_env_action_dim(env: *const QuinoaEnv) -> usize {
    env.as_ref().map_or(0, |e| e.env.spec().action_dim)
}

/// Starts an episode and writes the first observation.
///
/// # Safety
/// `env` must be a live handle and `obs` must have room for `obs_len` values.
#[no_mangle]
pub unsafe extern "C" fn quinoa_env_reset(env: *mut QuinoaEnv, obs: *mut f64, obs_len: usize) -> QuinoaStatus {
    guard(|| {
        non_null(env, "env")?;
        let e = &mut *env;
        expect_len(obs_len, e.env.spec().state_dim, "observation")?;
        let out = slice_mut(obs, obs_len, "observation")?;
        out.copy_from_slice(&e.env.reset(&mut e.rng));
        Ok(())
    })
}

/// Applies a policy-space action and writes the next observation, reward and
/// termination flag (1 for a genuine terminal state, 0 otherwise).
///
/// # Safety
/// `env` must be a live handle, the arrays must hold the given number of
/// values and `reward` and `terminal` must be writable.
#[no_mangle]
pub unsafe extern "C" fn quinoa_env_step(
    env: *mut QuinoaEnv,
    action: *const f64,
    action_len: usize,
    obs: *mut f64,
    obs_len: usize,
    reward: *mut f64,
    terminal: *mut i32,
) -> QuinoaStatus {
    guard(|| {
        non_null(env, "env")?;
        non_null(reward, "reward")?;
        non_null(terminal, "terminal")?;
        let e = &mut *env;
        let spec = e.env.spec();
        expect_len(action_len, spec.action_dim, "action")?;
        expect_len(obs_len, spec.state_dim, "observation")?;
        let step = e.env.step(slice(action, action_len, "action")?)?;
        slice_mut(obs, obs_len, "observation")?.copy_from_slice(&step.observation);
        *reward = step.reward;
        *terminal = i32::from(step.terminal);
        Ok(())
    })
}

/// Solves the batch temperature for values `v` and log-ratios `kl` with KL
/// budget `epsilon` and default solver settings. `converged` receives 1 for
/// an interior root, 0 when a boundary was returned.
///
/// # Safety
/// `v` and `kl` must hold `n` values; `alpha` and `converged` must be writable.
#[no_mangle]
pub unsafe extern "C" fn quinoa_solve_alpha(
    v: *const f64,
    kl: *const f64,
    n: usize,
    epsilon: f64,
    alpha: *mut f64,
    converged: *mut i32,
) -> QuinoaStatus {
    guard(|| {
        non_null(alpha, "alpha")?;
        non_null(converged, "converged")?;
        let batch = DualBatch::new(slice(v, n, "v")?.to_vec(), slice(kl, n, "kl")?.to_vec())?;
        let config = TemperatureConfig { epsilon, ..Default::default() };
        let sol = solve_alpha(&batch, &config)?;
        *alpha = sol.alpha;
        *converged = i32::from(sol.converged);
        Ok(())
    })
}

/// Runs a full training job from flat `key = value` text, writing the usual
/// outputs to its `output_dir`.
///
/// # Safety
/// `config_text` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn quinoa_train(config_text: *const c_char) -> QuinoaStatus {
    guard(|| {
        let mut config = RunConfig::default();
        config.apply_text(string(config_text, "config_text")?)?;
        quinoa::cli::train(&config)?;
        Ok(())
    })
}
