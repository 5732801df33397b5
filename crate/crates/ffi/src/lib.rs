//! C ABI over the safety kernels, the online environment and policy
//! checkpoints.
//!
//! Every function returns an `RsStatus`. On failure the message is kept per
//! thread and can be copied out with `rs_last_error_message`. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use rampsafe::config::RunConfig;
use rampsafe::dynamics::ControlInput;
use rampsafe::env::{OnlineEnv, OBS_DIM};
use rampsafe::numerics::RngStream;
use rampsafe::policy::{Checkpoint, PolicyParams};
use rampsafe::safety::{self, Axis, CbfConfig, CbfMode, ChanceMargin, PairGeometry, SafetyConstraint};
use rampsafe::Error;

/// Length of the online observation vector.
pub const RS_OBS_DIM: usize = 10;

const _: () = assert!(RS_OBS_DIM == OBS_DIM);

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RsStatus {
    Ok = 0,
    NullPointer = 1,
    Domain = 2,
    Dimension = 3,
    Config = 4,
    Parse = 5,
    Checkpoint = 6,
    Io = 7,
    InvalidArgument = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RsAxis {
    X = 0,
    Y = 1,
    Coupled = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RsCbfMode {
    Coupled = 0,
    Decoupled = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RsChanceMargin {
    Exact = 0,
    Unscaled = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RsCbfConfig {
    pub alpha: f64,
    pub eta: f64,
    pub r_safe: f64,
    pub dt: f64,
    pub u_min: f64,
    pub u_max: f64,
    pub mode: RsCbfMode,
    pub margin: RsChanceMargin,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RsPairGeometry {
    pub dx: [f64; 2],
    pub dv: [f64; 2],
    pub eps_mean: [f64; 2],
    pub eps_var: [f64; 2],
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RsConstraint {
    pub axis: RsAxis,
    pub a: [f64; 2],
    pub b: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RsStepResult {
    pub reward: f64,
    pub filtered: [f64; 2],
    pub done: bool,
    pub reached_goal: bool,
    pub infeasible: bool,
}

/// Opaque online environment.
pub struct RsEnv {
    inner: OnlineEnv,
}

/// Opaque actor network.
pub struct RsPolicy {
    inner: PolicyParams,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(err: &Error) -> RsStatus {
    match err {
        Error::Domain(_) => RsStatus::Domain,
        Error::Dimension { .. } => RsStatus::Dimension,
        Error::Config(_) => RsStatus::Config,
        Error::Parse(_) => RsStatus::Parse,
        Error::Checkpoint(_) | Error::Json(_) => RsStatus::Checkpoint,
        Error::Io { .. } | Error::MissingFiles { .. } => RsStatus::Io,
    }
}

enum Failure {
    Null(&'static str),
    Invalid(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> RsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            RsStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            RsStatus::NullPointer
        }
        Ok(Err(Failure::Invalid(msg))) => {
            set_error(msg);
            RsStatus::InvalidArgument
        }
        Ok(Err(Failure::Core(e))) => {
            let status = status_of(&e);
            set_error(e.to_string());
            status
        }
        Err(_) => {
            set_error("panic inside rampsafe".into());
            RsStatus::Panic
        }
    }
}

unsafe fn non_null<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn non_null_mut<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn utf8<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure::Invalid(format!("{what} is not UTF-8: {e}")))
}

impl From<RsAxis> for Axis {
    fn from(a: RsAxis) -> Self {
        match a {
            RsAxis::X => Axis::X,
            RsAxis::Y => Axis::Y,
            RsAxis::Coupled => Axis::Coupled,
        }
    }
}

impl From<Axis> for RsAxis {
    fn from(a: Axis) -> Self {
        match a {
            Axis::X => RsAxis::X,
            Axis::Y => RsAxis::Y,
            Axis::Coupled => RsAxis::Coupled,
        }
    }
}

impl From<&RsCbfConfig> for CbfConfig {
    fn from(c: &RsCbfConfig) -> Self {
        CbfConfig {
            alpha: c.alpha,
            eta: c.eta,
            r_safe: c.r_safe,
            dt: c.dt,
            u_min: c.u_min,
            u_max: c.u_max,
            mode: match c.mode {
                RsCbfMode::Coupled => CbfMode::Coupled,
                RsCbfMode::Decoupled => CbfMode::Decoupled,
            },
            margin: match c.margin {
                RsChanceMargin::Exact => ChanceMargin::Exact,
                RsChanceMargin::Unscaled => ChanceMargin::Unscaled,
            },
        }
    }
}

impl From<&RsPairGeometry> for PairGeometry {
    fn from(p: &RsPairGeometry) -> Self {
        PairGeometry {
            dx: p.dx,
            dv: p.dv,
            eps_mean: p.eps_mean,
            eps_var: p.eps_var,
        }
    }
}

impl From<SafetyConstraint> for RsConstraint {
    fn from(c: SafetyConstraint) -> Self {
        RsConstraint {
            axis: c.axis.into(),
            a: c.a,
            b: c.b,
        }
    }
}

impl From<&RsConstraint> for SafetyConstraint {
    fn from(c: &RsConstraint) -> Self {
        SafetyConstraint {
            axis: c.axis.into(),
            a: c.a,
            b: c.b,
        }
    }
}

fn checked_cfg(cfg: &RsCbfConfig) -> Result<CbfConfig, Failure> {
    let cfg = CbfConfig::from(cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn check_axis(cfg: &CbfConfig, axis: Axis) -> Result<(), Failure> {
    if cfg.axes().contains(&axis) {
        Ok(())
    } else {
        Err(Failure::Invalid(format!("axis {axis:?} is not used in {:?} mode", cfg.mode)))
    }
}

/// Length of the pending error message in bytes, excluding the NUL.
#[no_mangle]
pub extern "C" fn rs_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().len())
}

/// Copies the calling thread's last error message into `buf` as a
/// NUL-terminated string, truncating to `len - 1` bytes. Returns the number
/// of bytes written, excluding the NUL.
///
/// # Safety
/// `buf` must be valid for `len` bytes or null.
#[no_mangle]
pub unsafe extern "C" fn rs_last_error_message(buf: *mut c_char, len: usize) -> usize {
    if buf.is_null() || len == 0 {
        return 0;
    }
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let n = msg.len().min(len - 1);
        ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
        *buf.add(n) = 0;
        n
    })
}

/// Default CBF parameters.
#[no_mangle]
pub extern "C" fn rs_cbf_config_default() -> RsCbfConfig {
    let c = CbfConfig::default();
    RsCbfConfig {
        alpha: c.alpha,
        eta: c.eta,
        r_safe: c.r_safe,
        dt: c.dt,
        u_min: c.u_min,
        u_max: c.u_max,
        mode: match c.mode {
            CbfMode::Coupled => RsCbfMode::Coupled,
            CbfMode::Decoupled => RsCbfMode::Decoupled,
        },
        margin: match c.margin {
            ChanceMargin::Exact => RsChanceMargin::Exact,
            ChanceMargin::Unscaled => RsChanceMargin::Unscaled,
        },
    }
}

/// # Safety
/// All pointers must be valid for their types.
#[no_mangle]
pub unsafe extern "C" fn rs_barrier(
    pair: *const RsPairGeometry,
    cfg: *const RsCbfConfig,
    axis: RsAxis,
    out: *mut f64,
) -> RsStatus {
    guard(|| {
        let cfg = checked_cfg(non_null(cfg, "cfg")?)?;
        let pair = PairGeometry::from(non_null(pair, "pair")?);
        check_axis(&cfg, axis.into())?;
        *non_null_mut(out, "out")? = safety::barrier(&pair, &cfg, axis.into());
        Ok(())
    })
}

/// # Safety
/// All pointers must be valid for their types.
#[no_mangle]
pub unsafe extern "C" fn rs_chance_constraint(
    pair: *const RsPairGeometry,
    cfg: *const RsCbfConfig,
    axis: RsAxis,
    out: *mut RsConstraint,
) -> RsStatus {
    guard(|| {
        let cfg = checked_cfg(non_null(cfg, "cfg")?)?;
        let pair = PairGeometry::from(non_null(pair, "pair")?);
        check_axis(&cfg, axis.into())?;
        let c = safety::chance_constraint(&pair, &cfg, axis.into())?;
        *non_null_mut(out, "out")? = c.into();
        Ok(())
    })
}

/// Writes one constraint per axis in use (1 coupled, 2 decoupled) to `out`
/// and their count to `written`.
///
/// # Safety
/// `out` must be valid for `capacity` constraints; other pointers for their
/// types.
#[no_mangle]
pub unsafe extern "C" fn rs_pair_constraints(
    pair: *const RsPairGeometry,
    cfg: *const RsCbfConfig,
    out: *mut RsConstraint,
    capacity: usize,
    written: *mut usize,
) -> RsStatus {
    guard(|| {
        let cfg = checked_cfg(non_null(cfg, "cfg")?)?;
        let pair = PairGeometry::from(non_null(pair, "pair")?);
        let written = non_null_mut(written, "written")?;
        let cons = safety::pair_constraints(&pair, &cfg)?;
        if capacity < cons.len() {
            return Err(Failure::Invalid(format!("capacity {capacity} < {} constraints", cons.len())));
        }
        let out = slice_mut(out, cons.len(), "out")?;
        for (slot, c) in out.iter_mut().zip(cons) {
            *slot = c.into();
        }
        *written = out.len();
        Ok(())
    })
}

/// Projects `nominal` onto the box and the constraints.
///
/// # Safety
/// `constraints` must be valid for `count` entries; `nominal` and `out` for
/// two doubles.
#[no_mangle]
pub unsafe extern "C" fn rs_safety_filter(
    nominal: *const f64,
    constraints: *const RsConstraint,
    count: usize,
    cfg: *const RsCbfConfig,
    out: *mut f64,
    infeasible: *mut bool,
) -> RsStatus {
    guard(|| {
        let cfg = checked_cfg(non_null(cfg, "cfg")?)?;
        let nominal = slice(nominal, 2, "nominal")?;
        let cons: Vec<SafetyConstraint> = slice(constraints, count, "constraints")?.iter().map(Into::into).collect();
        if cons.iter().any(|c| !c.a.iter().all(|v| v.is_finite()) || !c.b.is_finite()) {
            return Err(Failure::Invalid("constraint coefficients must be finite".into()));
        }
        let res = safety::safety_filter(&ControlInput::new(nominal[0], nominal[1]), &cons, &cfg);
        slice_mut(out, 2, "out")?.copy_from_slice(&res.u.as_array());
        *non_null_mut(infeasible, "infeasible")? = res.infeasible;
        Ok(())
    })
}

/// Creates an online environment from a run-config TOML document (null for
/// defaults). Only the `seed` and `[scenario]` parts are used.
///
/// # Safety
/// `config_toml` must be null or a NUL-terminated string; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn rs_env_new(config_toml: *const c_char, seed: u64, out: *mut *mut RsEnv) -> RsStatus {
    guard(|| {
        let out = non_null_mut(out, "out")?;
        let cfg = if config_toml.is_null() {
            RunConfig::default()
        } else {
            RunConfig::from_toml(utf8(config_toml, "config_toml")?)?
        };
        let env = OnlineEnv::new(cfg.scenario, &RngStream::new(seed))?;
        *out = Box::into_raw(Box::new(RsEnv { inner: env }));
        Ok(())
    })
}

/// # Safety
/// `env` must come from `rs_env_new` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rs_env_free(env: *mut RsEnv) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// Resets the episode to start time `t0` and writes the raw observation.
///
/// # Safety
/// `env` valid; `obs` valid for `RS_OBS_DIM` doubles.
#[no_mangle]
pub unsafe extern "C" fn rs_env_reset(env: *mut RsEnv, t0: f64, obs: *mut f64) -> RsStatus {
    guard(|| {
        let env = non_null_mut(env, "env")?;
        if !t0.is_finite() || t0 < 0.0 {
            return Err(Failure::Invalid(format!("t0 must be finite and >= 0, got {t0}")));
        }
        let out = slice_mut(obs, OBS_DIM, "obs")?;
        out.copy_from_slice(&env.inner.reset_at(t0));
        Ok(())
    })
}

/// Applies one policy action (longitudinal acceleration, m/s²).
///
/// # Safety
/// `env` and `result` valid.
#[no_mangle]
pub unsafe extern "C" fn rs_env_step(env: *mut RsEnv, action: f64, result: *mut RsStepResult) -> RsStatus {
    guard(|| {
        let env = non_null_mut(env, "env")?;
        let result = non_null_mut(result, "result")?;
        let s = env.inner.step(action)?;
        *result = RsStepResult {
            reward: s.reward,
            filtered: s.filtered,
            done: s.done,
            reached_goal: s.reached_goal,
            infeasible: s.infeasible,
        };
        Ok(())
    })
}

/// Raw observation (`scaled = false`) or the scaled policy features.
///
/// # Safety
/// `env` valid; `obs` valid for `RS_OBS_DIM` doubles.
#[no_mangle]
pub unsafe extern "C" fn rs_env_observation(env: *const RsEnv, scaled: bool, obs: *mut f64) -> RsStatus {
    guard(|| {
        let env = non_null(env, "env")?;
        let out = slice_mut(obs, OBS_DIM, "obs")?;
        if scaled {
            out.copy_from_slice(&env.inner.features());
        } else {
            out.copy_from_slice(&env.inner.observation());
        }
        Ok(())
    })
}

/// Current ego/host distance and the episode minimum so far, m.
///
/// # Safety
/// `env` valid; outputs valid or null.
#[no_mangle]
pub unsafe extern "C" fn rs_env_distance(env: *const RsEnv, current: *mut f64, minimum: *mut f64) -> RsStatus {
    guard(|| {
        let env = non_null(env, "env")?;
        if let Some(c) = current.as_mut() {
            *c = env.inner.distance();
        }
        if let Some(m) = minimum.as_mut() {
            *m = env.inner.stats().min_distance;
        }
        Ok(())
    })
}

/// Loads the actor from a checkpoint file.
///
/// # Safety
/// `path` NUL-terminated; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn rs_policy_load(path: *const c_char, out: *mut *mut RsPolicy) -> RsStatus {
    guard(|| {
        let out = non_null_mut(out, "out")?;
        let path = PathBuf::from(utf8(path, "path")?);
        let ckpt = Checkpoint::load(&path)?;
        *out = Box::into_raw(Box::new(RsPolicy { inner: ckpt.actor }));
        Ok(())
    })
}

/// Parses the actor from checkpoint JSON text.
///
/// # Safety
/// `json` NUL-terminated; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn rs_policy_from_json(json: *const c_char, out: *mut *mut RsPolicy) -> RsStatus {
    guard(|| {
        let out = non_null_mut(out, "out")?;
        let ckpt = Checkpoint::from_json(utf8(json, "json")?)?;
        *out = Box::into_raw(Box::new(RsPolicy { inner: ckpt.actor }));
        Ok(())
    })
}

/// # Safety
/// `policy` must come from a `rs_policy_*` constructor and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn rs_policy_free(policy: *mut RsPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Observation and action sizes of the actor.
///
/// # Safety
/// `policy` valid; outputs valid or null.
#[no_mangle]
pub unsafe extern "C" fn rs_policy_dims(policy: *const RsPolicy, obs_dim: *mut usize, action_dim: *mut usize) -> RsStatus {
    guard(|| {
        let p = non_null(policy, "policy")?;
        if let Some(o) = obs_dim.as_mut() {
            *o = p.inner.obs_dim();
        }
        if let Some(a) = action_dim.as_mut() {
            *a = p.inner.action_dim();
        }
        Ok(())
    })
}

/// Gaussian policy mean and standard deviation for one observation.
///
/// # Safety
/// `obs` valid for `obs_len` doubles; `mean` and `std` (or null) for
/// `action_len`.
#[no_mangle]
pub unsafe extern "C" fn rs_policy_forward(
    policy: *const RsPolicy,
    obs: *const f64,
    obs_len: usize,
    mean: *mut f64,
    std: *mut f64,
    action_len: usize,
) -> RsStatus {
    guard(|| {
        let p = non_null(policy, "policy")?;
        let obs = slice(obs, obs_len, "obs")?;
        let (m, s) = p.inner.forward(obs)?;
        if action_len != m.len() {
            return Err(Error::Dimension {
                expected: m.len(),
                got: action_len,
            }
            .into());
        }
        slice_mut(mean, action_len, "mean")?.copy_from_slice(&m);
        if !std.is_null() {
            slice_mut(std, action_len, "std")?.copy_from_slice(&s);
        }
        Ok(())
    })
}
