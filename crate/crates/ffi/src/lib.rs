//! C ABI over the simulator, geometry, SumTree, metrics and trained GVF-BCQ policies.
//!
//! Every function returns an [`LgStatus`]; on failure the thread-local message is
//! available from [`lg_last_error_message`]. Handles are opaque and must be
//! released with the matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fs::File;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::sync::Arc;

use lanegvf::eval::{self, Trajectory};
use lanegvf::geometry::{lane_state, Pose, Vec2};
use lanegvf::gvf::gvf_from_checkpoint;
use lanegvf::nn::Checkpoint;
use lanegvf::policy::{evaluate_policy, Bcq, Controller, EvalConfig, GvfBcqController};
use lanegvf::replay::SumTree;
use lanegvf::run::build_tracks;
use lanegvf::sim::{Action, LaneEnv, SimConfig, TerminationReason, Track};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    NotFound = 3,
    Io = 4,
    /// A numerical or state invariant failed.
    Invariant = 5,
    Panic = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let s = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = s);
}

fn fail(status: LgStatus, msg: impl Into<String>) -> LgStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> LgStatus) -> LgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(LgStatus::Panic, "panic inside lanegvf"),
    }
}

macro_rules! deref {
    ($p:expr) => {
        match unsafe { $p.as_ref() } {
            Some(v) => v,
            None => return fail(LgStatus::NullPointer, concat!(stringify!($p), " is null")),
        }
    };
}

macro_rules! deref_mut {
    ($p:expr) => {
        match unsafe { $p.as_mut() } {
            Some(v) => v,
            None => return fail(LgStatus::NullPointer, concat!(stringify!($p), " is null")),
        }
    };
}

unsafe fn str_arg<'a>(p: *const c_char) -> Result<&'a str, LgStatus> {
    if p.is_null() {
        return Err(fail(LgStatus::NullPointer, "string argument is null"));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(LgStatus::InvalidArgument, "string is not UTF-8"))
}

unsafe fn slice_arg<'a>(p: *const f64, n: usize) -> Result<&'a [f64], LgStatus> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(LgStatus::NullPointer, "array argument is null"));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

/// Message of the last failed call on this thread; empty if none. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn lg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

pub struct LgTrack {
    track: Arc<Track>,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct LgLaneState {
    pub index: usize,
    pub alpha: f64,
    pub beta: f64,
    pub out_of_lane: bool,
}

/// Builds a catalog layout. With `damaged`, markings are damaged using `damage_seed`.
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lg_track_new(name: *const c_char, damaged: bool, damage_seed: u64, out: *mut *mut LgTrack) -> LgStatus {
    guard(|| {
        let out = deref_mut!(out);
        let name = match str_arg(name) {
            Ok(s) => s,
            Err(s) => return s,
        };
        match build_tracks(&[name.to_string()], damaged.then_some(damage_seed)) {
            Ok(mut v) => {
                let (_, track) = v.remove(0);
                *out = Box::into_raw(Box::new(LgTrack { track }));
                LgStatus::Ok
            }
            Err(e) => fail(LgStatus::NotFound, e.to_string()),
        }
    })
}

/// Same layout driven in the opposite direction.
///
/// # Safety
/// `track` must come from `lg_track_new`; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lg_track_reversed(track: *const LgTrack, out: *mut *mut LgTrack) -> LgStatus {
    guard(|| {
        let t = deref!(track);
        let out = deref_mut!(out);
        *out = Box::into_raw(Box::new(LgTrack {
            track: Arc::new(t.track.reversed()),
        }));
        LgStatus::Ok
    })
}

/// # Safety
/// `track` must come from `lg_track_new` or be null.
#[no_mangle]
pub unsafe extern "C" fn lg_track_free(track: *mut LgTrack) {
    if !track.is_null() {
        drop(Box::from_raw(track));
    }
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn lg_track_info(track: *const LgTrack, waypoints: *mut usize, length: *mut f64, half_width: *mut f64) -> LgStatus {
    guard(|| {
        let t = deref!(track);
        *deref_mut!(waypoints) = t.track.path.len();
        *deref_mut!(length) = t.track.path.length();
        *deref_mut!(half_width) = t.track.half_width;
        LgStatus::Ok
    })
}

/// Lane centeredness and road angle of a pose, using a global nearest-waypoint search.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn lg_track_lane_state(track: *const LgTrack, x: f64, y: f64, yaw: f64, out: *mut LgLaneState) -> LgStatus {
    guard(|| {
        let t = deref!(track);
        let out = deref_mut!(out);
        if !(x.is_finite() && y.is_finite() && yaw.is_finite()) {
            return fail(LgStatus::InvalidArgument, "pose must be finite");
        }
        let s = lane_state(&Pose::new(Vec2::new(x, y), yaw, 0.0), &t.track.path, t.track.half_width, None);
        *out = LgLaneState {
            index: s.index,
            alpha: s.alpha,
            beta: s.beta,
            out_of_lane: s.out_of_lane(),
        };
        LgStatus::Ok
    })
}

pub struct LgEnv {
    env: LaneEnv,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct LgStep {
    pub reward: f64,
    pub alpha: f64,
    pub beta: f64,
    pub speed: f64,
    pub terminated: bool,
    pub out_of_lane: bool,
}

/// Simulator on `track` with default settings and `max_steps` per episode.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn lg_env_new(track: *const LgTrack, max_steps: usize, out: *mut *mut LgEnv) -> LgStatus {
    guard(|| {
        let t = deref!(track);
        let out = deref_mut!(out);
        let cfg = SimConfig {
            max_steps,
            ..SimConfig::default()
        };
        if let Err(e) = cfg.validate() {
            return fail(LgStatus::InvalidArgument, e);
        }
        *out = Box::into_raw(Box::new(LgEnv {
            env: LaneEnv::new(t.track.clone(), cfg),
        }));
        LgStatus::Ok
    })
}

/// # Safety
/// `env` must come from `lg_env_new` or be null.
#[no_mangle]
pub unsafe extern "C" fn lg_env_free(env: *mut LgEnv) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// # Safety
/// `env` must be valid.
#[no_mangle]
pub unsafe extern "C" fn lg_env_reset(env: *mut LgEnv, start: usize, lateral_offset: f64) -> LgStatus {
    guard(|| {
        let e = deref_mut!(env);
        if !lateral_offset.is_finite() {
            return fail(LgStatus::InvalidArgument, "lateral_offset must be finite");
        }
        e.env.reset(start, lateral_offset);
        LgStatus::Ok
    })
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn lg_env_step(env: *mut LgEnv, steer: f64, target_speed: f64, out: *mut LgStep) -> LgStatus {
    guard(|| {
        let e = deref_mut!(env);
        let out = deref_mut!(out);
        if !(steer.is_finite() && target_speed.is_finite()) {
            return fail(LgStatus::InvalidArgument, "action must be finite");
        }
        if e.env.is_done() {
            return fail(LgStatus::Invariant, "episode has ended; call lg_env_reset");
        }
        let (_, r) = e.env.step(Action::new(steer, target_speed));
        *out = LgStep {
            reward: r.reward,
            alpha: r.alpha,
            beta: r.beta,
            speed: r.next_state.pose.speed,
            terminated: r.terminated,
            out_of_lane: r.reason == TerminationReason::OutOfLane,
        };
        LgStatus::Ok
    })
}

/// Copies both observation frames, scaled to `[0, 1]`, into `buf`. `written`
/// receives the required length even when `len` is too small.
///
/// # Safety
/// `buf` must hold `len` doubles; other pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn lg_env_observation(env: *const LgEnv, buf: *mut f64, len: usize, written: *mut usize) -> LgStatus {
    guard(|| {
        let e = deref!(env);
        let written = deref_mut!(written);
        let f = e.env.observation().grid_features();
        *written = f.len();
        if len < f.len() {
            return fail(LgStatus::InvalidArgument, format!("buffer holds {len}, need {}", f.len()));
        }
        if buf.is_null() {
            return fail(LgStatus::NullPointer, "buf is null");
        }
        ptr::copy_nonoverlapping(f.as_ptr(), buf, f.len());
        LgStatus::Ok
    })
}

pub struct LgSumTree {
    tree: SumTree,
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lg_sumtree_new(capacity: usize, out: *mut *mut LgSumTree) -> LgStatus {
    guard(|| {
        let out = deref_mut!(out);
        match SumTree::new(capacity) {
            Ok(tree) => {
                *out = Box::into_raw(Box::new(LgSumTree { tree }));
                LgStatus::Ok
            }
            Err(e) => fail(LgStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// # Safety
/// `tree` must come from `lg_sumtree_new` or be null.
#[no_mangle]
pub unsafe extern "C" fn lg_sumtree_free(tree: *mut LgSumTree) {
    if !tree.is_null() {
        drop(Box::from_raw(tree));
    }
}

/// # Safety
/// `tree` must be valid.
#[no_mangle]
pub unsafe extern "C" fn lg_sumtree_set(tree: *mut LgSumTree, index: usize, priority: f64) -> LgStatus {
    guard(|| {
        let t = deref_mut!(tree);
        if index >= t.tree.capacity() {
            return fail(LgStatus::InvalidArgument, format!("index {index} >= capacity {}", t.tree.capacity()));
        }
        match t.tree.set(index, priority) {
            Ok(()) => LgStatus::Ok,
            Err(e) => fail(LgStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn lg_sumtree_total(tree: *const LgSumTree, out: *mut f64) -> LgStatus {
    guard(|| {
        *deref_mut!(out) = deref!(tree).tree.total();
        LgStatus::Ok
    })
}

/// Leaf whose cumulative priority interval contains `u`, for `u` in `[0, total)`.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn lg_sumtree_find(tree: *mut LgSumTree, u: f64, out: *mut usize) -> LgStatus {
    guard(|| {
        let t = deref_mut!(tree);
        let out = deref_mut!(out);
        if !(t.tree.total() > 0.0) {
            return fail(LgStatus::Invariant, "total priority is zero");
        }
        if !u.is_finite() {
            return fail(LgStatus::InvalidArgument, "u must be finite");
        }
        *out = t.tree.find(u);
        LgStatus::Ok
    })
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct LgMetrics {
    pub steps: usize,
    pub reward_per_sec: f64,
    pub avg_speed: f64,
    pub avg_abs_alpha: f64,
    pub avg_abs_beta: f64,
    pub near_out_of_lane_frac: f64,
    pub jerk1_steer: f64,
    pub jerk1_speed: f64,
    pub jerk2_steer: f64,
    pub jerk2_speed: f64,
    pub out_of_lane: bool,
}

impl From<eval::EpisodeMetrics> for LgMetrics {
    fn from(m: eval::EpisodeMetrics) -> Self {
        Self {
            steps: m.steps,
            reward_per_sec: m.reward_per_sec,
            avg_speed: m.avg_speed,
            avg_abs_alpha: m.avg_abs_alpha,
            avg_abs_beta: m.avg_abs_beta,
            near_out_of_lane_frac: m.near_out_of_lane_frac,
            jerk1_steer: m.jerk1_steer,
            jerk1_speed: m.jerk1_speed,
            jerk2_steer: m.jerk2_steer,
            jerk2_speed: m.jerk2_speed,
            out_of_lane: m.out_of_lane,
        }
    }
}

/// Metrics of one logged episode of `n >= 3` steps.
///
/// # Safety
/// Each array must hold `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lg_episode_metrics(
    dt: f64,
    n: usize,
    rewards: *const f64,
    speeds: *const f64,
    alphas: *const f64,
    betas: *const f64,
    steers: *const f64,
    target_speeds: *const f64,
    out_of_lane: bool,
    out: *mut LgMetrics,
) -> LgStatus {
    guard(|| {
        let out = deref_mut!(out);
        if !(dt > 0.0) {
            return fail(LgStatus::InvalidArgument, "dt must be > 0");
        }
        let arrays = [rewards, speeds, alphas, betas, steers, target_speeds].map(|p| slice_arg(p, n));
        let mut cols = Vec::with_capacity(6);
        for a in arrays {
            match a {
                Ok(s) => cols.push(s),
                Err(s) => return s,
            }
        }
        let mut t = Trajectory::new(dt);
        for i in 0..n {
            t.push(cols[0][i], cols[1][i], cols[2][i], cols[3][i], Action::new(cols[4][i], cols[5][i]));
        }
        t.out_of_lane = out_of_lane;
        match eval::episode_metrics(&t) {
            Ok(m) => {
                *out = m.into();
                LgStatus::Ok
            }
            Err(e) => fail(LgStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Track-priority probabilities. A negative length marks a track never sampled;
/// a NaN `kappa` selects the mean of the known lengths.
///
/// # Safety
/// `lengths` and `out` must hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn lg_track_sampling_probs(lengths: *const f64, n: usize, kappa: f64, out: *mut f64) -> LgStatus {
    guard(|| {
        let lengths = match slice_arg(lengths, n) {
            Ok(s) => s,
            Err(s) => return s,
        };
        if n > 0 && out.is_null() {
            return fail(LgStatus::NullPointer, "out is null");
        }
        let last: Vec<Option<f64>> = lengths.iter().map(|&l| (l >= 0.0).then_some(l)).collect();
        let p = eval::track_sampling_probs(&last, (!kappa.is_nan()).then_some(kappa));
        if n > 0 {
            ptr::copy_nonoverlapping(p.as_ptr(), out, n);
        }
        LgStatus::Ok
    })
}

pub struct LgPolicy {
    ctrl: GvfBcqController,
}

fn load_ck(path: &str) -> Result<Checkpoint, LgStatus> {
    let f = File::open(Path::new(path)).map_err(|e| fail(LgStatus::Io, format!("{path}: {e}")))?;
    Checkpoint::read(f).map_err(|e| fail(LgStatus::InvalidArgument, format!("{path}: {e}")))
}

/// Loads a GVF-BCQ policy from its predictor and BCQ checkpoints.
///
/// # Safety
/// Paths must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lg_policy_load(gvf_path: *const c_char, bcq_path: *const c_char, out: *mut *mut LgPolicy) -> LgStatus {
    guard(|| {
        let out = deref_mut!(out);
        let load = || -> Result<LgPolicy, LgStatus> {
            let gvf_ck = load_ck(str_arg(gvf_path)?)?;
            let bcq_ck = load_ck(str_arg(bcq_path)?)?;
            let (gvf, _) = gvf_from_checkpoint(&gvf_ck).map_err(|e| fail(LgStatus::InvalidArgument, e.to_string()))?;
            let bcq = Bcq::from_checkpoint(&bcq_ck).map_err(|e| fail(LgStatus::InvalidArgument, e.to_string()))?;
            Ok(LgPolicy {
                ctrl: GvfBcqController { gvf, bcq },
            })
        };
        match load() {
            Ok(p) => {
                *out = Box::into_raw(Box::new(p));
                LgStatus::Ok
            }
            Err(s) => s,
        }
    })
}

/// # Safety
/// `policy` must come from `lg_policy_load` or be null.
#[no_mangle]
pub unsafe extern "C" fn lg_policy_free(policy: *mut LgPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Greedy action for the environment's current observation.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn lg_policy_act(policy: *mut LgPolicy, env: *const LgEnv, steer: *mut f64, target_speed: *mut f64) -> LgStatus {
    guard(|| {
        let p = deref_mut!(policy);
        let e = deref!(env);
        let steer = deref_mut!(steer);
        let target_speed = deref_mut!(target_speed);
        match p.ctrl.act(&e.env, &e.env.observation()) {
            Ok(a) => {
                *steer = a.steer;
                *target_speed = a.target_speed;
                LgStatus::Ok
            }
            Err(e) => fail(LgStatus::Invariant, e.to_string()),
        }
    })
}

/// Greedy rollout of `seconds` on `track` with speed clipped at `max_speed`.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn lg_policy_evaluate(
    policy: *mut LgPolicy,
    track: *const LgTrack,
    seconds: f64,
    max_speed: f64,
    out: *mut LgMetrics,
) -> LgStatus {
    guard(|| {
        let p = deref_mut!(policy);
        let t = deref!(track);
        let out = deref_mut!(out);
        let sim = SimConfig::default();
        if !(seconds >= 3.0 * sim.dt && max_speed > 0.0) {
            return fail(LgStatus::InvalidArgument, "seconds must cover 3 steps and max_speed must be > 0");
        }
        let ecfg = EvalConfig {
            seconds,
            max_speed,
            start: 0,
        };
        match evaluate_policy(&mut p.ctrl, t.track.clone(), &sim, &ecfg) {
            Ok((m, _)) => {
                *out = m.into();
                LgStatus::Ok
            }
            Err(e) => fail(LgStatus::Invariant, e.to_string()),
        }
    })
}
