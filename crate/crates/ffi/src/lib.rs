//! C ABI over the fedlps simulator.
//!
//! Objects are opaque handles created by `*_new` and released by `*_free`.
//! Every fallible call returns an [`FlpsStatus`]; on failure the message is
//! available from [`flps_last_error`] on the same thread. Strings handed out
//! by the library must be released with [`flps_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use fedlps::bandit::{reward, utility, BanditAgent};
use fedlps::rng::{stream, Purpose, StreamRng};
use fedlps::{Config, FlpsError, Simulation};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlpsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Io = 4,
    Numeric = 5,
    Structural = 6,
    Parse = 7,
    Panic = 8,
}

/// A running simulation.
pub struct FlpsSimulation {
    sim: Simulation,
}

/// A standalone ratio bandit with its own random stream.
pub struct FlpsBandit {
    agent: BanditAgent,
    seed: u64,
    step: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &FlpsError) -> FlpsStatus {
    match err {
        FlpsError::Structural(_) => FlpsStatus::Structural,
        FlpsError::Config(_) => FlpsStatus::Config,
        FlpsError::NonFinite { .. } => FlpsStatus::Numeric,
        FlpsError::Parse { .. } => FlpsStatus::Parse,
        FlpsError::Io { .. } => FlpsStatus::Io,
    }
}

/// Run `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), FlpsStatus>) -> FlpsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FlpsStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            FlpsStatus::Panic
        }
    }
}

fn fail(err: FlpsError) -> FlpsStatus {
    let s = status_of(&err);
    set_error(err.to_string());
    s
}

fn null(what: &str) -> FlpsStatus {
    set_error(format!("{what} is null"));
    FlpsStatus::NullPointer
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, FlpsStatus> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error(format!("{what} is not valid UTF-8"));
        FlpsStatus::InvalidUtf8
    })
}

unsafe fn write_string(out: *mut *mut c_char, s: String) -> Result<(), FlpsStatus> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    let c = CString::new(s).map_err(|_| {
        set_error("string contains an interior NUL".into());
        FlpsStatus::Structural
    })?;
    *out = c.into_raw();
    Ok(())
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn flps_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn flps_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Release a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn flps_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Build a simulation from TOML text.
///
/// # Safety
/// `toml` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn flps_simulation_new(toml: *const c_char, out: *mut *mut FlpsSimulation) -> FlpsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("output pointer"));
        }
        let text = read_str(toml, "config text")?;
        let cfg = Config::from_toml(text).map_err(fail)?;
        let sim = Simulation::new(cfg).map_err(fail)?;
        *out = Box::into_raw(Box::new(FlpsSimulation { sim }));
        Ok(())
    })
}

/// # Safety
/// `sim` must come from `flps_simulation_new` and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn flps_simulation_free(sim: *mut FlpsSimulation) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}

unsafe fn sim_mut<'a>(sim: *mut FlpsSimulation) -> Result<&'a mut FlpsSimulation, FlpsStatus> {
    sim.as_mut().ok_or_else(|| null("simulation handle"))
}

/// Run one round. `global_cost` (may be NULL) receives the round's duration.
///
/// # Safety
/// `sim` must be a live handle; `global_cost` NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn flps_simulation_step(sim: *mut FlpsSimulation, global_cost: *mut f64) -> FlpsStatus {
    guard(|| {
        let s = sim_mut(sim)?;
        if s.sim.is_done() {
            set_error("all configured rounds have run".into());
            return Err(FlpsStatus::Config);
        }
        let ledger = s.sim.step().map_err(fail)?;
        if !global_cost.is_null() {
            *global_cost = ledger.global_cost;
        }
        Ok(())
    })
}

/// Run all remaining rounds.
///
/// # Safety
/// `sim` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn flps_simulation_run(sim: *mut FlpsSimulation) -> FlpsStatus {
    guard(|| sim_mut(sim)?.sim.run().map_err(fail))
}

/// Rounds completed so far.
///
/// # Safety
/// `sim` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn flps_simulation_round(sim: *const FlpsSimulation, out: *mut usize) -> FlpsStatus {
    guard(|| {
        let s = sim.as_ref().ok_or_else(|| null("simulation handle"))?;
        if out.is_null() {
            return Err(null("output pointer"));
        }
        *out = s.sim.round();
        Ok(())
    })
}

/// Mean personalised test accuracy over all clients, in percent.
///
/// # Safety
/// `sim` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn flps_simulation_mean_accuracy(sim: *const FlpsSimulation, out: *mut f64) -> FlpsStatus {
    guard(|| {
        let s = sim.as_ref().ok_or_else(|| null("simulation handle"))?;
        if out.is_null() {
            return Err(null("output pointer"));
        }
        let accs = s.sim.test_accuracies().map_err(fail)?;
        *out = accs.iter().sum::<f64>() / accs.len() as f64;
        Ok(())
    })
}

/// Metrics CSV so far. Free the result with `flps_string_free`.
///
/// # Safety
/// `sim` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn flps_simulation_metrics_csv(sim: *const FlpsSimulation, out: *mut *mut c_char) -> FlpsStatus {
    guard(|| {
        let s = sim.as_ref().ok_or_else(|| null("simulation handle"))?;
        write_string(out, s.sim.metrics_csv())
    })
}

/// Run manifest as JSON. Free the result with `flps_string_free`.
///
/// # Safety
/// `sim` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn flps_simulation_manifest_json(sim: *const FlpsSimulation, out: *mut *mut c_char) -> FlpsStatus {
    guard(|| {
        let s = sim.as_ref().ok_or_else(|| null("simulation handle"))?;
        let m = s.sim.manifest().map_err(fail)?;
        write_string(out, m.to_string())
    })
}

/// Create a bandit over `[s_min, 1)` split into `partitions` intervals.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn flps_bandit_new(
    partitions: usize,
    s_min: f64,
    rounds: usize,
    clients: usize,
    client_fraction: f64,
    rho: f64,
    seed: u64,
    out: *mut *mut FlpsBandit,
) -> FlpsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("output pointer"));
        }
        let agent = BanditAgent::init(partitions, s_min, rounds, clients, client_fraction, rho, &mut stream(seed, Purpose::BanditInit, 0, 0))
            .map_err(fail)?;
        *out = Box::into_raw(Box::new(FlpsBandit { agent, seed, step: 0 }));
        Ok(())
    })
}

/// # Safety
/// `b` must come from `flps_bandit_new` and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn flps_bandit_free(b: *mut FlpsBandit) {
    if !b.is_null() {
        drop(Box::from_raw(b));
    }
}

/// The ratio the bandit currently proposes.
///
/// # Safety
/// `b` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn flps_bandit_ratio(b: *const FlpsBandit, out: *mut f64) -> FlpsStatus {
    guard(|| {
        let b = b.as_ref().ok_or_else(|| null("bandit handle"))?;
        if out.is_null() {
            return Err(null("output pointer"));
        }
        *out = b.agent.last_ratio();
        Ok(())
    })
}

/// Report the accuracy (percent) and local cost observed at the proposed
/// ratio; `next_ratio` receives the next proposal.
///
/// # Safety
/// `b` must be a live handle; `next_ratio` writable.
#[no_mangle]
pub unsafe extern "C" fn flps_bandit_update(b: *mut FlpsBandit, accuracy: f64, cost: f64, delta: f64, next_ratio: *mut f64) -> FlpsStatus {
    guard(|| {
        let b = b.as_mut().ok_or_else(|| null("bandit handle"))?;
        if next_ratio.is_null() {
            return Err(null("output pointer"));
        }
        let mut rng: StreamRng = stream(b.seed, Purpose::Bandit, 0, b.step);
        let sel = b.agent.update_and_select(accuracy, cost, delta, &mut rng).map_err(fail)?;
        b.step += 1;
        *next_ratio = sel.ratio;
        Ok(())
    })
}

/// Number of live partitions, or 0 for a NULL handle.
///
/// # Safety
/// `b` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn flps_bandit_partition_count(b: *const FlpsBandit) -> usize {
    b.as_ref().map_or(0, |b| b.agent.partitions().len())
}

/// `U(a) = 10 - 20 / (1 + e^{0.35 a})`.
#[no_mangle]
pub extern "C" fn flps_utility(accuracy: f64) -> f64 {
    utility(accuracy)
}

/// `(U(a) - U(a_prev)) / cost`; fails when `cost <= 0`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn flps_reward(accuracy: f64, prev_accuracy: f64, cost: f64, out: *mut f64) -> FlpsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("output pointer"));
        }
        *out = reward(accuracy, prev_accuracy, cost).map_err(fail)?;
        Ok(())
    })
}
