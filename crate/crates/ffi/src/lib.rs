//! C interface to the dispatch solver, the siting solver, and the distance
//! helper.
//!
//! Handles returned by `*_new`/`*_default` constructors are opaque; release
//! them with the matching `*_free`. Every fallible call returns a
//! [`BesskitStatus`] and writes results through out-pointers only on
//! success. Input arrays are copied, so callers may free them immediately
//! after a constructor returns. Panics are caught at the boundary and
//! reported as `BESSKIT_STATUS_PANIC`.

use std::os::raw::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::slice;

use besskit::bess_model::BessSpec;
use besskit::dispatch::{solve, DispatchMode, DispatchProblem, DispatchSchedule, SolverGrid};
use besskit::geo;
use besskit::placement::{self, PlacementProblem};
use besskit::Error;

/// Result of any fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BesskitStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    Infeasible = 3,
    Domain = 4,
    Budget = 5,
    Gap = 6,
    Io = 7,
    Parse = 8,
    Panic = 9,
}

/// Dispatch objective variant.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BesskitMode {
    EnergyOnly = 0,
    Joint = 1,
}

/// Which hourly series of a schedule to copy out.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BesskitSeries {
    /// Energy-market charge power per hour (MW).
    PowerCharge = 0,
    /// Energy-market discharge power per hour (MW).
    PowerDischarge = 1,
    /// Regulation capacity per hour (MW).
    PowerRegulation = 2,
    /// State of charge as a fraction of capacity after each hour, including
    /// the initial state, so the buffer needs horizon + 1 slots.
    Soc = 3,
}

/// Revenue components of a solved schedule, in dollars.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct BesskitBreakdown {
    pub credit_energy: f64,
    pub credit_capability: f64,
    pub credit_performance: f64,
    pub cost_degradation: f64,
    pub net: f64,
}

/// Opaque battery parameter set.
pub struct BesskitSpec(BessSpec);

/// Opaque one-horizon dispatch problem.
pub struct BesskitProblem(DispatchProblem);

/// Opaque solved schedule.
pub struct BesskitSchedule(DispatchSchedule);

fn status_of(e: &Error) -> BesskitStatus {
    match e {
        Error::Io { .. } => BesskitStatus::Io,
        Error::Parse { .. } => BesskitStatus::Parse,
        Error::InvalidInput(_) => BesskitStatus::InvalidInput,
        Error::Gap(_) => BesskitStatus::Gap,
        Error::Domain(_) => BesskitStatus::Domain,
        Error::Infeasible(_) => BesskitStatus::Infeasible,
        Error::Budget(_) => BesskitStatus::Budget,
    }
}

fn guarded(body: impl FnOnce() -> BesskitStatus) -> BesskitStatus {
    catch_unwind(AssertUnwindSafe(body)).unwrap_or(BesskitStatus::Panic)
}

/// Static description of a status code. Never null; do not free.
#[no_mangle]
pub extern "C" fn besskit_status_message(status: BesskitStatus) -> *const c_char {
    let s: &'static [u8] = match status {
        BesskitStatus::Ok => b"ok\0",
        BesskitStatus::NullPointer => b"required pointer was null\0",
        BesskitStatus::InvalidInput => b"invalid input\0",
        BesskitStatus::Infeasible => b"constraints admit no solution\0",
        BesskitStatus::Domain => b"value outside its mathematical domain\0",
        BesskitStatus::Budget => b"request exceeds the configured compute budget\0",
        BesskitStatus::Gap => b"series has a gap or misalignment\0",
        BesskitStatus::Io => b"i/o failure\0",
        BesskitStatus::Parse => b"malformed input file\0",
        BesskitStatus::Panic => b"internal panic caught at the boundary\0",
    };
    s.as_ptr() as *const c_char
}

// ---------------------------------------------------------------------------
// Spec
// ---------------------------------------------------------------------------

/// Battery parameters from the reference configuration (10 MW / 10 MWh,
/// 95% one-way efficiencies). Free with `besskit_spec_free`.
#[no_mangle]
pub extern "C" fn besskit_spec_default() -> *mut BesskitSpec {
    Box::into_raw(Box::new(BesskitSpec(BessSpec::default())))
}

/// Builds a validated parameter set.
///
/// # Safety
/// `out` must be a valid pointer; on success it receives an owned handle.
#[no_mangle]
pub unsafe extern "C" fn besskit_spec_new(
    p_max_mw: f64,
    e_max_mwh: f64,
    eta_charge: f64,
    eta_discharge: f64,
    deg_speed: f64,
    storage_cost_per_mwh: f64,
    soc_end_of_life: f64,
    initial_soc: f64,
    performance_score: f64,
    out: *mut *mut BesskitSpec,
) -> BesskitStatus {
    if out.is_null() {
        return BesskitStatus::NullPointer;
    }
    guarded(|| {
        let spec = BessSpec {
            p_max: p_max_mw,
            e_max: e_max_mwh,
            eta_c: eta_charge,
            eta_d: eta_discharge,
            deg_speed,
            storage_cost: storage_cost_per_mwh,
            soc_eol: soc_end_of_life,
            s0: initial_soc,
            perf_score: performance_score,
        };
        match spec.validate() {
            Ok(()) => {
                unsafe { *out = Box::into_raw(Box::new(BesskitSpec(spec))) };
                BesskitStatus::Ok
            }
            Err(e) => status_of(&e),
        }
    })
}

/// Releases a spec handle. Null is a no-op.
///
/// # Safety
/// `spec` must be a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn besskit_spec_free(spec: *mut BesskitSpec) {
    if !spec.is_null() {
        drop(unsafe { Box::from_raw(spec) });
    }
}

/// Degradation cost per MWh of throughput implied by the spec.
///
/// # Safety
/// `spec` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn besskit_spec_degradation_rate(
    spec: *const BesskitSpec,
    out: *mut f64,
) -> BesskitStatus {
    if spec.is_null() || out.is_null() {
        return BesskitStatus::NullPointer;
    }
    guarded(|| match unsafe { &*spec }.0.degradation_rate() {
        Ok(rate) => {
            unsafe { *out = rate };
            BesskitStatus::Ok
        }
        Err(e) => status_of(&e),
    })
}

// ---------------------------------------------------------------------------
// Problem and schedule
// ---------------------------------------------------------------------------

/// Builds a dispatch problem over `horizon` hours.
///
/// `lmp` is required with `horizon` entries. The five regulation series may
/// each be null, which means all zeros (an energy-only market).
///
/// # Safety
/// Non-null array pointers must reference `horizon` readable doubles; `spec`
/// and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn besskit_problem_new(
    spec: *const BesskitSpec,
    horizon: usize,
    lmp: *const f64,
    rmccp: *const f64,
    rmpcp: *const f64,
    beta: *const f64,
    regd_up: *const f64,
    regd_down: *const f64,
    out: *mut *mut BesskitProblem,
) -> BesskitStatus {
    if spec.is_null() || lmp.is_null() || out.is_null() {
        return BesskitStatus::NullPointer;
    }
    guarded(|| {
        let series = |p: *const f64| -> Vec<f64> {
            if p.is_null() {
                vec![0.0; horizon]
            } else {
                unsafe { slice::from_raw_parts(p, horizon) }.to_vec()
            }
        };
        let lmp = unsafe { slice::from_raw_parts(lmp, horizon) }.to_vec();
        let problem = DispatchProblem::new(
            unsafe { &*spec }.0,
            lmp,
            series(rmccp),
            series(rmpcp),
            series(beta),
            series(regd_up),
            series(regd_down),
        );
        match problem {
            Ok(p) => {
                unsafe { *out = Box::into_raw(Box::new(BesskitProblem(p))) };
                BesskitStatus::Ok
            }
            Err(e) => status_of(&e),
        }
    })
}

/// Releases a problem handle. Null is a no-op.
///
/// # Safety
/// `problem` must be a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn besskit_problem_free(problem: *mut BesskitProblem) {
    if !problem.is_null() {
        drop(unsafe { Box::from_raw(problem) });
    }
}

/// Solves a problem on the given SOC/power grid. The steps must divide the
/// spec's energy and power capacities evenly.
///
/// # Safety
/// `problem` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn besskit_solve(
    problem: *const BesskitProblem,
    soc_step_mwh: f64,
    power_step_mw: f64,
    mode: BesskitMode,
    out: *mut *mut BesskitSchedule,
) -> BesskitStatus {
    if problem.is_null() || out.is_null() {
        return BesskitStatus::NullPointer;
    }
    guarded(|| {
        let grid = SolverGrid { soc_step_mwh, power_step_mw };
        let mode = match mode {
            BesskitMode::EnergyOnly => DispatchMode::EnergyOnly,
            BesskitMode::Joint => DispatchMode::Joint,
        };
        match solve(&unsafe { &*problem }.0, &grid, mode) {
            Ok(s) => {
                unsafe { *out = Box::into_raw(Box::new(BesskitSchedule(s))) };
                BesskitStatus::Ok
            }
            Err(e) => status_of(&e),
        }
    })
}

/// Releases a schedule handle. Null is a no-op.
///
/// # Safety
/// `schedule` must be a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn besskit_schedule_free(schedule: *mut BesskitSchedule) {
    if !schedule.is_null() {
        drop(unsafe { Box::from_raw(schedule) });
    }
}

/// Number of hours in the schedule; 0 for a null handle.
///
/// # Safety
/// `schedule` must be null or a valid handle.
#[no_mangle]
pub unsafe extern "C" fn besskit_schedule_horizon(schedule: *const BesskitSchedule) -> usize {
    if schedule.is_null() {
        return 0;
    }
    unsafe { &*schedule }.0.p_e_ch.len()
}

/// Copies the revenue breakdown of a solved schedule.
///
/// # Safety
/// `schedule` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn besskit_schedule_breakdown(
    schedule: *const BesskitSchedule,
    out: *mut BesskitBreakdown,
) -> BesskitStatus {
    if schedule.is_null() || out.is_null() {
        return BesskitStatus::NullPointer;
    }
    guarded(|| {
        let b = &unsafe { &*schedule }.0.breakdown;
        unsafe {
            *out = BesskitBreakdown {
                credit_energy: b.credit_energy,
                credit_capability: b.credit_capability,
                credit_performance: b.credit_performance,
                cost_degradation: b.cost_degradation,
                net: b.net,
            };
        }
        BesskitStatus::Ok
    })
}

/// Copies one series of the schedule into `buf`. `len` must equal the
/// horizon, except for `BESSKIT_SERIES_SOC` which needs horizon + 1.
///
/// # Safety
/// `schedule` must be valid and `buf` writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn besskit_schedule_series(
    schedule: *const BesskitSchedule,
    series: BesskitSeries,
    buf: *mut f64,
    len: usize,
) -> BesskitStatus {
    if schedule.is_null() || buf.is_null() {
        return BesskitStatus::NullPointer;
    }
    guarded(|| {
        let s = &unsafe { &*schedule }.0;
        let src: &[f64] = match series {
            BesskitSeries::PowerCharge => &s.p_e_ch,
            BesskitSeries::PowerDischarge => &s.p_e_dis,
            BesskitSeries::PowerRegulation => &s.p_reg,
            BesskitSeries::Soc => &s.soc,
        };
        if len != src.len() {
            return BesskitStatus::InvalidInput;
        }
        unsafe { slice::from_raw_parts_mut(buf, len) }.copy_from_slice(src);
        BesskitStatus::Ok
    })
}

// ---------------------------------------------------------------------------
// Geometry
// ---------------------------------------------------------------------------

/// Great-circle distance in miles between two (lat, lon) points in degrees.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn besskit_haversine_miles(
    lat1: f64,
    lon1: f64,
    lat2: f64,
    lon2: f64,
    out: *mut f64,
) -> BesskitStatus {
    if out.is_null() {
        return BesskitStatus::NullPointer;
    }
    guarded(|| match geo::haversine_miles(lat1, lon1, lat2, lon2) {
        Ok(d) => {
            unsafe { *out = d };
            BesskitStatus::Ok
        }
        Err(e) => status_of(&e),
    })
}

// ---------------------------------------------------------------------------
// Placement
// ---------------------------------------------------------------------------

/// Selects `n_select` of `n` nodes maximizing total sigma subject to a
/// per-cluster cap and a minimum pairwise distance, exactly.
///
/// `distance` is row-major `n * n`, symmetric with a zero diagonal.
/// `out_indices` receives the selected node indices in ascending order (ties
/// on the objective resolve toward lower indices) and must have room for
/// `n_select` entries.
///
/// # Safety
/// `sigma` and `cluster` must reference `n` readable elements, `distance`
/// `n * n`; `out_indices` must be writable for `n_select` entries and
/// `out_objective` for one double.
#[no_mangle]
pub unsafe extern "C" fn besskit_place(
    n: usize,
    sigma: *const f64,
    cluster: *const u32,
    distance: *const f64,
    n_select: usize,
    max_per_cluster: usize,
    min_distance_miles: f64,
    out_indices: *mut usize,
    out_objective: *mut f64,
) -> BesskitStatus {
    if sigma.is_null()
        || cluster.is_null()
        || distance.is_null()
        || out_indices.is_null()
        || out_objective.is_null()
    {
        return BesskitStatus::NullPointer;
    }
    guarded(|| {
        let sigma = unsafe { slice::from_raw_parts(sigma, n) }.to_vec();
        let cluster: Vec<usize> =
            unsafe { slice::from_raw_parts(cluster, n) }.iter().map(|c| *c as usize).collect();
        let flat = unsafe { slice::from_raw_parts(distance, n.saturating_mul(n)) };
        let matrix: Vec<Vec<f64>> = (0..n).map(|i| flat[i * n..(i + 1) * n].to_vec()).collect();
        // Zero-padded ids keep lexicographic tie-breaks aligned with index
        // order.
        let ids: Vec<String> = (0..n).map(|i| format!("{i:09}")).collect();
        let problem = match PlacementProblem::new(
            ids,
            sigma,
            cluster,
            matrix,
            n_select,
            max_per_cluster,
            min_distance_miles,
        ) {
            Ok(p) => p,
            Err(e) => return status_of(&e),
        };
        match placement::solve(&problem) {
            Ok(sol) => {
                let out = unsafe { slice::from_raw_parts_mut(out_indices, n_select) };
                out.copy_from_slice(&sol.indices);
                unsafe { *out_objective = sol.objective };
                BesskitStatus::Ok
            }
            Err(e) => status_of(&e),
        }
    })
}
