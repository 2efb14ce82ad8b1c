//! Drives the C entry points from Rust the way a foreign caller would:
//! through raw pointers and status codes only.

use std::ffi::CStr;
use std::ptr;

use besskit_ffi::*;

#[test]
fn spec_lifecycle_and_degradation_rate() {
    let spec = besskit_spec_default();
    assert!(!spec.is_null());
    let mut rate = 0.0;
    let status = unsafe { besskit_spec_degradation_rate(spec, &mut rate) };
    assert_eq!(status, BesskitStatus::Ok);
    assert!((rate - 7.5).abs() < 1e-12);
    unsafe { besskit_spec_free(spec) };

    let mut built: *mut BesskitSpec = ptr::null_mut();
    let status = unsafe {
        besskit_spec_new(20.0, 40.0, 0.9, 0.9, 3.0e-5, 1.0e5, 0.8, 0.25, 0.95, &mut built)
    };
    assert_eq!(status, BesskitStatus::Ok);
    assert!(!built.is_null());
    unsafe { besskit_spec_free(built) };

    // Negative power rating must be rejected without producing a handle.
    let mut bad: *mut BesskitSpec = ptr::null_mut();
    let status =
        unsafe { besskit_spec_new(-1.0, 10.0, 0.9, 0.9, 3.0e-5, 1.0e5, 0.8, 0.5, 1.0, &mut bad) };
    assert_eq!(status, BesskitStatus::InvalidInput);
    assert!(bad.is_null());
}

#[test]
fn solve_roundtrip_through_the_boundary() {
    let spec = besskit_spec_default();
    let horizon = 24usize;
    let lmp: Vec<f64> = (0..horizon).map(|h| 20.0 + 30.0 * ((h as f64) / 4.0).sin()).collect();
    let rmccp = vec![12.0; horizon];
    let rmpcp = vec![3.0; horizon];
    let beta = vec![200.0; horizon];
    let regd_up = vec![0.1; horizon];
    let regd_down = vec![0.1; horizon];

    let mut problem: *mut BesskitProblem = ptr::null_mut();
    let status = unsafe {
        besskit_problem_new(
            spec,
            horizon,
            lmp.as_ptr(),
            rmccp.as_ptr(),
            rmpcp.as_ptr(),
            beta.as_ptr(),
            regd_up.as_ptr(),
            regd_down.as_ptr(),
            &mut problem,
        )
    };
    assert_eq!(status, BesskitStatus::Ok);

    let mut schedule: *mut BesskitSchedule = ptr::null_mut();
    let status =
        unsafe { besskit_solve(problem, 0.5, 0.5, BesskitMode::Joint, &mut schedule) };
    assert_eq!(status, BesskitStatus::Ok);
    assert_eq!(unsafe { besskit_schedule_horizon(schedule) }, horizon);

    let mut breakdown = BesskitBreakdown {
        credit_energy: 0.0,
        credit_capability: 0.0,
        credit_performance: 0.0,
        cost_degradation: 0.0,
        net: 0.0,
    };
    let status = unsafe { besskit_schedule_breakdown(schedule, &mut breakdown) };
    assert_eq!(status, BesskitStatus::Ok);
    let recomposed = breakdown.credit_energy + breakdown.credit_capability
        + breakdown.credit_performance
        - breakdown.cost_degradation;
    assert!((breakdown.net - recomposed).abs() < 1e-9);
    // Flat regulation prices with beta = 200 make joint dispatch clearly
    // profitable.
    assert!(breakdown.net > 0.0);

    let mut soc = vec![0.0; horizon + 1];
    let status = unsafe {
        besskit_schedule_series(schedule, BesskitSeries::Soc, soc.as_mut_ptr(), soc.len())
    };
    assert_eq!(status, BesskitStatus::Ok);
    assert!((soc[0] - 0.5).abs() < 1e-12);
    for v in &soc {
        assert!(*v >= -1e-9 && *v <= 1.0 + 1e-9);
    }

    // Wrong buffer length is refused before any write.
    let mut short = vec![0.0; horizon];
    let status = unsafe {
        besskit_schedule_series(schedule, BesskitSeries::Soc, short.as_mut_ptr(), short.len())
    };
    assert_eq!(status, BesskitStatus::InvalidInput);

    let mut charge = vec![0.0; horizon];
    let status = unsafe {
        besskit_schedule_series(
            schedule,
            BesskitSeries::PowerCharge,
            charge.as_mut_ptr(),
            charge.len(),
        )
    };
    assert_eq!(status, BesskitStatus::Ok);

    // Null regulation arrays mean an energy-only market: same entry point,
    // lower revenue.
    let mut eo_problem: *mut BesskitProblem = ptr::null_mut();
    let status = unsafe {
        besskit_problem_new(
            spec,
            horizon,
            lmp.as_ptr(),
            ptr::null(),
            ptr::null(),
            ptr::null(),
            ptr::null(),
            ptr::null(),
            &mut eo_problem,
        )
    };
    assert_eq!(status, BesskitStatus::Ok);
    let mut eo_schedule: *mut BesskitSchedule = ptr::null_mut();
    let status =
        unsafe { besskit_solve(eo_problem, 0.5, 0.5, BesskitMode::Joint, &mut eo_schedule) };
    assert_eq!(status, BesskitStatus::Ok);
    let mut eo = breakdown;
    let status = unsafe { besskit_schedule_breakdown(eo_schedule, &mut eo) };
    assert_eq!(status, BesskitStatus::Ok);
    assert_eq!(eo.credit_capability, 0.0);
    assert!(eo.net <= breakdown.net + 1e-9);

    unsafe {
        besskit_schedule_free(eo_schedule);
        besskit_problem_free(eo_problem);
        besskit_schedule_free(schedule);
        besskit_problem_free(problem);
        besskit_spec_free(spec);
    }
}

#[test]
fn null_and_error_paths() {
    let mut out = 0.0;
    assert_eq!(
        unsafe { besskit_spec_degradation_rate(ptr::null(), &mut out) },
        BesskitStatus::NullPointer
    );
    assert_eq!(
        unsafe { besskit_haversine_miles(0.0, 0.0, 0.0, 0.0, ptr::null_mut()) },
        BesskitStatus::NullPointer
    );
    assert_eq!(
        unsafe { besskit_haversine_miles(95.0, 0.0, 0.0, 0.0, &mut out) },
        BesskitStatus::InvalidInput
    );
    assert_eq!(unsafe { besskit_schedule_horizon(ptr::null()) }, 0);

    // A grid step that does not divide the capacity is rejected by solve.
    let spec = besskit_spec_default();
    let lmp = [25.0; 4];
    let mut problem: *mut BesskitProblem = ptr::null_mut();
    let status = unsafe {
        besskit_problem_new(
            spec,
            lmp.len(),
            lmp.as_ptr(),
            ptr::null(),
            ptr::null(),
            ptr::null(),
            ptr::null(),
            ptr::null(),
            &mut problem,
        )
    };
    assert_eq!(status, BesskitStatus::Ok);
    let mut schedule: *mut BesskitSchedule = ptr::null_mut();
    let status =
        unsafe { besskit_solve(problem, 0.7, 0.5, BesskitMode::EnergyOnly, &mut schedule) };
    assert_eq!(status, BesskitStatus::InvalidInput);
    assert!(schedule.is_null());
    unsafe {
        besskit_problem_free(problem);
        besskit_spec_free(spec);
    }

    for code in [
        BesskitStatus::Ok,
        BesskitStatus::NullPointer,
        BesskitStatus::InvalidInput,
        BesskitStatus::Infeasible,
        BesskitStatus::Domain,
        BesskitStatus::Budget,
        BesskitStatus::Gap,
        BesskitStatus::Io,
        BesskitStatus::Parse,
        BesskitStatus::Panic,
    ] {
        let msg = besskit_status_message(code);
        assert!(!msg.is_null());
        let text = unsafe { CStr::from_ptr(msg) }.to_str().unwrap();
        assert!(!text.is_empty());
    }
}

#[test]
fn haversine_matches_known_pair() {
    // Philadelphia to Pittsburgh, roughly 257 miles great-circle.
    let mut d = 0.0;
    let status =
        unsafe { besskit_haversine_miles(39.9526, -75.1652, 40.4406, -79.9959, &mut d) };
    assert_eq!(status, BesskitStatus::Ok);
    assert!((d - 257.0).abs() < 5.0, "got {d}");
}

#[test]
fn placement_through_flat_arrays() {
    // Six nodes, two clusters, cap one per cluster, minimum spacing 10.
    let sigma = [9.0, 8.0, 7.0, 6.0, 5.0, 4.0];
    let cluster: [u32; 6] = [0, 0, 0, 1, 1, 1];
    let n = sigma.len();
    let mut distance = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                // Line layout 6 miles apart puts adjacent nodes too close.
                distance[i * n + j] = 6.0 * (i as f64 - j as f64).abs();
            }
        }
    }
    let mut picked = [0usize; 2];
    let mut objective = 0.0;
    let status = unsafe {
        besskit_place(
            n,
            sigma.as_ptr(),
            cluster.as_ptr(),
            distance.as_ptr(),
            2,
            1,
            10.0,
            picked.as_mut_ptr(),
            &mut objective,
        )
    };
    assert_eq!(status, BesskitStatus::Ok);
    // Best feasible pair: node 0 (sigma 9) with node 3 (sigma 6), 18 miles
    // apart and in different clusters.
    assert_eq!(picked, [0, 3]);
    assert!((objective - 15.0).abs() < 1e-12);

    // Spacing no pair can satisfy is reported as infeasible.
    let status = unsafe {
        besskit_place(
            n,
            sigma.as_ptr(),
            cluster.as_ptr(),
            distance.as_ptr(),
            2,
            1,
            1000.0,
            picked.as_mut_ptr(),
            &mut objective,
        )
    };
    assert_eq!(status, BesskitStatus::Infeasible);
}
