//! Daily dispatch optimization.
//!
//! Solves the revenue-maximization problem for one battery over one horizon
//! (normally 24 hours): energy arbitrage alone, or energy plus frequency
//! regulation jointly. The objective per hour is
//!
//!   (p_e_dis - p_e_ch) * lmp                    energy arbitrage
//!   + p_reg * (rmccp + rmpcp * beta) * rho      regulation credits
//!   - (p_ch * eta_c + p_dis / eta_d) * deg      degradation
//!
//! where p_ch/p_dis are the composed powers including regulation following
//! (`p_ch = p_e_ch + p_reg * regd_down`, `p_dis = p_e_dis + p_reg * regd_up`)
//! and the state of charge obeys
//! `s_t = s_{t-1} + (p_ch * eta_c - p_dis / eta_d) / e_max` with the terminal
//! state returning to the start.
//!
//! The solver is a dynamic program over a discretized SOC grid. Actions are
//! pairs (cell delta, regulation power): the arbitrage charge or discharge is
//! derived from the requested cell movement after subtracting the
//! regulation-following drift, so every transition lands exactly on a grid
//! point and the terminal constraint is exact cell equality, not a tolerance.
//! Charging and discharging can never both be nonzero because a single
//! residual picks one side by sign.
//!
//! Equal-value candidates prefer lower total throughput; remaining ties fall
//! to a fixed scan order (most negative cell delta first, then smaller
//! regulation power), which keeps output deterministic and makes the
//! brute-force oracle reproduce the solver's choices bit for bit.

use serde::{Deserialize, Serialize};

use crate::bess_model::{
    degradation_cost, energy_credit, regulation_credit, BessSpec, CreditBreakdown,
};
use crate::error::{Error, Result};
use crate::market_data::DayView;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DispatchMode {
    EnergyOnly,
    Joint,
}

impl std::str::FromStr for DispatchMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "energy_only" | "energy-only" | "energy" => Ok(DispatchMode::EnergyOnly),
            "joint" => Ok(DispatchMode::Joint),
            other => Err(Error::invalid(format!("unknown dispatch mode {other:?}"))),
        }
    }
}

/// One battery, one horizon of aligned hourly market data.
#[derive(Debug, Clone)]
pub struct DispatchProblem {
    pub spec: BessSpec,
    pub lmp: Vec<f64>,
    pub rmccp: Vec<f64>,
    pub rmpcp: Vec<f64>,
    pub beta: Vec<f64>,
    pub regd_up: Vec<f64>,
    pub regd_down: Vec<f64>,
}

impl DispatchProblem {
    pub fn new(
        spec: BessSpec,
        lmp: Vec<f64>,
        rmccp: Vec<f64>,
        rmpcp: Vec<f64>,
        beta: Vec<f64>,
        regd_up: Vec<f64>,
        regd_down: Vec<f64>,
    ) -> Result<Self> {
        spec.validate()?;
        let t = lmp.len();
        if t == 0 {
            return Err(Error::invalid("dispatch horizon must be at least 1 hour"));
        }
        for (name, series) in [
            ("rmccp", &rmccp),
            ("rmpcp", &rmpcp),
            ("beta", &beta),
            ("regd_up", &regd_up),
            ("regd_down", &regd_down),
        ] {
            if series.len() != t {
                return Err(Error::invalid(format!(
                    "{name} has {} entries, lmp has {t}",
                    series.len()
                )));
            }
            for (h, v) in series.iter().enumerate() {
                if !v.is_finite() || *v < 0.0 {
                    return Err(Error::invalid(format!("{name}[{h}] = {v} must be finite and >= 0")));
                }
            }
        }
        for (h, v) in lmp.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::invalid(format!("lmp[{h}] is not finite")));
            }
        }
        for h in 0..t {
            if regd_up[h] > 1.0 || regd_down[h] > 1.0 || regd_up[h] + regd_down[h] > 1.0 + 1e-12 {
                return Err(Error::invalid(format!(
                    "regd fractions at hour {h} exceed one hour: up={} down={}",
                    regd_up[h], regd_down[h]
                )));
            }
        }
        Ok(DispatchProblem { spec, lmp, rmccp, rmpcp, beta, regd_up, regd_down })
    }

    /// A standard 24-hour day.
    pub fn daily(
        spec: BessSpec,
        lmp: Vec<f64>,
        rmccp: Vec<f64>,
        rmpcp: Vec<f64>,
        beta: Vec<f64>,
        regd_up: Vec<f64>,
        regd_down: Vec<f64>,
    ) -> Result<Self> {
        if lmp.len() != 24 {
            return Err(Error::invalid(format!("daily problem needs 24 hours, got {}", lmp.len())));
        }
        DispatchProblem::new(spec, lmp, rmccp, rmpcp, beta, regd_up, regd_down)
    }

    pub fn daily_from_view(spec: BessSpec, day: &DayView<'_>) -> Result<Self> {
        DispatchProblem::daily(
            spec,
            day.lmp.to_vec(),
            day.rmccp.to_vec(),
            day.rmpcp.to_vec(),
            day.beta.to_vec(),
            day.regd_up.to_vec(),
            day.regd_down.to_vec(),
        )
    }

    /// Arbitrage-only problem: regulation series all zero.
    pub fn energy_only(spec: BessSpec, lmp: Vec<f64>) -> Result<Self> {
        let t = lmp.len();
        DispatchProblem::new(spec, lmp, vec![0.0; t], vec![0.0; t], vec![0.0; t], vec![0.0; t], vec![0.0; t])
    }

    pub fn horizon(&self) -> usize {
        self.lmp.len()
    }
}

/// Discretization knobs for the solver.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SolverGrid {
    /// SOC grid cell in MWh; must divide e_max evenly.
    pub soc_step_mwh: f64,
    /// Regulation power step in MW; must divide p_max evenly.
    pub power_step_mw: f64,
}

impl Default for SolverGrid {
    fn default() -> Self {
        SolverGrid { soc_step_mwh: 0.5, power_step_mw: 0.5 }
    }
}

impl SolverGrid {
    /// Returns (soc cells, regulation power steps) for this battery.
    pub fn resolve(&self, spec: &BessSpec) -> Result<(usize, usize)> {
        for (name, v) in [("soc_step_mwh", self.soc_step_mwh), ("power_step_mw", self.power_step_mw)] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        let cells_f = spec.e_max / self.soc_step_mwh;
        let steps_f = spec.p_max / self.power_step_mw;
        let cells = cells_f.round();
        let steps = steps_f.round();
        if (cells_f - cells).abs() > 1e-6 {
            return Err(Error::invalid(format!(
                "soc_step_mwh {} does not divide e_max {} evenly",
                self.soc_step_mwh, spec.e_max
            )));
        }
        if (steps_f - steps).abs() > 1e-6 {
            return Err(Error::invalid(format!(
                "power_step_mw {} does not divide p_max {} evenly",
                self.power_step_mw, spec.p_max
            )));
        }
        if cells < 1.0 || steps < 1.0 {
            return Err(Error::invalid("grid must have at least one cell and one power step"));
        }
        if cells > 1e6 || steps > 1e6 {
            return Err(Error::invalid("grid finer than 1e6 steps refused"));
        }
        Ok((cells as usize, steps as usize))
    }
}

/// A feasible hourly schedule with its revenue decomposition. `soc` has one
/// more entry than the horizon (start state plus each hour's end state).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchSchedule {
    pub p_e_ch: Vec<f64>,
    pub p_e_dis: Vec<f64>,
    pub p_reg: Vec<f64>,
    pub soc: Vec<f64>,
    pub breakdown: CreditBreakdown,
}

/// Composed charge/discharge power including regulation following.
pub fn composed_powers(problem: &DispatchProblem, schedule: &DispatchSchedule) -> (Vec<f64>, Vec<f64>) {
    let t = problem.horizon();
    let mut p_ch = Vec::with_capacity(t);
    let mut p_dis = Vec::with_capacity(t);
    for h in 0..t {
        p_ch.push(schedule.p_e_ch[h] + schedule.p_reg[h] * problem.regd_down[h]);
        p_dis.push(schedule.p_e_dis[h] + schedule.p_reg[h] * problem.regd_up[h]);
    }
    (p_ch, p_dis)
}

// ---------------------------------------------------------------------------
// Shared discretization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
struct Action {
    /// SOC cell delta.
    k: i32,
    r: f64,
    p_e_ch: f64,
    p_e_dis: f64,
    p_ch: f64,
    p_dis: f64,
    reward: f64,
    throughput: f64,
}

struct Discretization {
    cells: usize,
    cell_mwh: f64,
    i0: usize,
    /// Feasible actions per hour, in canonical scan order.
    stages: Vec<Vec<Action>>,
}

impl Discretization {
    fn soc_fraction(&self, cell: usize, e_max: f64) -> f64 {
        cell as f64 * self.cell_mwh / e_max
    }
}

const POWER_TOL: f64 = 1e-9;

fn discretize(problem: &DispatchProblem, grid: &SolverGrid, mode: DispatchMode) -> Result<Discretization> {
    let spec = &problem.spec;
    let (cells, r_steps) = grid.resolve(spec)?;
    let cell = grid.soc_step_mwh;
    let deg_rate = spec.degradation_rate()?;

    let i0_f = spec.s0 * spec.e_max / cell;
    let i0 = i0_f.round().clamp(0.0, cells as f64);
    if (i0_f - i0).abs() > 1e-9 {
        log::warn!(
            "initial soc {} snapped to grid fraction {}",
            spec.s0,
            i0 * cell / spec.e_max
        );
    }
    let i0 = i0 as usize;

    let r_count = match mode {
        DispatchMode::EnergyOnly => 1,
        DispatchMode::Joint => r_steps + 1,
    };
    let mut stages = Vec::with_capacity(problem.horizon());
    for h in 0..problem.horizon() {
        let mut actions = Vec::new();
        for k in -(cells as i32)..=(cells as i32) {
            for r_idx in 0..r_count {
                let r = r_idx as f64 * grid.power_step_mw;
                if r > spec.p_max + POWER_TOL {
                    continue;
                }
                // MWh the regulation following moves the stored energy.
                let drift = r * (problem.regd_down[h] * spec.eta_c - problem.regd_up[h] / spec.eta_d);
                // Residual stored-energy change the arbitrage side must supply.
                let resid = k as f64 * cell - drift;
                let (p_e_ch, p_e_dis) = if resid >= 0.0 {
                    (resid / spec.eta_c, 0.0)
                } else {
                    (0.0, -resid * spec.eta_d)
                };
                let p_e = p_e_ch + p_e_dis;
                if p_e > spec.p_max - r + POWER_TOL {
                    continue;
                }
                let p_ch = p_e_ch + r * problem.regd_down[h];
                let p_dis = p_e_dis + r * problem.regd_up[h];
                let reward = (p_e_dis - p_e_ch) * problem.lmp[h]
                    + r * (problem.rmccp[h] + problem.rmpcp[h] * problem.beta[h]) * spec.perf_score
                    - (p_ch * spec.eta_c + p_dis / spec.eta_d) * deg_rate;
                actions.push(Action { k, r, p_e_ch, p_e_dis, p_ch, p_dis, reward, throughput: p_ch + p_dis });
            }
        }
        stages.push(actions);
    }
    Ok(Discretization { cells, cell_mwh: cell, i0, stages })
}

// ---------------------------------------------------------------------------
// Value ordering
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
struct Value {
    net: f64,
    thr: f64,
}

impl Value {
    const ZERO: Value = Value { net: 0.0, thr: 0.0 };
    const SENTINEL: Value = Value { net: f64::NEG_INFINITY, thr: f64::INFINITY };

    fn then(self, reward: f64, throughput: f64) -> Value {
        Value { net: reward + self.net, thr: throughput + self.thr }
    }
}

/// Strictly better: higher net, or equal net with less throughput.
fn improves(cand: Value, best: Value) -> bool {
    cand.net > best.net || (cand.net == best.net && cand.thr < best.thr)
}

fn assemble(problem: &DispatchProblem, d: &Discretization, chosen: &[Action]) -> Result<DispatchSchedule> {
    let t = problem.horizon();
    let spec = &problem.spec;
    let mut p_e_ch = Vec::with_capacity(t);
    let mut p_e_dis = Vec::with_capacity(t);
    let mut p_reg = Vec::with_capacity(t);
    let mut p_ch = Vec::with_capacity(t);
    let mut p_dis = Vec::with_capacity(t);
    let mut soc = Vec::with_capacity(t + 1);
    let mut cell = d.i0;
    soc.push(d.soc_fraction(cell, spec.e_max));
    for a in chosen {
        p_e_ch.push(a.p_e_ch);
        p_e_dis.push(a.p_e_dis);
        p_reg.push(a.r);
        p_ch.push(a.p_ch);
        p_dis.push(a.p_dis);
        cell = (cell as i64 + a.k as i64) as usize;
        soc.push(d.soc_fraction(cell, spec.e_max));
    }
    let credit_e = energy_credit(&p_e_ch, &p_e_dis, &problem.lmp)?;
    let (cap, perf) =
        regulation_credit(&p_reg, &problem.rmccp, &problem.rmpcp, &problem.beta, spec.perf_score)?;
    let cost_d = degradation_cost(&p_ch, &p_dis, spec)?;
    Ok(DispatchSchedule {
        p_e_ch,
        p_e_dis,
        p_reg,
        soc,
        breakdown: CreditBreakdown::compose(credit_e, cap, perf, cost_d),
    })
}

// ---------------------------------------------------------------------------
// Solver
// ---------------------------------------------------------------------------

/// Optimal schedule on the discretized grid for the given mode.
pub fn solve(problem: &DispatchProblem, grid: &SolverGrid, mode: DispatchMode) -> Result<DispatchSchedule> {
    let d = discretize(problem, grid, mode)?;
    let t_hours = problem.horizon();
    let n_states = d.cells + 1;

    // Backward pass; `next` is the value-to-go at t+1.
    let mut next = vec![Value::SENTINEL; n_states];
    next[d.i0] = Value::ZERO;
    let mut choice = vec![vec![u32::MAX; n_states]; t_hours];
    for t in (0..t_hours).rev() {
        let mut cur = vec![Value::SENTINEL; n_states];
        for (i, slot) in cur.iter_mut().enumerate() {
            let mut best = Value::SENTINEL;
            let mut best_a = u32::MAX;
            for (ai, a) in d.stages[t].iter().enumerate() {
                let j = i as i64 + a.k as i64;
                if j < 0 || j > d.cells as i64 {
                    continue;
                }
                let rest = next[j as usize];
                if !rest.net.is_finite() {
                    continue;
                }
                let cand = rest.then(a.reward, a.throughput);
                if improves(cand, best) {
                    best = cand;
                    best_a = ai as u32;
                }
            }
            *slot = best;
            choice[t][i] = best_a;
        }
        next = cur;
    }
    if !next[d.i0].net.is_finite() {
        return Err(Error::Infeasible("no feasible schedule returns to the initial state".into()));
    }

    let mut chosen = Vec::with_capacity(t_hours);
    let mut i = d.i0;
    for (t, row) in choice.iter().enumerate() {
        let a = d.stages[t][row[i] as usize];
        i = (i as i64 + a.k as i64) as usize;
        chosen.push(a);
    }
    assemble(problem, &d, &chosen)
}

pub fn solve_energy_only(problem: &DispatchProblem, grid: &SolverGrid) -> Result<DispatchSchedule> {
    solve(problem, grid, DispatchMode::EnergyOnly)
}

pub fn solve_joint(problem: &DispatchProblem, grid: &SolverGrid) -> Result<DispatchSchedule> {
    solve(problem, grid, DispatchMode::Joint)
}

// ---------------------------------------------------------------------------
// Brute-force oracle
// ---------------------------------------------------------------------------

/// Exhaustive enumeration over the same action grid as [`solve`]. Shares the
/// action construction, value ordering, scan order and schedule assembly with
/// the solver, so on any instance it accepts the two produce bit-identical
/// schedules; only the search strategy differs (plain recursion over all
/// action sequences, no reuse of subproblem values). Test-sized horizons
/// only: refuses more than 6 hours or more than 1e8 action combinations.
pub fn brute_force_oracle(
    problem: &DispatchProblem,
    grid: &SolverGrid,
    mode: DispatchMode,
) -> Result<DispatchSchedule> {
    if problem.horizon() > 6 {
        return Err(Error::Budget(format!(
            "oracle limited to 6 hours, got {}",
            problem.horizon()
        )));
    }
    let d = discretize(problem, grid, mode)?;
    let mut combos = 1.0f64;
    for stage in &d.stages {
        combos *= stage.len().max(1) as f64;
    }
    if combos > 1e8 {
        return Err(Error::Budget(format!(
            "oracle would enumerate {combos:.3e} action sequences (limit 1e8)"
        )));
    }

    fn best_suffix(d: &Discretization, t: usize, i: usize) -> Value {
        if t == d.stages.len() {
            return if i == d.i0 { Value::ZERO } else { Value::SENTINEL };
        }
        let mut best = Value::SENTINEL;
        for a in &d.stages[t] {
            let j = i as i64 + a.k as i64;
            if j < 0 || j > d.cells as i64 {
                continue;
            }
            let rest = best_suffix(d, t + 1, j as usize);
            if !rest.net.is_finite() {
                continue;
            }
            let cand = rest.then(a.reward, a.throughput);
            if improves(cand, best) {
                best = cand;
            }
        }
        best
    }

    if !best_suffix(&d, 0, d.i0).net.is_finite() {
        return Err(Error::Infeasible("no feasible schedule returns to the initial state".into()));
    }
    let mut chosen = Vec::with_capacity(problem.horizon());
    let mut i = d.i0;
    for t in 0..problem.horizon() {
        let mut best = Value::SENTINEL;
        let mut pick: Option<Action> = None;
        for a in &d.stages[t] {
            let j = i as i64 + a.k as i64;
            if j < 0 || j > d.cells as i64 {
                continue;
            }
            let rest = best_suffix(&d, t + 1, j as usize);
            if !rest.net.is_finite() {
                continue;
            }
            let cand = rest.then(a.reward, a.throughput);
            if improves(cand, best) {
                best = cand;
                pick = Some(*a);
            }
        }
        let a = pick.ok_or_else(|| Error::Infeasible("dead end during reconstruction".into()))?;
        i = (i as i64 + a.k as i64) as usize;
        chosen.push(a);
    }
    assemble(problem, &d, &chosen)
}

// ---------------------------------------------------------------------------
// Independent feasibility validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    /// Offending hour, or None for whole-schedule checks.
    pub hour: Option<usize>,
    pub message: String,
}

const SOC_TOL: f64 = 1e-9;

/// Re-checks every schedule constraint from the raw numbers, independent of
/// how the schedule was produced: power bounds, one-sided arbitrage,
/// regulation coupling, the SOC recursion and bounds, the terminal
/// condition, and the revenue decomposition.
pub fn validate_schedule(
    problem: &DispatchProblem,
    schedule: &DispatchSchedule,
    mode: DispatchMode,
) -> Vec<Violation> {
    let mut out = Vec::new();
    let t_hours = problem.horizon();
    let spec = &problem.spec;
    let push = |out: &mut Vec<Violation>, hour: Option<usize>, message: String| {
        out.push(Violation { hour, message });
    };

    if schedule.p_e_ch.len() != t_hours
        || schedule.p_e_dis.len() != t_hours
        || schedule.p_reg.len() != t_hours
        || schedule.soc.len() != t_hours + 1
    {
        push(&mut out, None, format!("series lengths do not match horizon {t_hours}"));
        return out;
    }

    for h in 0..t_hours {
        let (ch, dis, reg) = (schedule.p_e_ch[h], schedule.p_e_dis[h], schedule.p_reg[h]);
        for (name, v) in [("p_e_ch", ch), ("p_e_dis", dis), ("p_reg", reg)] {
            if !v.is_finite() || v < 0.0 || v > spec.p_max + POWER_TOL {
                push(&mut out, Some(h), format!("{name} = {v} outside [0, {}]", spec.p_max));
            }
        }
        if ch != 0.0 && dis != 0.0 {
            push(&mut out, Some(h), format!("simultaneous charge {ch} and discharge {dis}"));
        }
        if ch + reg > spec.p_max + POWER_TOL || dis + reg > spec.p_max + POWER_TOL {
            push(&mut out, Some(h), "arbitrage plus regulation exceeds power rating".into());
        }
        if mode == DispatchMode::EnergyOnly && reg != 0.0 {
            push(&mut out, Some(h), format!("regulation power {reg} in energy-only mode"));
        }
    }

    let (p_ch, p_dis) = composed_powers(problem, schedule);
    let mut s = schedule.soc[0];
    for h in 0..t_hours {
        s += (p_ch[h] * spec.eta_c - p_dis[h] / spec.eta_d) / spec.e_max;
        if (s - schedule.soc[h + 1]).abs() > SOC_TOL {
            push(
                &mut out,
                Some(h),
                format!("soc recursion mismatch: recomputed {s}, schedule has {}", schedule.soc[h + 1]),
            );
            s = schedule.soc[h + 1];
        }
    }
    for (h, v) in schedule.soc.iter().enumerate() {
        if !(-1e-12..=1.0 + 1e-12).contains(v) {
            push(&mut out, Some(h.min(t_hours.saturating_sub(1))), format!("soc {v} outside [0, 1]"));
        }
    }
    let drift = (schedule.soc[t_hours] - schedule.soc[0]).abs();
    if drift > SOC_TOL {
        push(&mut out, None, format!("terminal soc differs from start by {drift}"));
    }

    let recomputed = energy_credit(&schedule.p_e_ch, &schedule.p_e_dis, &problem.lmp)
        .and_then(|ce| {
            let (cap, perf) = regulation_credit(
                &schedule.p_reg,
                &problem.rmccp,
                &problem.rmpcp,
                &problem.beta,
                spec.perf_score,
            )?;
            let cost = degradation_cost(&p_ch, &p_dis, spec)?;
            Ok(CreditBreakdown::compose(ce, cap, perf, cost))
        });
    match recomputed {
        Err(e) => push(&mut out, None, format!("breakdown not recomputable: {e}")),
        Ok(b) => {
            for (name, got, want) in [
                ("credit_energy", schedule.breakdown.credit_energy, b.credit_energy),
                ("credit_capability", schedule.breakdown.credit_capability, b.credit_capability),
                ("credit_performance", schedule.breakdown.credit_performance, b.credit_performance),
                ("cost_degradation", schedule.breakdown.cost_degradation, b.cost_degradation),
                ("net", schedule.breakdown.net, b.net),
            ] {
                if (got - want).abs() > 1e-6 {
                    push(&mut out, None, format!("{name} {got} differs from recomputed {want}"));
                }
            }
        }
    }

    out
}

/// CSV rendering of a schedule: `hour,p_e_ch,p_e_dis,p_reg,soc_end,lmp`.
pub fn schedule_csv(problem: &DispatchProblem, schedule: &DispatchSchedule) -> String {
    let mut out = String::from("hour,p_e_ch,p_e_dis,p_reg,soc_end,lmp\n");
    for h in 0..problem.horizon() {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            h,
            schedule.p_e_ch[h],
            schedule.p_e_dis[h],
            schedule.p_reg[h],
            schedule.soc[h + 1],
            problem.lmp[h]
        ));
    }
    out
}
