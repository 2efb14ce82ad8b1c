//! Battery parameters and settlement arithmetic.
//!
//! Revenue for one unit over a billing window decomposes into an energy
//! arbitrage credit, regulation capability and performance credits, and a
//! degradation cost proportional to energy throughput. Everything here is
//! pure arithmetic over hourly series; the dispatch optimizer decides what
//! the series are.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::KahanSum;

/// Battery system parameters. Power in MW, energy in MWh, costs in $.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct BessSpec {
    /// Power rating (charge and discharge), MW.
    pub p_max: f64,
    /// Energy capacity, MWh.
    pub e_max: f64,
    /// Charging efficiency in (0, 1].
    pub eta_c: f64,
    /// Discharging efficiency in (0, 1].
    pub eta_d: f64,
    /// Life consumed per MWh of throughput (fraction of rated life).
    pub deg_speed: f64,
    /// Storage capital cost, $ per MWh installed.
    pub storage_cost: f64,
    /// Remaining-capacity fraction at which the unit is retired.
    pub soc_eol: f64,
    /// Start-of-day state of charge as a fraction of `e_max`.
    pub s0: f64,
    /// Regulation performance score in [0, 1].
    pub perf_score: f64,
}

impl Default for BessSpec {
    fn default() -> Self {
        BessSpec {
            p_max: 10.0,
            e_max: 10.0,
            eta_c: 0.95,
            eta_d: 0.95,
            deg_speed: 3.0e-5,
            storage_cost: 1.0e5,
            soc_eol: 0.8,
            s0: 0.5,
            perf_score: 1.0,
        }
    }
}

impl BessSpec {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            (self.p_max, "p_max"),
            (self.e_max, "e_max"),
            (self.eta_c, "eta_c"),
            (self.eta_d, "eta_d"),
            (self.deg_speed, "deg_speed"),
            (self.storage_cost, "storage_cost"),
            (self.soc_eol, "soc_eol"),
            (self.s0, "s0"),
            (self.perf_score, "perf_score"),
        ];
        for (v, name) in fields {
            if !v.is_finite() {
                return Err(Error::invalid(format!("{name} is not finite")));
            }
        }
        if self.p_max <= 0.0 || self.e_max <= 0.0 {
            return Err(Error::invalid("p_max and e_max must be positive"));
        }
        if !(0.0 < self.eta_c && self.eta_c <= 1.0) || !(0.0 < self.eta_d && self.eta_d <= 1.0) {
            return Err(Error::invalid("efficiencies must lie in (0, 1]"));
        }
        if self.deg_speed < 0.0 || self.storage_cost < 0.0 {
            return Err(Error::invalid("degradation parameters must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.soc_eol) {
            return Err(Error::invalid(format!(
                "soc_eol must lie in [0, 1), got {}",
                self.soc_eol
            )));
        }
        if !(0.0..=1.0).contains(&self.s0) {
            return Err(Error::invalid(format!("s0 must lie in [0, 1], got {}", self.s0)));
        }
        if !(0.0..=1.0).contains(&self.perf_score) {
            return Err(Error::invalid("perf_score must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Marginal degradation charge per MWh of throughput, $/MWh.
    ///
    /// Half the capital cost is attributed to each direction of a full
    /// cycle, prorated by the life consumed per MWh and the end-of-life
    /// retirement threshold. Defaults give exactly 7.5 $/MWh.
    pub fn degradation_rate(&self) -> Result<f64> {
        self.validate()?;
        Ok(self.deg_speed * self.storage_cost * 0.5 / (1.0 - self.soc_eol))
    }
}

fn check_series(name: &str, values: &[f64], allow_negative: bool) -> Result<()> {
    for (i, v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::invalid(format!("{name}[{i}] is not finite")));
        }
        if !allow_negative && *v < 0.0 {
            return Err(Error::invalid(format!("{name}[{i}] is negative: {v}")));
        }
    }
    Ok(())
}

fn check_same_len(lens: &[(&str, usize)]) -> Result<()> {
    let (first_name, first_len) = lens[0];
    for &(name, len) in &lens[1..] {
        if len != first_len {
            return Err(Error::invalid(format!(
                "series length mismatch: {first_name} has {first_len}, {name} has {len}"
            )));
        }
    }
    Ok(())
}

/// Energy arbitrage credit in $: discharge sells at the nodal price, charge
/// buys at it. Charging during negative prices is paid.
pub fn energy_credit(p_ch: &[f64], p_dis: &[f64], lmp: &[f64]) -> Result<f64> {
    check_same_len(&[("p_ch", p_ch.len()), ("p_dis", p_dis.len()), ("lmp", lmp.len())])?;
    check_series("p_ch", p_ch, false)?;
    check_series("p_dis", p_dis, false)?;
    check_series("lmp", lmp, true)?;
    let mut acc = KahanSum::new();
    for t in 0..lmp.len() {
        acc.add((p_dis[t] - p_ch[t]) * lmp[t]);
    }
    Ok(acc.value())
}

/// Regulation credits in $ as `(capability, performance)`.
///
/// Capability pays the offered regulation power at the capability clearing
/// price; performance additionally scales by the hourly mileage ratio and
/// the unit's performance score. The score multiplies both.
pub fn regulation_credit(
    p_reg: &[f64],
    rmccp: &[f64],
    rmpcp: &[f64],
    beta: &[f64],
    perf_score: f64,
) -> Result<(f64, f64)> {
    check_same_len(&[
        ("p_reg", p_reg.len()),
        ("rmccp", rmccp.len()),
        ("rmpcp", rmpcp.len()),
        ("beta", beta.len()),
    ])?;
    check_series("p_reg", p_reg, false)?;
    check_series("rmccp", rmccp, false)?;
    check_series("rmpcp", rmpcp, false)?;
    check_series("beta", beta, false)?;
    if !(0.0..=1.0).contains(&perf_score) {
        return Err(Error::invalid("perf_score must lie in [0, 1]"));
    }
    let mut cap = KahanSum::new();
    let mut perf = KahanSum::new();
    for t in 0..p_reg.len() {
        cap.add(p_reg[t] * rmccp[t] * perf_score);
        perf.add(p_reg[t] * rmpcp[t] * beta[t] * perf_score);
    }
    Ok((cap.value(), perf.value()))
}

/// Degradation cost in $ over composed (market + regulation-following)
/// charge and discharge power series.
pub fn degradation_cost(p_ch: &[f64], p_dis: &[f64], spec: &BessSpec) -> Result<f64> {
    check_same_len(&[("p_ch", p_ch.len()), ("p_dis", p_dis.len())])?;
    check_series("p_ch", p_ch, false)?;
    check_series("p_dis", p_dis, false)?;
    let rate = spec.degradation_rate()?;
    let mut acc = KahanSum::new();
    for t in 0..p_ch.len() {
        acc.add((p_ch[t] * spec.eta_c + p_dis[t] / spec.eta_d) * rate);
    }
    Ok(acc.value())
}

/// One settlement window's revenue decomposition. `net` is always the
/// composition of the other four fields.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct CreditBreakdown {
    pub credit_energy: f64,
    pub credit_capability: f64,
    pub credit_performance: f64,
    pub cost_degradation: f64,
    pub net: f64,
}

impl CreditBreakdown {
    pub fn compose(
        credit_energy: f64,
        credit_capability: f64,
        credit_performance: f64,
        cost_degradation: f64,
    ) -> Self {
        CreditBreakdown {
            credit_energy,
            credit_capability,
            credit_performance,
            cost_degradation,
            net: credit_energy + credit_capability + credit_performance - cost_degradation,
        }
    }

    pub fn zero() -> Self {
        CreditBreakdown::compose(0.0, 0.0, 0.0, 0.0)
    }
}
