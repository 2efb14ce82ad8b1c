//! Next-month volatility forecasting.
//!
//! Node volatility is the monthly standard deviation of hourly prices. The
//! forecast works on a transformed series: the node's excess volatility over
//! the system, shifted positive by an offset and taken through a log. The
//! transformed series is fit with a low-order ARIMA model chosen by AICc,
//! estimated by conditional least squares (residuals before the
//! conditioning index are pinned to zero). Short histories degrade
//! gracefully: a random walk with drift when a full grid search would
//! overfit, and persistence when even that is unsupported.

use std::collections::BTreeMap;

use chrono::{DateTime, Datelike, Utc};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{mean, nelder_mead, sample_std};

// ---------------------------------------------------------------------------
// Monthly volatility series
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MonthKey {
    pub year: i32,
    pub month: u32,
}

impl MonthKey {
    pub fn of(date: chrono::NaiveDate) -> MonthKey {
        MonthKey { year: date.year(), month: date.month() }
    }

    pub fn next(&self) -> MonthKey {
        if self.month == 12 {
            MonthKey { year: self.year + 1, month: 1 }
        } else {
            MonthKey { year: self.year, month: self.month + 1 }
        }
    }
}

impl std::fmt::Display for MonthKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}-{:02}", self.year, self.month)
    }
}

/// Standard deviation of hourly values per calendar month (UTC).
pub fn monthly_sigma(start: DateTime<Utc>, values: &[f64]) -> BTreeMap<MonthKey, f64> {
    let mut groups: BTreeMap<MonthKey, Vec<f64>> = BTreeMap::new();
    for (i, v) in values.iter().enumerate() {
        let ts = start + chrono::Duration::hours(i as i64);
        groups.entry(MonthKey::of(ts.date_naive())).or_default().push(*v);
    }
    groups.into_iter().map(|(k, vs)| (k, sample_std(&vs))).collect()
}

// ---------------------------------------------------------------------------
// Log transform of excess volatility
// ---------------------------------------------------------------------------

/// Offset keeping every `node - system + c` strictly positive: one plus the
/// worst shortfall (or exactly one when the node never dips below system).
pub fn choose_offset(node_sigma: &[f64], sys_sigma: &[f64]) -> f64 {
    let worst = node_sigma
        .iter()
        .zip(sys_sigma)
        .map(|(n, s)| n - s)
        .fold(f64::INFINITY, f64::min);
    (-worst).max(0.0) + 1.0
}

/// `ln(node - system + c)` elementwise.
pub fn transform(node_sigma: &[f64], sys_sigma: &[f64], c: f64) -> Result<Vec<f64>> {
    if node_sigma.len() != sys_sigma.len() {
        return Err(Error::invalid(format!(
            "node history has {} months, system has {}",
            node_sigma.len(),
            sys_sigma.len()
        )));
    }
    node_sigma
        .iter()
        .zip(sys_sigma)
        .enumerate()
        .map(|(i, (n, s))| {
            let arg = n - s + c;
            if !(arg.is_finite() && arg > 0.0) {
                return Err(Error::Domain(format!(
                    "transform argument at month index {i} is {arg}, must be positive"
                )));
            }
            Ok(arg.ln())
        })
        .collect()
}

// ---------------------------------------------------------------------------
// ARIMA by conditional least squares
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArimaOrders {
    pub p: usize,
    pub d: usize,
    pub q: usize,
}

impl std::fmt::Display for ArimaOrders {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{})", self.p, self.d, self.q)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArimaFit {
    pub orders: ArimaOrders,
    pub mu: f64,
    pub phi: Vec<f64>,
    pub theta: Vec<f64>,
    /// Conditional sum of squared one-step errors.
    pub css: f64,
    pub sigma2: f64,
    pub n_eff: usize,
    pub aicc: f64,
    pub cond_start: usize,
}

pub fn difference(y: &[f64], d: usize) -> Vec<f64> {
    let mut w = y.to_vec();
    for _ in 0..d {
        w = w.windows(2).map(|pair| pair[1] - pair[0]).collect();
    }
    w
}

/// Spectral radius of the companion matrix of `1 - sum coef_i z^i`; the
/// lag polynomial has all roots outside the unit circle iff this is < 1.
fn companion_radius(coefs: &[f64]) -> f64 {
    let p = coefs.len();
    if p == 0 {
        return 0.0;
    }
    let m = DMatrix::<f64>::from_fn(p, p, |r, c| {
        if r == 0 {
            coefs[c]
        } else if r == c + 1 {
            1.0
        } else {
            0.0
        }
    });
    m.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max)
}

const ROOT_MARGIN: f64 = 1e-6;

fn is_stationary(phi: &[f64]) -> bool {
    companion_radius(phi) < 1.0 - ROOT_MARGIN
}

fn is_invertible(theta: &[f64]) -> bool {
    let negated: Vec<f64> = theta.iter().map(|t| -t).collect();
    companion_radius(&negated) < 1.0 - ROOT_MARGIN
}

/// One-step residuals of `w_t = mu + sum phi_i w_{t-i} + e_t + sum theta_j
/// e_{t-j}`, with residuals before `cond_start` held at zero.
fn residuals(w: &[f64], mu: f64, phi: &[f64], theta: &[f64], cond_start: usize) -> Vec<f64> {
    let mut eps = vec![0.0; w.len()];
    for t in cond_start..w.len() {
        let mut pred = mu;
        for (i, ph) in phi.iter().enumerate() {
            pred += ph * w[t - 1 - i];
        }
        for (j, th) in theta.iter().enumerate() {
            pred += th * eps[t - 1 - j];
        }
        eps[t] = w[t] - pred;
    }
    eps
}

fn css_of(w: &[f64], mu: f64, phi: &[f64], theta: &[f64], cond_start: usize) -> f64 {
    residuals(w, mu, phi, theta, cond_start)[cond_start..]
        .iter()
        .map(|e| e * e)
        .sum()
}

fn split_params(params: &[f64], p: usize, q: usize) -> (f64, &[f64], &[f64]) {
    (params[0], &params[1..1 + p], &params[1 + p..1 + p + q])
}

/// Exact least squares for the pure AR case: regress w_t on an intercept
/// and p lags over the conditioning window.
fn ols_ar(w: &[f64], p: usize, cond_start: usize) -> Result<(f64, Vec<f64>)> {
    let rows = w.len() - cond_start;
    let cols = p + 1;
    let x = DMatrix::<f64>::from_fn(rows, cols, |r, c| {
        if c == 0 {
            1.0
        } else {
            w[cond_start + r - c]
        }
    });
    let y = DVector::<f64>::from_fn(rows, |r, _| w[cond_start + r]);
    let xtx = x.transpose() * &x;
    let xty = x.transpose() * y;
    let beta = xtx
        .lu()
        .solve(&xty)
        .ok_or_else(|| Error::Domain("singular lag regression".into()))?;
    let mu = beta[0];
    let phi: Vec<f64> = (0..p).map(|i| beta[i + 1]).collect();
    Ok((mu, phi))
}

/// Largest shrink factor keeping the AR polynomial stationary.
fn shrink_to_stationary(phi: &[f64]) -> Vec<f64> {
    if is_stationary(phi) {
        return phi.to_vec();
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let scaled: Vec<f64> = phi.iter().map(|p| p * mid).collect();
        if is_stationary(&scaled) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    phi.iter().map(|p| p * lo * 0.999).collect()
}

/// Fits by conditional least squares with an explicit conditioning index
/// (must be at least max(p, q)). Exposed so order-nesting properties can be
/// checked on a common window; [`fit`] uses the smallest valid index.
pub fn fit_conditioned(y: &[f64], orders: ArimaOrders, cond_start: usize) -> Result<ArimaFit> {
    let ArimaOrders { p, d, q } = orders;
    if p > 4 || q > 4 || d > 2 {
        return Err(Error::invalid(format!("orders {orders} out of supported range (p,q <= 4, d <= 2)")));
    }
    if cond_start < p.max(q) {
        return Err(Error::invalid(format!(
            "conditioning index {cond_start} below max(p, q) for {orders}"
        )));
    }
    let w = difference(y, d);
    if w.len() <= cond_start {
        return Err(Error::invalid(format!("series too short to difference and condition for {orders}")));
    }
    let n_eff = w.len() - cond_start;
    let min_len = 10 * (p + q + 1);
    if n_eff < min_len {
        return Err(Error::invalid(format!(
            "{orders} needs {min_len} effective observations, have {n_eff}"
        )));
    }

    let objective = |params: &[f64]| -> f64 {
        let (mu, phi, theta) = split_params(params, p, q);
        if !is_stationary(phi) || !is_invertible(theta) {
            return f64::INFINITY;
        }
        css_of(&w, mu, phi, theta, cond_start)
    };

    let (mu, phi, theta) = if q == 0 {
        let (mu, phi) = ols_ar(&w, p, cond_start)?;
        if is_stationary(&phi) {
            (mu, phi, Vec::new())
        } else {
            // Constrained optimum sits near the stationarity boundary;
            // polish the shrunken estimate.
            let phi = shrink_to_stationary(&phi);
            let mut x0 = vec![mu];
            x0.extend_from_slice(&phi);
            let (best, _) = nelder_mead(objective, &x0, 0.05, 1e-12, 4000);
            let (mu, phi, _) = split_params(&best, p, q);
            (mu, phi.to_vec(), Vec::new())
        }
    } else {
        // Seed from the model with one less moving-average term so the
        // optimum can only improve as q grows, plus a flat start.
        let seed_fit = fit_conditioned(y, ArimaOrders { p, d, q: q - 1 }, cond_start)?;
        let mut seeded = vec![seed_fit.mu];
        seeded.extend_from_slice(&seed_fit.phi);
        seeded.extend_from_slice(&seed_fit.theta);
        seeded.push(0.0);
        let mut flat = vec![mean(&w[cond_start..])];
        flat.extend(std::iter::repeat_n(0.0, p + q));

        let (a, fa) = nelder_mead(objective, &seeded, 0.05, 1e-12, 4000);
        let (b, fb) = nelder_mead(objective, &flat, 0.05, 1e-12, 4000);
        let best = if fa <= fb { a } else { b };
        let (mu, phi, theta) = split_params(&best, p, q);
        (mu, phi.to_vec(), theta.to_vec())
    };

    let css = css_of(&w, mu, &phi, &theta, cond_start);
    let n = n_eff as f64;
    let k = (p + q + 2) as f64;
    if n - k - 1.0 <= 0.0 {
        return Err(Error::invalid(format!("{orders}: too few observations for the AICc penalty")));
    }
    let aicc = n * (css / n).ln() + 2.0 * k + 2.0 * k * (k + 1.0) / (n - k - 1.0);
    Ok(ArimaFit {
        orders,
        mu,
        phi,
        theta,
        css,
        sigma2: css / n_eff as f64,
        n_eff,
        aicc,
        cond_start,
    })
}

pub fn fit(y: &[f64], orders: ArimaOrders) -> Result<ArimaFit> {
    fit_conditioned(y, orders, orders.p.max(orders.q))
}

/// Grid search over p, q in 0..=2 and d in 0..=1 by AICc. Combinations the
/// series is too short for are skipped; ties keep the simpler model (the
/// candidates are scanned in increasing p+q, then d, then p).
pub fn select_orders(y: &[f64]) -> Result<ArimaFit> {
    let mut candidates: Vec<ArimaOrders> = Vec::new();
    for p in 0..=2usize {
        for d in 0..=1usize {
            for q in 0..=2usize {
                candidates.push(ArimaOrders { p, d, q });
            }
        }
    }
    candidates.sort_by_key(|o| (o.p + o.q, o.d, o.p, o.q));

    let mut best: Option<ArimaFit> = None;
    let mut last_err = None;
    for orders in candidates {
        match fit(y, orders) {
            Ok(f) => {
                if best.as_ref().is_none_or(|b| f.aicc < b.aicc) {
                    best = Some(f);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| {
        last_err.unwrap_or_else(|| Error::invalid("no admissible model order for the series"))
    })
}

/// One-step forecast on the undifferenced scale.
pub fn forecast_next(fit: &ArimaFit, y: &[f64]) -> Result<f64> {
    let ArimaOrders { p, d, q } = fit.orders;
    if y.len() <= d {
        return Err(Error::invalid("series too short for a one-step forecast"));
    }
    let w = difference(y, d);
    if w.len() < p.max(q).max(fit.cond_start) {
        return Err(Error::invalid("series too short for a one-step forecast"));
    }
    let eps = residuals(&w, fit.mu, &fit.phi, &fit.theta, fit.cond_start);
    let mut pred = fit.mu;
    for (i, ph) in fit.phi.iter().enumerate() {
        pred += ph * w[w.len() - 1 - i];
    }
    for (j, th) in fit.theta.iter().enumerate() {
        pred += th * eps[eps.len() - 1 - j];
    }
    // Integrate the differencing back out: add the forecast increment to
    // the last value at each level.
    let mut levels = Vec::with_capacity(d + 1);
    let mut cur = y.to_vec();
    for _ in 0..d {
        levels.push(*cur.last().unwrap());
        cur = difference(&cur, 1);
    }
    let mut value = pred;
    for last in levels.iter().rev() {
        value += last;
    }
    Ok(value)
}

// ---------------------------------------------------------------------------
// End-to-end sigma forecast
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SigmaForecast {
    /// Forecast node volatility for the next month.
    pub sigma: f64,
    /// Orders used, or None under persistence.
    pub orders: Option<ArimaOrders>,
    pub offset: f64,
    pub method: String,
}

/// Minimum history for the AICc grid search; below it a random walk with
/// drift, and below [`MIN_MONTHS_RW`] plain persistence.
pub const MIN_MONTHS_SELECT: usize = 24;
pub const MIN_MONTHS_RW: usize = 11;

/// Forecasts a node's next-month volatility from aligned monthly node and
/// system histories plus the expected system volatility for that month.
pub fn forecast_sigma(node_sigma: &[f64], sys_sigma: &[f64], sys_next: f64) -> Result<SigmaForecast> {
    if node_sigma.is_empty() || node_sigma.len() != sys_sigma.len() {
        return Err(Error::invalid("node and system histories must be same nonzero length"));
    }
    if !sys_next.is_finite() {
        return Err(Error::invalid("system volatility forecast must be finite"));
    }
    let c = choose_offset(node_sigma, sys_sigma);
    let z = transform(node_sigma, sys_sigma, c)?;

    let fitted = if z.len() >= MIN_MONTHS_SELECT {
        match select_orders(&z) {
            Ok(f) => Some(f),
            Err(e) => {
                log::warn!("order selection failed ({e}); falling back to a random walk");
                fit(&z, ArimaOrders { p: 0, d: 1, q: 0 }).ok()
            }
        }
    } else if z.len() >= MIN_MONTHS_RW {
        fit(&z, ArimaOrders { p: 0, d: 1, q: 0 }).ok()
    } else {
        None
    };

    let (z_next, orders, method) = match fitted {
        Some(f) => {
            let pred = forecast_next(&f, &z)?;
            let label = format!("arima{}", f.orders);
            (pred, Some(f.orders), label)
        }
        None => (*z.last().unwrap(), None, "persistence".to_string()),
    };
    Ok(SigmaForecast { sigma: z_next.exp() + sys_next - c, orders, offset: c, method })
}
