//! Market revenue analysis for grid-scale battery storage.
//!
//! The crate covers the full workflow for valuing a battery energy storage
//! system in a nodal wholesale market:
//!
//! * [`market_data`]: node registry, hourly price series, regulation signal
//!   processing and deterministic synthetic dataset generation.
//! * [`bess_model`]: battery parameters and the settlement arithmetic for
//!   energy arbitrage, regulation capability/performance credits and a
//!   throughput-proportional degradation charge.
//! * [`dispatch`]: daily profit-maximizing dispatch over a discretized
//!   state-of-charge grid, energy-only or jointly with regulation, plus an
//!   enumeration oracle and an independent schedule validator.
//! * [`revenue`]: per-node daily revenue ledgers, calendar aggregation,
//!   percentile maps and transportable-deployment planning with relocation
//!   costs.
//! * [`forecast`]: monthly price-volatility forecasting with a conditional
//!   sum-of-squares ARIMA fit on log-offset volatility spreads.
//! * [`cluster`]: daily-volatility feature extraction, PCA reduction and
//!   K-means clustering with elbow selection.
//! * [`placement`]: exact branch-and-bound siting under cluster-capacity and
//!   minimum-distance constraints.
//! * [`cli`]: the command implementations behind the `besskit` binary.

pub mod bess_model;
pub mod cli;
pub mod cluster;
pub mod dispatch;
pub mod error;
pub mod forecast;
pub mod geo;
pub mod market_data;
pub mod numeric;
pub mod placement;
pub mod revenue;

pub use error::{Error, Result};
