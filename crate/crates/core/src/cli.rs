//! Configuration and the command implementations behind the binary.
//!
//! Every subcommand is a plain function over [`RunConfig`] so tests and
//! other frontends can drive the same code paths the binary does. Outputs
//! are deterministic for a given config, seed and inputs: map iteration is
//! ordered, floats print with their shortest round-trip form, and nothing
//! writes a timestamp.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bess_model::{BessSpec, CreditBreakdown};
use crate::cluster::{daily_sigma_features, elbow_select, kmeans, pca_reduce, ElbowResult};
use crate::dispatch::{
    schedule_csv, solve, validate_schedule, DispatchMode, DispatchProblem, SolverGrid,
};
use crate::error::{Error, Result};
use crate::forecast::{forecast_sigma, monthly_sigma, MonthKey, SigmaForecast};
use crate::market_data::{
    aggregate_signal_csv, generate_synthetic_dataset, load_dataset, load_lmp_csv,
    load_reg_prices_csv, load_registry, save_dataset, MarketDataset, SigmaShift, SynthConfig,
    VolatilityProfile,
};
use crate::numeric::{quantile, KahanSum};
use crate::placement::{self, PlacementProblem};
use crate::revenue::{
    aggregate, node_road_distances, percentile_buckets, period_nets, stationary_best, top_n_nodes,
    transportable_plan, Grouping, PlanGranularity, PlanMode, RelocationCostModel, RevenueLedger,
};

/// Overrides the default data directory when set.
pub const DATA_ROOT_ENV: &str = "BESSKIT_DATA_ROOT";

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// Sweep worker threads; 0 means one per logical CPU.
    pub workers: usize,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub bess: BessSpec,
    pub dispatch: DispatchSection,
    pub synth: SynthSection,
    pub cluster: ClusterSection,
    pub placement: PlacementSection,
    pub relocation: RelocationSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data_dir = std::env::var_os(DATA_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("data"));
        RunConfig {
            seed: 1,
            workers: 0,
            data_dir,
            out_dir: PathBuf::from("out"),
            bess: BessSpec::default(),
            dispatch: DispatchSection::default(),
            synth: SynthSection::default(),
            cluster: ClusterSection::default(),
            placement: PlacementSection::default(),
            relocation: RelocationSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text)
            .map_err(|e| Error::invalid(format!("config {}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DispatchSection {
    pub soc_step_mwh: f64,
    pub power_step_mw: f64,
    /// "joint" or "energy_only".
    pub mode: String,
}

impl Default for DispatchSection {
    fn default() -> Self {
        DispatchSection { soc_step_mwh: 0.5, power_step_mw: 0.5, mode: "joint".into() }
    }
}

impl DispatchSection {
    pub fn grid(&self) -> SolverGrid {
        SolverGrid { soc_step_mwh: self.soc_step_mwh, power_step_mw: self.power_step_mw }
    }

    pub fn parsed_mode(&self) -> Result<DispatchMode> {
        self.mode.parse()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSection {
    pub nodes: usize,
    pub days: u32,
    pub start: NaiveDate,
    /// Per-node congestion sigma; shorter lists broadcast cyclically.
    pub base_sigma: Vec<f64>,
    pub shifts: Vec<SigmaShift>,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            nodes: 10,
            days: 90,
            start: NaiveDate::from_ymd_opt(2018, 1, 1).unwrap(),
            base_sigma: vec![8.0],
            shifts: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterSection {
    pub min_explained: f64,
    /// Fixed cluster count; 0 picks one by the elbow rule.
    pub k: usize,
    pub k_min: usize,
    pub k_max: usize,
    pub restarts: usize,
}

impl Default for ClusterSection {
    fn default() -> Self {
        ClusterSection { min_explained: 0.90, k: 0, k_min: 2, k_max: 10, restarts: 10 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PlacementSection {
    pub n_es: usize,
    pub max_per_cluster: usize,
    pub min_distance_miles: f64,
}

impl Default for PlacementSection {
    fn default() -> Self {
        PlacementSection { n_es: 5, max_per_cluster: 1, min_distance_miles: 50.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RelocationSection {
    pub truck_count: u32,
    pub carrier_cost_per_hour: f64,
    pub avg_speed_mph: f64,
    pub max_distance_miles: f64,
    pub labor_cost: f64,
    pub interconnection_cost: f64,
    /// Road distance as a multiple of the great-circle distance.
    pub road_factor: f64,
}

impl Default for RelocationSection {
    fn default() -> Self {
        let m = RelocationCostModel::default();
        RelocationSection {
            truck_count: m.truck_count,
            carrier_cost_per_hour: m.carrier_cost_per_hour,
            avg_speed_mph: m.avg_speed_mph,
            max_distance_miles: m.max_distance_miles,
            labor_cost: m.labor_cost,
            interconnection_cost: m.interconnection_cost,
            road_factor: 1.2,
        }
    }
}

impl RelocationSection {
    pub fn model(&self) -> RelocationCostModel {
        RelocationCostModel {
            truck_count: self.truck_count,
            carrier_cost_per_hour: self.carrier_cost_per_hour,
            avg_speed_mph: self.avg_speed_mph,
            max_distance_miles: self.max_distance_miles,
            labor_cost: self.labor_cost,
            interconnection_cost: self.interconnection_cost,
        }
    }
}

/// Snapshot of the fully resolved config next to the outputs.
pub fn write_resolved_config(cfg: &RunConfig) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let path = cfg.out_dir.join("resolved_config.toml");
    let text = toml::to_string_pretty(cfg)
        .map_err(|e| Error::invalid(format!("serializing config: {e}")))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ledger_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("ledger.csv")
}

fn load_data(cfg: &RunConfig) -> Result<MarketDataset> {
    load_dataset(&cfg.data_dir)
}

// ---------------------------------------------------------------------------
// synth / ingest
// ---------------------------------------------------------------------------

pub fn cmd_synth(cfg: &RunConfig) -> Result<PathBuf> {
    let synth = SynthConfig {
        seed: cfg.seed,
        node_count: cfg.synth.nodes,
        days: cfg.synth.days,
        start: cfg.synth.start,
        profile: VolatilityProfile {
            base: cfg.synth.base_sigma.clone(),
            shifts: cfg.synth.shifts.clone(),
        },
    };
    let dataset = generate_synthetic_dataset(&synth)?;
    save_dataset(&cfg.data_dir, &dataset)?;
    log::info!(
        "synthesized {} nodes x {} days into {}",
        cfg.synth.nodes,
        cfg.synth.days,
        cfg.data_dir.display()
    );
    Ok(cfg.data_dir.clone())
}

/// Loads raw market CSVs from `src` (registry.csv, lmp.csv, reg_prices.csv,
/// optional reg_signal.csv with 2-second traces), validates them as one
/// coherent dataset, and writes the canonical dataset directory.
pub fn cmd_ingest(cfg: &RunConfig, src: &Path) -> Result<PathBuf> {
    let registry = load_registry(&src.join("registry.csv"))?;
    let lmp = load_lmp_csv(&src.join("lmp.csv"))?;
    let prices = load_reg_prices_csv(&src.join("reg_prices.csv"))?;

    let signal_path = src.join("reg_signal.csv");
    let aggregates = if signal_path.exists() {
        let (start, aggs) = aggregate_signal_csv(&signal_path)?;
        if start != prices.start {
            return Err(Error::Gap(format!(
                "reg_signal starts at {start} but reg_prices starts at {}",
                prices.start
            )));
        }
        Some(aggs)
    } else {
        None
    };

    let dataset = MarketDataset::build(registry, lmp, prices, aggregates)?;
    save_dataset(&cfg.data_dir, &dataset)?;
    Ok(cfg.data_dir.clone())
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SweepOutcome {
    pub computed: usize,
    pub skipped: usize,
    pub failed: usize,
}

fn solve_day(
    dataset: &MarketDataset,
    spec: &BessSpec,
    grid: &SolverGrid,
    mode: DispatchMode,
    node: &str,
    date: NaiveDate,
) -> Result<CreditBreakdown> {
    let view = dataset.day_view(node, date)?;
    let problem = DispatchProblem::daily_from_view(*spec, &view)?;
    let schedule = solve(&problem, grid, mode)?;
    let violations = validate_schedule(&problem, &schedule, mode);
    if let Some(v) = violations.first() {
        return Err(Error::Domain(format!(
            "schedule for {node} {date} failed validation: {} (at hour {:?})",
            v.message, v.hour
        )));
    }
    Ok(schedule.breakdown)
}

/// Maximum-revenue dispatch for every node-day not already in the ledger.
/// Failures are logged and counted, never silently dropped.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<SweepOutcome> {
    cfg.bess.validate()?;
    let mode = cfg.dispatch.parsed_mode()?;
    let grid = cfg.dispatch.grid();
    grid.resolve(&cfg.bess)?;
    let dataset = load_data(cfg)?;

    let path = ledger_path(cfg);
    let mut ledger =
        if path.exists() { RevenueLedger::read_csv(&path)? } else { RevenueLedger::new() };

    let days = dataset.full_days();
    let mut work: Vec<(String, NaiveDate)> = Vec::new();
    let mut skipped = 0usize;
    for node in dataset.node_ids() {
        for d in &days {
            if ledger.contains(&node, *d) {
                skipped += 1;
            } else {
                work.push((node.clone(), *d));
            }
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::invalid(format!("building worker pool: {e}")))?;
    let results: Vec<(String, NaiveDate, Result<CreditBreakdown>)> = pool.install(|| {
        work.par_iter()
            .map(|(node, date)| {
                (node.clone(), *date, solve_day(&dataset, &cfg.bess, &grid, mode, node, *date))
            })
            .collect()
    });

    let mut failed = 0usize;
    for (node, date, result) in results {
        match result {
            Ok(breakdown) => ledger.insert(&node, date, breakdown)?,
            Err(e) => {
                failed += 1;
                log::error!("{e}");
            }
        }
    }

    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    ledger.write_csv(&path)?;
    Ok(SweepOutcome { computed: work.len() - failed, skipped, failed })
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
struct PlanBundle {
    stationary_node: Option<String>,
    stationary_net: Option<f64>,
    plans: Vec<crate::revenue::DeploymentPlan>,
}

fn breakdown_row(b: &CreditBreakdown) -> String {
    format!(
        "{},{},{},{},{}",
        b.net, b.credit_energy, b.credit_capability, b.credit_performance, b.cost_degradation
    )
}

/// Analysis bundle from the ledger: node percentile map, period aggregates,
/// top-vs-bottom daily differences with cumulative shares, hourly price
/// quantiles on extreme day sets, extreme-day schedules, deployment plans.
pub fn cmd_report(cfg: &RunConfig) -> Result<PathBuf> {
    let dataset = load_data(cfg)?;
    let ledger = RevenueLedger::read_csv(&ledger_path(cfg))?;
    if ledger.is_empty() {
        return Err(Error::invalid("ledger is empty; run sweep first"));
    }
    let dir = cfg.out_dir.join("report");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let nodes = ledger.nodes();
    let totals: BTreeMap<String, f64> =
        nodes.iter().map(|n| (n.clone(), ledger.total_net(n))).collect();

    // Node totals bucketed by revenue percentile, with coordinates for maps.
    let buckets = percentile_buckets(&totals);
    let mut map_csv = String::from("node_id,latitude,longitude,total_net,bucket\n");
    for (node, bucket) in &buckets {
        let rec = dataset
            .registry
            .get(node)
            .ok_or_else(|| Error::invalid(format!("ledger node {node} not in registry")))?;
        map_csv.push_str(&format!(
            "{},{},{},{},{}\n",
            node, rec.latitude, rec.longitude, totals[node], bucket
        ));
    }
    write_text(&dir.join("percentile_map.csv"), &map_csv)?;

    for (file, grouping) in
        [("monthly_net.csv", Grouping::Month), ("seasonal_net.csv", Grouping::Season)]
    {
        let agg = aggregate(&ledger, grouping);
        let mut csv =
            String::from("period,node_id,net,credit_e,credit_cap,credit_perf,cost_deg\n");
        for (period, per_node) in &agg {
            for (node, b) in per_node {
                csv.push_str(&format!("{period},{node},{}\n", breakdown_row(b)));
            }
        }
        write_text(&dir.join(file), &csv)?;
    }

    write_daily_differences(&dir, &ledger, &totals)?;

    // The most profitable node drives the day-set studies.
    let top_node = stationary_best(&totals).map(|(n, _)| n);
    if let Some(top) = &top_node {
        write_day_set_quantiles(&dir, &dataset, &ledger, top)?;
        write_extreme_schedules(&dir, cfg, &dataset, &ledger, top)?;
    }

    let model = cfg.relocation.model();
    model.validate()?;
    let distances = node_road_distances(&dataset.registry, cfg.relocation.road_factor)?;
    let mut plans = Vec::new();
    for granularity in [PlanGranularity::Yearly, PlanGranularity::Seasonal, PlanGranularity::Monthly]
    {
        for mode in [PlanMode::PerPeriodBest, PlanMode::CostAware] {
            plans.push(transportable_plan(&ledger, granularity, mode, &model, &distances)?);
        }
    }
    let bundle = PlanBundle {
        stationary_node: top_node.clone(),
        stationary_net: top_node.as_ref().map(|n| totals[n]),
        plans,
    };
    let json = serde_json::to_string_pretty(&bundle)
        .map_err(|e| Error::invalid(format!("serializing plans: {e}")))?;
    write_text(&dir.join("plans.json"), &json)?;

    Ok(dir)
}

/// Daily net differences between the best and worst node by total net,
/// sorted descending, with each row's share of the cumulative total. The
/// final share is exactly 1 because the denominator is the last cumulative
/// value itself.
fn write_daily_differences(
    dir: &Path,
    ledger: &RevenueLedger,
    totals: &BTreeMap<String, f64>,
) -> Result<()> {
    let header = "rank,date,net_top,net_bottom,difference,cumulative_share\n";
    let path = dir.join("daily_difference.csv");
    if totals.len() < 2 {
        log::warn!("daily-difference comparison needs at least two nodes; writing header only");
        return write_text(&path, header);
    }
    let top = stationary_best(totals).map(|(n, _)| n).unwrap();
    let bottom = totals
        .iter()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap().then_with(|| a.0.cmp(b.0)))
        .map(|(n, _)| n.clone())
        .unwrap();

    let mut rows: Vec<(NaiveDate, f64, f64, f64)> = Vec::new();
    for date in ledger.dates() {
        let (Some(t), Some(b)) = (ledger.get(&top, date), ledger.get(&bottom, date)) else {
            continue;
        };
        rows.push((date, t.net, b.net, t.net - b.net));
    }
    rows.sort_by(|a, b| b.3.partial_cmp(&a.3).unwrap().then_with(|| a.0.cmp(&b.0)));

    let mut cums = Vec::with_capacity(rows.len());
    let mut acc = KahanSum::new();
    for r in &rows {
        acc.add(r.3);
        cums.push(acc.value());
    }
    let total = cums.last().copied().unwrap_or(0.0);

    let mut csv = String::from(header);
    for (i, ((date, t, b, d), cum)) in rows.iter().zip(&cums).enumerate() {
        let share = if total != 0.0 { cum / total } else { 0.0 };
        csv.push_str(&format!("{},{date},{t},{b},{d},{share}\n", i + 1));
    }
    write_text(&path, &csv)
}

/// Hourly price quantiles for the top node over its best and worst decile
/// of days by daily net.
fn write_day_set_quantiles(
    dir: &Path,
    dataset: &MarketDataset,
    ledger: &RevenueLedger,
    node: &str,
) -> Result<()> {
    let mut days: Vec<(NaiveDate, f64)> = ledger
        .iter()
        .filter(|((n, _), _)| n == node)
        .map(|((_, d), b)| (*d, b.net))
        .collect();
    days.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    let decile = days.len().div_ceil(10);

    let mut csv = String::from("day_set,hour,min,q25,median,q75,max\n");
    for (label, set) in [
        ("best", &days[..decile.min(days.len())]),
        ("worst", &days[days.len() - decile.min(days.len())..]),
    ] {
        for hour in 0..24 {
            let mut values = Vec::with_capacity(set.len());
            for (date, _) in set {
                values.push(dataset.day_view(node, *date)?.lmp[hour]);
            }
            csv.push_str(&format!(
                "{label},{hour},{},{},{},{},{}\n",
                quantile(&values, 0.0),
                quantile(&values, 0.25),
                quantile(&values, 0.5),
                quantile(&values, 0.75),
                quantile(&values, 1.0),
            ));
        }
    }
    write_text(&dir.join("hourly_lmp_quantiles.csv"), &csv)
}

/// Re-solves and writes the full schedules for the top node's best and
/// worst days.
fn write_extreme_schedules(
    dir: &Path,
    cfg: &RunConfig,
    dataset: &MarketDataset,
    ledger: &RevenueLedger,
    node: &str,
) -> Result<()> {
    let mut days: Vec<(NaiveDate, f64)> = ledger
        .iter()
        .filter(|((n, _), _)| n == node)
        .map(|((_, d), b)| (*d, b.net))
        .collect();
    if days.is_empty() {
        return Ok(());
    }
    days.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    let mode = cfg.dispatch.parsed_mode()?;
    let grid = cfg.dispatch.grid();
    for (label, date) in [("best", days[0].0), ("worst", days[days.len() - 1].0)] {
        let view = dataset.day_view(node, date)?;
        let problem = DispatchProblem::daily_from_view(cfg.bess, &view)?;
        let schedule = solve(&problem, &grid, mode)?;
        let csv = schedule_csv(&problem, &schedule);
        write_text(&dir.join(format!("schedule_{label}_{node}_{date}.csv")), &csv)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// forecast
// ---------------------------------------------------------------------------

/// Monthly volatilities in month order.
type SigmaHistory = Vec<(MonthKey, f64)>;

/// Monthly volatility per node and for the system price, sorted by month.
fn sigma_histories(dataset: &MarketDataset) -> (BTreeMap<String, SigmaHistory>, SigmaHistory) {
    let sys: SigmaHistory = monthly_sigma(dataset.start, &dataset.system_lmp()).into_iter().collect();
    let mut nodes = BTreeMap::new();
    for (node, series) in &dataset.lmp {
        let hist: SigmaHistory = monthly_sigma(dataset.start, series).into_iter().collect();
        nodes.insert(node.clone(), hist);
    }
    (nodes, sys)
}

/// Per-node volatility forecasts for the month after `through` (or after the
/// last observed month when `through` is None). The system's own next-month
/// volatility is taken as its last observed value.
pub fn sigma_forecasts(
    dataset: &MarketDataset,
    through: Option<MonthKey>,
) -> Result<(MonthKey, BTreeMap<String, SigmaForecast>)> {
    let (nodes, sys) = sigma_histories(dataset);
    let keep = |k: &MonthKey| through.is_none_or(|m| *k <= m);
    let sys_hist: Vec<f64> = sys.iter().filter(|(k, _)| keep(k)).map(|(_, v)| *v).collect();
    let last_month = sys
        .iter()
        .filter(|(k, _)| keep(k))
        .map(|(k, _)| *k)
        .next_back()
        .ok_or_else(|| Error::invalid("no months in range to forecast from"))?;
    let sys_next = *sys_hist.last().unwrap();

    let mut out = BTreeMap::new();
    for (node, hist) in &nodes {
        let node_hist: Vec<f64> = hist.iter().filter(|(k, _)| keep(k)).map(|(_, v)| *v).collect();
        let fc = forecast_sigma(&node_hist, &sys_hist, sys_next)?;
        out.insert(node.clone(), fc);
    }
    Ok((last_month.next(), out))
}

pub fn cmd_forecast(cfg: &RunConfig) -> Result<PathBuf> {
    let dataset = load_data(cfg)?;
    let (target, forecasts) = sigma_forecasts(&dataset, None)?;
    let mut csv = String::from("node_id,target_month,sigma_forecast,method,p,d,q,offset\n");
    for (node, fc) in &forecasts {
        let (p, d, q) = fc
            .orders
            .map(|o| (o.p.to_string(), o.d.to_string(), o.q.to_string()))
            .unwrap_or_default();
        csv.push_str(&format!(
            "{node},{target},{},{},{p},{d},{q},{}\n",
            fc.sigma, fc.method, fc.offset
        ));
    }
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let path = cfg.out_dir.join("forecast.csv");
    write_text(&path, &csv)?;
    Ok(path)
}

// ---------------------------------------------------------------------------
// cluster
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
pub struct ClusterOutcome {
    pub k: usize,
    pub labels: BTreeMap<String, usize>,
    pub inertia: f64,
    pub iterations: usize,
    pub pca_retained: usize,
    pub pca_explained: f64,
    pub elbow: Option<ElbowResult>,
}

/// Features on `days`, PCA, then K-means; k comes from the config or the
/// elbow rule when the config leaves it at zero.
pub fn cluster_nodes(
    cfg: &RunConfig,
    dataset: &MarketDataset,
    days: &[NaiveDate],
) -> Result<ClusterOutcome> {
    let features = daily_sigma_features(dataset, days)?;
    let (scores, pca) = pca_reduce(&features.rows, cfg.cluster.min_explained)?;
    let n = scores.len();
    let (k, elbow) = if cfg.cluster.k > 0 {
        (cfg.cluster.k, None)
    } else {
        let k_min = cfg.cluster.k_min.clamp(1, n);
        let k_max = cfg.cluster.k_max.clamp(k_min, n);
        let e = elbow_select(&scores, k_min, k_max, cfg.seed, cfg.cluster.restarts)?;
        (e.chosen_k, Some(e))
    };
    let model = kmeans(&scores, k, cfg.seed, cfg.cluster.restarts)?;
    let labels: BTreeMap<String, usize> = features
        .node_ids
        .iter()
        .cloned()
        .zip(model.labels.iter().copied())
        .collect();
    Ok(ClusterOutcome {
        k,
        labels,
        inertia: model.inertia,
        iterations: model.iterations,
        pca_retained: pca.retained,
        pca_explained: pca.explained,
        elbow,
    })
}

pub fn cmd_cluster(cfg: &RunConfig) -> Result<PathBuf> {
    let dataset = load_data(cfg)?;
    let outcome = cluster_nodes(cfg, &dataset, &dataset.full_days())?;

    let mut csv = String::from("node_id,cluster\n");
    for (node, label) in &outcome.labels {
        csv.push_str(&format!("{node},{label}\n"));
    }
    let path = cfg.out_dir.join("clusters.csv");
    write_text(&path, &csv)?;

    let json = serde_json::to_string_pretty(&outcome)
        .map_err(|e| Error::invalid(format!("serializing cluster summary: {e}")))?;
    write_text(&cfg.out_dir.join("cluster_summary.json"), &json)?;
    Ok(path)
}

// ---------------------------------------------------------------------------
// place
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
struct PlacementReport {
    target_month: String,
    selected: Vec<String>,
    objective: f64,
    sigma_forecast: BTreeMap<String, f64>,
    cluster: BTreeMap<String, usize>,
    clusters_at_cap: Vec<usize>,
    pairs_at_min_distance: Vec<(String, String, f64)>,
    nodes_explored: u64,
    branches_pruned: u64,
}

/// Forecast, cluster, and solve the siting problem for the month after the
/// dataset (or after `through`).
pub fn place_for_month(
    cfg: &RunConfig,
    dataset: &MarketDataset,
    through: Option<MonthKey>,
) -> Result<(MonthKey, PlacementProblem, placement::PlacementSolution, ClusterOutcome)> {
    let (target, forecasts) = sigma_forecasts(dataset, through)?;
    let sigma: BTreeMap<String, f64> =
        forecasts.iter().map(|(n, f)| (n.clone(), f.sigma)).collect();

    let all_days = dataset.full_days();
    let cluster_month = through.unwrap_or_else(|| {
        all_days.last().map(|d| MonthKey::of(*d)).unwrap_or(MonthKey { year: 0, month: 1 })
    });
    let month_days: Vec<NaiveDate> =
        all_days.iter().copied().filter(|d| MonthKey::of(*d) == cluster_month).collect();
    let days = if month_days.is_empty() { all_days } else { month_days };
    let clusters = cluster_nodes(cfg, dataset, &days)?;

    let problem = PlacementProblem::from_registry(
        &dataset.registry,
        &sigma,
        &clusters.labels,
        cfg.placement.n_es,
        cfg.placement.max_per_cluster,
        cfg.placement.min_distance_miles,
    )?;
    let solution = placement::solve(&problem)?;
    Ok((target, problem, solution, clusters))
}

pub fn cmd_place(cfg: &RunConfig) -> Result<PathBuf> {
    let dataset = load_data(cfg)?;
    let (target, problem, solution, clusters) = place_for_month(cfg, &dataset, None)?;

    let mut cluster_counts: BTreeMap<usize, usize> = BTreeMap::new();
    for id in &solution.node_ids {
        *cluster_counts.entry(clusters.labels[id]).or_insert(0) += 1;
    }
    let clusters_at_cap: Vec<usize> = cluster_counts
        .iter()
        .filter(|(_, c)| **c == cfg.placement.max_per_cluster)
        .map(|(k, _)| *k)
        .collect();
    let mut pairs_at_min = Vec::new();
    for (a_pos, i) in solution.indices.iter().enumerate() {
        for j in &solution.indices[a_pos + 1..] {
            let d = problem.distance[*i][*j];
            if d <= problem.min_distance_miles + 1e-9 {
                pairs_at_min.push((
                    problem.node_ids[*i].clone(),
                    problem.node_ids[*j].clone(),
                    d,
                ));
            }
        }
    }

    let report = PlacementReport {
        target_month: target.to_string(),
        selected: solution.node_ids.clone(),
        objective: solution.objective,
        sigma_forecast: problem
            .node_ids
            .iter()
            .cloned()
            .zip(problem.sigma.iter().copied())
            .collect(),
        cluster: clusters.labels.clone(),
        clusters_at_cap,
        pairs_at_min_distance: pairs_at_min,
        nodes_explored: solution.nodes_explored,
        branches_pruned: solution.branches_pruned,
    };
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::invalid(format!("serializing placement: {e}")))?;
    let path = cfg.out_dir.join("placement.json");
    write_text(&path, &json)?;
    Ok(path)
}

// ---------------------------------------------------------------------------
// backtest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct BacktestRow {
    pub month: String,
    pub base_nodes: Vec<String>,
    pub proposed_nodes: Vec<String>,
    pub base_realized: f64,
    pub proposed_realized: f64,
}

/// Walk-forward comparison. For each ledger month m with a successor: the
/// base arm takes the top nodes by month-m realized net; the proposed arm
/// forecasts volatility from data through m, clusters month m, and solves
/// the placement for m+1. Both arms are scored on the m+1 ledger.
pub fn run_backtest(cfg: &RunConfig, dataset: &MarketDataset, ledger: &RevenueLedger) -> Result<Vec<BacktestRow>> {
    let monthly = aggregate(ledger, Grouping::Month);
    let months: Vec<MonthKey> = {
        let mut m: Vec<MonthKey> =
            ledger.dates().into_iter().map(MonthKey::of).collect();
        m.dedup();
        m
    };
    if months.len() < 2 {
        return Err(Error::invalid("backtest needs at least two ledger months"));
    }
    for pair in months.windows(2) {
        if pair[1] != pair[0].next() {
            return Err(Error::Gap(format!(
                "ledger months are not consecutive: {} then {}",
                pair[0], pair[1]
            )));
        }
    }

    let key_of = |m: MonthKey| crate::revenue::PeriodKey::Month { year: m.year, month: m.month };
    let mut rows = Vec::new();
    for pair in months.windows(2) {
        let (m, target) = (pair[0], pair[1]);
        let base_nets = period_nets(&monthly[&key_of(m)]);
        let base = top_n_nodes(&base_nets, cfg.placement.n_es);

        let (fc_target, _, solution, _) = place_for_month(cfg, dataset, Some(m))?;
        if fc_target != target {
            return Err(Error::Gap(format!(
                "dataset supports forecasting {fc_target} but the ledger's next month is {target}"
            )));
        }
        let proposed = solution.node_ids.clone();

        let target_nets = period_nets(&monthly[&key_of(target)]);
        let realized = |set: &[String]| -> Result<f64> {
            let mut acc = KahanSum::new();
            for node in set {
                let net = target_nets.get(node).ok_or_else(|| {
                    Error::invalid(format!("node {node} missing from ledger month {target}"))
                })?;
                acc.add(*net);
            }
            Ok(acc.value())
        };
        rows.push(BacktestRow {
            month: target.to_string(),
            base_realized: realized(&base)?,
            proposed_realized: realized(&proposed)?,
            base_nodes: base,
            proposed_nodes: proposed,
        });
    }
    Ok(rows)
}

pub fn cmd_backtest(cfg: &RunConfig) -> Result<PathBuf> {
    let dataset = load_data(cfg)?;
    let ledger = RevenueLedger::read_csv(&ledger_path(cfg))?;
    let rows = run_backtest(cfg, &dataset, &ledger)?;

    let mut csv =
        String::from("month,base_nodes,proposed_nodes,base_realized,proposed_realized\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.month,
            r.base_nodes.join(";"),
            r.proposed_nodes.join(";"),
            r.base_realized,
            r.proposed_realized
        ));
    }
    let path = cfg.out_dir.join("backtest.csv");
    write_text(&path, &csv)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn test_config(tmp: &TempDir) -> RunConfig {
        let mut cfg = RunConfig {
            data_dir: tmp.path().join("data"),
            out_dir: tmp.path().join("out"),
            ..RunConfig::default()
        };
        cfg.synth.nodes = 4;
        cfg.synth.days = 70;
        cfg.synth.base_sigma = vec![3.0, 9.0, 27.0, 81.0];
        cfg.dispatch.soc_step_mwh = 2.5;
        cfg.dispatch.power_step_mw = 2.5;
        cfg.cluster.k = 2;
        cfg.cluster.restarts = 3;
        cfg.placement.n_es = 2;
        cfg.placement.max_per_cluster = 2;
        cfg.placement.min_distance_miles = 0.0;
        cfg
    }

    #[test]
    fn config_roundtrips_through_toml_and_partial_files_fill_defaults() {
        let cfg = RunConfig::default();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.seed, cfg.seed);
        assert_eq!(back.placement.n_es, 5);
        assert_eq!(back.placement.max_per_cluster, 1);
        assert_eq!(back.placement.min_distance_miles, 50.0);
        assert_eq!(back.bess.p_max, 10.0);
        assert_eq!(back.relocation.road_factor, 1.2);

        let partial: RunConfig = toml::from_str("seed = 9\n[placement]\nn_es = 3\n").unwrap();
        assert_eq!(partial.seed, 9);
        assert_eq!(partial.placement.n_es, 3);
        assert_eq!(partial.placement.min_distance_miles, 50.0);
    }

    #[test]
    fn sweep_is_resumable_and_complete() {
        let tmp = TempDir::new().unwrap();
        let mut cfg = test_config(&tmp);
        cfg.synth.days = 3;
        cmd_synth(&cfg).unwrap();

        let first = cmd_sweep(&cfg).unwrap();
        assert_eq!(first, SweepOutcome { computed: 12, skipped: 0, failed: 0 });
        let second = cmd_sweep(&cfg).unwrap();
        assert_eq!(second, SweepOutcome { computed: 0, skipped: 12, failed: 0 });

        let ledger = RevenueLedger::read_csv(&ledger_path(&cfg)).unwrap();
        assert_eq!(ledger.len(), 12);
    }

    #[test]
    fn sweep_rows_match_direct_solves() {
        let tmp = TempDir::new().unwrap();
        let mut cfg = test_config(&tmp);
        cfg.synth.days = 2;
        cmd_synth(&cfg).unwrap();
        cmd_sweep(&cfg).unwrap();

        let dataset = load_data(&cfg).unwrap();
        let ledger = RevenueLedger::read_csv(&ledger_path(&cfg)).unwrap();
        let date = dataset.full_days()[1];
        let direct = solve_day(
            &dataset,
            &cfg.bess,
            &cfg.dispatch.grid(),
            DispatchMode::Joint,
            "N002",
            date,
        )
        .unwrap();
        let row = ledger.get("N002", date).unwrap();
        assert_eq!(row.net.to_bits(), direct.net.to_bits());
    }

    #[test]
    fn report_emits_the_full_bundle() {
        let tmp = TempDir::new().unwrap();
        let mut cfg = test_config(&tmp);
        cfg.synth.days = 40;
        cmd_synth(&cfg).unwrap();
        cmd_sweep(&cfg).unwrap();
        let dir = cmd_report(&cfg).unwrap();

        for file in [
            "percentile_map.csv",
            "monthly_net.csv",
            "seasonal_net.csv",
            "daily_difference.csv",
            "hourly_lmp_quantiles.csv",
            "plans.json",
        ] {
            assert!(dir.join(file).exists(), "{file} missing");
        }
        let diff = fs::read_to_string(dir.join("daily_difference.csv")).unwrap();
        let last = diff.lines().last().unwrap();
        assert!(last.ends_with(",1"), "cumulative share must end at 1: {last}");
        let schedules: Vec<_> = fs::read_dir(&dir)
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().starts_with("schedule_"))
            .collect();
        assert_eq!(schedules.len(), 2);
    }

    #[test]
    fn single_node_report_skips_the_comparison() {
        let tmp = TempDir::new().unwrap();
        let mut cfg = test_config(&tmp);
        cfg.synth.nodes = 1;
        cfg.synth.days = 12;
        cfg.synth.base_sigma = vec![5.0];
        cfg.cluster.k = 1;
        cmd_synth(&cfg).unwrap();
        cmd_sweep(&cfg).unwrap();
        let dir = cmd_report(&cfg).unwrap();
        let diff = fs::read_to_string(dir.join("daily_difference.csv")).unwrap();
        assert_eq!(diff.lines().count(), 1, "expected header only: {diff}");
    }

    #[test]
    fn pipeline_outputs_are_deterministic() {
        let run = |root: &Path| -> Vec<(String, Vec<u8>)> {
            let mut cfg = RunConfig {
                data_dir: root.join("data"),
                out_dir: root.join("out"),
                ..RunConfig::default()
            };
            cfg.synth.nodes = 4;
            cfg.synth.days = 70;
            cfg.synth.base_sigma = vec![3.0, 9.0, 27.0, 81.0];
            cfg.dispatch.soc_step_mwh = 2.5;
            cfg.dispatch.power_step_mw = 2.5;
            cfg.cluster.k = 2;
            cfg.cluster.restarts = 3;
            cfg.placement.n_es = 2;
            cfg.placement.max_per_cluster = 2;
            cfg.placement.min_distance_miles = 0.0;
            cmd_synth(&cfg).unwrap();
            cmd_sweep(&cfg).unwrap();
            cmd_forecast(&cfg).unwrap();
            cmd_cluster(&cfg).unwrap();
            cmd_place(&cfg).unwrap();

            let mut files = Vec::new();
            let mut stack = vec![cfg.out_dir.clone()];
            while let Some(d) = stack.pop() {
                for entry in fs::read_dir(&d).unwrap() {
                    let p = entry.unwrap().path();
                    if p.is_dir() {
                        stack.push(p);
                    } else {
                        let name = p.strip_prefix(&cfg.out_dir).unwrap().to_string_lossy().into_owned();
                        let ext = p.extension().and_then(|e| e.to_str()).unwrap_or("");
                        if ext == "csv" || ext == "json" {
                            files.push((name, fs::read(&p).unwrap()));
                        }
                    }
                }
            }
            files.sort();
            files
        };
        let a = TempDir::new().unwrap();
        let b = TempDir::new().unwrap();
        let fa = run(a.path());
        let fb = run(b.path());
        assert_eq!(fa.len(), fb.len());
        for ((na, ca), (nb, cb)) in fa.iter().zip(fb.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ca, cb, "{na} differs between runs");
        }
    }

    #[test]
    fn backtest_needs_two_months() {
        let tmp = TempDir::new().unwrap();
        let mut cfg = test_config(&tmp);
        cfg.synth.days = 10;
        cmd_synth(&cfg).unwrap();
        cmd_sweep(&cfg).unwrap();
        let err = cmd_backtest(&cfg).unwrap_err();
        assert!(err.to_string().contains("two ledger months"), "{err}");
    }

    #[test]
    fn backtest_walks_forward_over_months() {
        let tmp = TempDir::new().unwrap();
        let mut cfg = test_config(&tmp);
        cfg.synth.days = 70;
        cmd_synth(&cfg).unwrap();
        cmd_sweep(&cfg).unwrap();
        let path = cmd_backtest(&cfg).unwrap();
        let text = fs::read_to_string(path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        // 70 days from Jan 1 span Jan, Feb, and a partial March.
        assert_eq!(lines.len(), 3, "{text}");
        assert!(lines[1].starts_with("2018-02,"));
        assert!(lines[2].starts_with("2018-03,"));
        for line in &lines[1..] {
            let fields: Vec<&str> = line.split(',').collect();
            assert_eq!(fields[1].split(';').count(), 2);
            assert_eq!(fields[2].split(';').count(), 2);
        }
    }

    #[test]
    fn ingest_rebuilds_a_saved_dataset() {
        let tmp = TempDir::new().unwrap();
        let mut cfg = test_config(&tmp);
        cfg.synth.days = 2;
        let src = cmd_synth(&cfg).unwrap();

        let mut cfg2 = cfg.clone();
        cfg2.data_dir = tmp.path().join("data2");
        cmd_ingest(&cfg2, &src).unwrap();
        let a = load_dataset(&src).unwrap();
        let b = load_dataset(&cfg2.data_dir).unwrap();
        assert_eq!(a.hours, b.hours);
        assert_eq!(a.node_ids(), b.node_ids());
        assert_eq!(a.lmp["N001"], b.lmp["N001"]);
    }

    #[test]
    fn resolved_config_snapshot_is_written() {
        let tmp = TempDir::new().unwrap();
        let cfg = test_config(&tmp);
        let path = write_resolved_config(&cfg).unwrap();
        let text = fs::read_to_string(path).unwrap();
        assert!(text.contains("n_es = 2"));
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.synth.base_sigma, cfg.synth.base_sigma);
    }
}
