//! Market data: node registry, hourly price series, regulation signals and
//! synthetic dataset generation.
//!
//! All CSV inputs are accepted plain or gzip-compressed (sniffed from the
//! magic bytes, not the extension). Timestamps are ISO-8601 and stored UTC;
//! naive timestamps are taken as UTC. Loaders reject NaN and malformed rows
//! with the file and line, and refuse gaps or duplicates instead of patching
//! them.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDate, TimeZone, Timelike, Utc};
use flate2::read::GzDecoder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Samples per hour of a 2-second regulation signal.
pub const SIGNAL_SAMPLES_PER_HOUR: usize = 1800;

// ---------------------------------------------------------------------------
// Registry
// ---------------------------------------------------------------------------

/// One pricing node.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NodeRecord {
    pub node_id: String,
    pub display_name: String,
    pub latitude: f64,
    pub longitude: f64,
    pub zone: String,
}

/// Node registry keyed by node id.
#[derive(Debug, Clone, Default)]
pub struct Registry {
    nodes: BTreeMap<String, NodeRecord>,
}

impl Registry {
    pub fn new(records: Vec<NodeRecord>) -> Result<Self> {
        let mut nodes = BTreeMap::new();
        for rec in records {
            if !rec.latitude.is_finite() || rec.latitude.abs() > 90.0 {
                return Err(Error::invalid(format!(
                    "node {}: latitude {} out of range",
                    rec.node_id, rec.latitude
                )));
            }
            if !rec.longitude.is_finite() || rec.longitude.abs() > 180.0 {
                return Err(Error::invalid(format!(
                    "node {}: longitude {} out of range",
                    rec.node_id, rec.longitude
                )));
            }
            if rec.node_id.is_empty() {
                return Err(Error::invalid("empty node_id in registry"));
            }
            if let Some(prev) = nodes.insert(rec.node_id.clone(), rec) {
                return Err(Error::invalid(format!(
                    "duplicate node_id in registry: {}",
                    prev.node_id
                )));
            }
        }
        Ok(Registry { nodes })
    }

    pub fn get(&self, node_id: &str) -> Option<&NodeRecord> {
        self.nodes.get(node_id)
    }

    pub fn contains(&self, node_id: &str) -> bool {
        self.nodes.contains_key(node_id)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &NodeRecord> {
        self.nodes.values()
    }
}

// ---------------------------------------------------------------------------
// Shared CSV plumbing
// ---------------------------------------------------------------------------

/// Opens a file for reading, decompressing transparently when the gzip
/// magic bytes are present.
pub fn open_maybe_gzip(path: &Path) -> Result<Box<dyn Read>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buffered = BufReader::new(file);
    let head = buffered.fill_buf().map_err(|e| Error::io(path, e))?;
    let gzipped = head.len() >= 2 && head[0] == 0x1f && head[1] == 0x8b;
    Ok(if gzipped {
        Box::new(GzDecoder::new(buffered))
    } else {
        Box::new(buffered)
    })
}

/// Parses an ISO-8601 timestamp; naive values are interpreted as UTC.
pub fn parse_timestamp(s: &str) -> std::result::Result<DateTime<Utc>, String> {
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Ok(dt.with_timezone(&Utc));
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S"] {
        if let Ok(naive) = chrono::NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(naive.and_utc());
        }
    }
    Err(format!("unparseable timestamp {s:?}"))
}

pub fn format_timestamp(t: DateTime<Utc>) -> String {
    t.format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

struct CsvTable {
    path: PathBuf,
    rows: Vec<(u64, Vec<String>)>,
}

impl CsvTable {
    fn read(path: &Path, expected_headers: &[&str]) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(open_maybe_gzip(path)?);
        let headers: Vec<String> = rdr
            .headers()
            .map_err(|e| Error::parse(path, 1, e.to_string()))?
            .iter()
            .map(|h| h.to_string())
            .collect();
        if headers != expected_headers {
            return Err(Error::parse(
                path,
                1,
                format!("expected header {expected_headers:?}, got {headers:?}"),
            ));
        }
        let mut rows = Vec::new();
        for record in rdr.records() {
            let record = record.map_err(|e| {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                Error::parse(path, line, e.to_string())
            })?;
            let line = record.position().map(|p| p.line()).unwrap_or(0);
            if record.len() != expected_headers.len() {
                return Err(Error::parse(
                    path,
                    line,
                    format!("expected {} fields, got {}", expected_headers.len(), record.len()),
                ));
            }
            rows.push((line, record.iter().map(|f| f.to_string()).collect()));
        }
        Ok(CsvTable { path: path.to_path_buf(), rows })
    }

    fn parse_f64(&self, line: u64, field: &str) -> Result<f64> {
        let v: f64 = field
            .parse()
            .map_err(|_| Error::parse(&self.path, line, format!("bad number {field:?}")))?;
        if !v.is_finite() {
            return Err(Error::parse(&self.path, line, format!("non-finite value {field:?}")));
        }
        Ok(v)
    }

    fn parse_ts(&self, line: u64, field: &str) -> Result<DateTime<Utc>> {
        parse_timestamp(field).map_err(|msg| Error::parse(&self.path, line, msg))
    }
}

fn check_hourly_contiguous(
    label: &str,
    stamps: &[DateTime<Utc>],
) -> Result<DateTime<Utc>> {
    let first = *stamps.first().ok_or_else(|| Error::Gap(format!("{label}: empty series")))?;
    for (i, t) in stamps.iter().enumerate() {
        if t.minute() != 0 || t.second() != 0 || t.nanosecond() != 0 {
            return Err(Error::invalid(format!(
                "{label}: timestamp {} is not on the hour",
                format_timestamp(*t)
            )));
        }
        let expected = first + chrono::Duration::hours(i as i64);
        if *t != expected {
            return Err(Error::Gap(format!(
                "{label}: expected hour {}, found {}",
                format_timestamp(expected),
                format_timestamp(*t)
            )));
        }
    }
    Ok(first)
}

// ---------------------------------------------------------------------------
// Registry / price / signal loaders
// ---------------------------------------------------------------------------

pub const REGISTRY_HEADER: [&str; 5] =
    ["node_id", "display_name", "latitude", "longitude", "zone"];
pub const LMP_HEADER: [&str; 3] = ["node_id", "timestamp_utc", "lmp_usd_per_mwh"];
pub const REG_PRICE_HEADER: [&str; 5] =
    ["timestamp_utc", "rmccp", "rmpcp", "mileage_rega", "mileage_regd"];
pub const REG_SIGNAL_HEADER: [&str; 3] = ["timestamp_utc", "rega", "regd"];
pub const REG_HOURLY_HEADER: [&str; 7] = [
    "timestamp_utc",
    "regd_up",
    "regd_down",
    "beta",
    "beta_flagged",
    "mileage_rega",
    "mileage_regd",
];

pub fn load_registry(path: &Path) -> Result<Registry> {
    let table = CsvTable::read(path, &REGISTRY_HEADER)?;
    let mut records = Vec::with_capacity(table.rows.len());
    let mut seen = BTreeSet::new();
    for (line, fields) in &table.rows {
        let rec = NodeRecord {
            node_id: fields[0].clone(),
            display_name: fields[1].clone(),
            latitude: table.parse_f64(*line, &fields[2])?,
            longitude: table.parse_f64(*line, &fields[3])?,
            zone: fields[4].clone(),
        };
        if !seen.insert(rec.node_id.clone()) {
            return Err(Error::parse(
                path,
                *line,
                format!("duplicate node_id {:?}", rec.node_id),
            ));
        }
        records.push(rec);
    }
    Registry::new(records)
}

pub fn write_registry(path: &Path, registry: &Registry) -> Result<()> {
    let mut w = csv_writer(path)?;
    write_row(&mut w, path, &REGISTRY_HEADER)?;
    for rec in registry.iter() {
        write_row(
            &mut w,
            path,
            &[
                rec.node_id.as_str(),
                rec.display_name.as_str(),
                &rec.latitude.to_string(),
                &rec.longitude.to_string(),
                rec.zone.as_str(),
            ],
        )?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn write_row<W: std::io::Write>(
    w: &mut csv::Writer<W>,
    path: &Path,
    fields: &[&str],
) -> Result<()> {
    w.write_record(fields)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

/// One node's hourly price series; `values[i]` belongs to `start + i` hours.
#[derive(Debug, Clone, PartialEq)]
pub struct HourlyLmpSeries {
    pub node_id: String,
    pub start: DateTime<Utc>,
    pub values: Vec<f64>,
}

/// Loads a long-format LMP file (any number of nodes). Each node's stamps
/// must be on the hour, duplicate-free and gap-free.
pub fn load_lmp_csv(path: &Path) -> Result<Vec<HourlyLmpSeries>> {
    let table = CsvTable::read(path, &LMP_HEADER)?;
    let mut per_node: BTreeMap<String, Vec<(DateTime<Utc>, f64)>> = BTreeMap::new();
    for (line, fields) in &table.rows {
        let ts = table.parse_ts(*line, &fields[1])?;
        let value = table.parse_f64(*line, &fields[2])?;
        per_node.entry(fields[0].clone()).or_default().push((ts, value));
    }
    let mut out = Vec::with_capacity(per_node.len());
    for (node_id, mut rows) in per_node {
        rows.sort_by_key(|(ts, _)| *ts);
        for pair in rows.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(Error::invalid(format!(
                    "node {node_id}: duplicate timestamp {}",
                    format_timestamp(pair[0].0)
                )));
            }
        }
        let stamps: Vec<_> = rows.iter().map(|(ts, _)| *ts).collect();
        let start = check_hourly_contiguous(&format!("lmp series for node {node_id}"), &stamps)?;
        out.push(HourlyLmpSeries {
            node_id,
            start,
            values: rows.into_iter().map(|(_, v)| v).collect(),
        });
    }
    Ok(out)
}

/// Hourly regulation market prices and published mileages (system-wide).
#[derive(Debug, Clone, PartialEq)]
pub struct RegulationPriceSeries {
    pub start: DateTime<Utc>,
    pub rmccp: Vec<f64>,
    pub rmpcp: Vec<f64>,
    pub mileage_rega: Vec<f64>,
    pub mileage_regd: Vec<f64>,
}

pub fn load_reg_prices_csv(path: &Path) -> Result<RegulationPriceSeries> {
    let table = CsvTable::read(path, &REG_PRICE_HEADER)?;
    let mut stamps = Vec::with_capacity(table.rows.len());
    let mut series = RegulationPriceSeries {
        start: Utc.timestamp_opt(0, 0).unwrap(),
        rmccp: Vec::new(),
        rmpcp: Vec::new(),
        mileage_rega: Vec::new(),
        mileage_regd: Vec::new(),
    };
    for (line, fields) in &table.rows {
        stamps.push(table.parse_ts(*line, &fields[0])?);
        for (slot, field) in [
            (&mut series.rmccp, &fields[1]),
            (&mut series.rmpcp, &fields[2]),
            (&mut series.mileage_rega, &fields[3]),
            (&mut series.mileage_regd, &fields[4]),
        ] {
            let v = table.parse_f64(*line, field)?;
            if v < 0.0 {
                return Err(Error::parse(path, *line, format!("negative value {field:?}")));
            }
            slot.push(v);
        }
    }
    series.start = check_hourly_contiguous("regulation prices", &stamps)?;
    Ok(series)
}

// ---------------------------------------------------------------------------
// Regulation signals
// ---------------------------------------------------------------------------

/// A 2-second normalized regulation signal trace; values in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct RegSignalTrace {
    pub start: DateTime<Utc>,
    pub values: Vec<f64>,
}

impl RegSignalTrace {
    pub fn new(start: DateTime<Utc>, values: Vec<f64>) -> Result<Self> {
        for (i, v) in values.iter().enumerate() {
            if !v.is_finite() || v.abs() > 1.0 {
                return Err(Error::invalid(format!(
                    "regulation signal sample {i} out of [-1, 1]: {v}"
                )));
            }
        }
        Ok(RegSignalTrace { start, values })
    }

    pub fn mileage(&self) -> Result<f64> {
        compute_mileage(&self.values)
    }
}

/// Total absolute movement of a signal: the sum of |s[i] - s[i-1]| over
/// consecutive samples. Needs at least two samples.
pub fn compute_mileage(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::invalid(format!(
            "mileage needs at least 2 samples, got {}",
            values.len()
        )));
    }
    let mut total = 0.0;
    for pair in values.windows(2) {
        if !pair[1].is_finite() || !pair[0].is_finite() {
            return Err(Error::invalid("non-finite sample in mileage input"));
        }
        total += (pair[1] - pair[0]).abs();
    }
    Ok(total)
}

/// Hourly summary of the regulation signals: fraction of the hour's energy
/// spent following the signal up/down, signal mileages and their ratio.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct HourlyRegAggregate {
    /// MWh absorbed per MW of regulation offered while the signal is up.
    pub regd_up: f64,
    /// Same for the down direction.
    pub regd_down: f64,
    pub mileage_rega: f64,
    pub mileage_regd: f64,
    /// Fast-to-slow mileage ratio; 0 when flagged.
    pub beta: f64,
    /// True when RegA mileage was zero while RegD moved, leaving the ratio
    /// undefined; such hours earn no performance credit.
    pub beta_flagged: bool,
}

/// Summarizes one hour of 2-second RegD/RegA signal (exactly
/// [`SIGNAL_SAMPLES_PER_HOUR`] samples each).
pub fn aggregate_hour(regd: &[f64], rega: &[f64]) -> Result<HourlyRegAggregate> {
    if regd.len() != SIGNAL_SAMPLES_PER_HOUR || rega.len() != SIGNAL_SAMPLES_PER_HOUR {
        return Err(Error::invalid(format!(
            "expected {SIGNAL_SAMPLES_PER_HOUR} samples per hour, got regd={}, rega={}",
            regd.len(),
            rega.len()
        )));
    }
    let dt_hours = 1.0 / SIGNAL_SAMPLES_PER_HOUR as f64;
    let mut up = 0.0;
    let mut down = 0.0;
    for &v in regd {
        if !v.is_finite() || v.abs() > 1.0 {
            return Err(Error::invalid(format!("regd sample out of [-1, 1]: {v}")));
        }
        if v > 0.0 {
            up += v * dt_hours;
        } else {
            down += -v * dt_hours;
        }
    }
    let mileage_regd = compute_mileage(regd)?;
    let mileage_rega = compute_mileage(rega)?;
    let (beta, beta_flagged) = if mileage_rega == 0.0 {
        // No slow-signal movement: the ratio is undefined if the fast signal
        // moved, and irrelevant if it did not.
        (0.0, mileage_regd > 0.0)
    } else {
        (mileage_regd / mileage_rega, false)
    };
    Ok(HourlyRegAggregate { regd_up: up, regd_down: down, mileage_rega, mileage_regd, beta, beta_flagged })
}

/// Splits aligned RegD/RegA traces into whole hours and summarizes each.
pub fn aggregate_regd_hourly(
    regd: &RegSignalTrace,
    rega: &RegSignalTrace,
) -> Result<Vec<HourlyRegAggregate>> {
    if regd.start != rega.start {
        return Err(Error::invalid("regd and rega traces start at different times"));
    }
    if regd.values.len() != rega.values.len() {
        return Err(Error::invalid("regd and rega traces have different lengths"));
    }
    if !regd.values.len().is_multiple_of(SIGNAL_SAMPLES_PER_HOUR) {
        return Err(Error::invalid(format!(
            "trace length {} is not a whole number of hours",
            regd.values.len()
        )));
    }
    regd.values
        .chunks(SIGNAL_SAMPLES_PER_HOUR)
        .zip(rega.values.chunks(SIGNAL_SAMPLES_PER_HOUR))
        .map(|(d, a)| aggregate_hour(d, a))
        .collect()
}

/// Streams a 2-second signal CSV and aggregates it hour by hour without
/// materializing the trace. Stamps must advance by exactly 2 seconds.
pub fn aggregate_signal_csv(path: &Path) -> Result<(DateTime<Utc>, Vec<HourlyRegAggregate>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(open_maybe_gzip(path)?);
    let headers: Vec<String> =
        rdr.headers().map_err(|e| Error::parse(path, 1, e.to_string()))?
            .iter().map(|h| h.to_string()).collect();
    if headers != REG_SIGNAL_HEADER {
        return Err(Error::parse(
            path,
            1,
            format!("expected header {REG_SIGNAL_HEADER:?}, got {headers:?}"),
        ));
    }
    let mut start: Option<DateTime<Utc>> = None;
    let mut expected: Option<DateTime<Utc>> = None;
    let mut rega_hour = Vec::with_capacity(SIGNAL_SAMPLES_PER_HOUR);
    let mut regd_hour = Vec::with_capacity(SIGNAL_SAMPLES_PER_HOUR);
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            Error::parse(path, line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != 3 {
            return Err(Error::parse(path, line, "expected 3 fields"));
        }
        let ts = parse_timestamp(&record[0]).map_err(|m| Error::parse(path, line, m))?;
        match expected {
            None => {
                if ts.second() != 0 || ts.minute() != 0 || ts.nanosecond() != 0 {
                    return Err(Error::parse(path, line, "signal must start on the hour"));
                }
                start = Some(ts);
            }
            Some(want) if ts != want => {
                return Err(Error::Gap(format!(
                    "{}: expected sample at {}, found {}",
                    path.display(),
                    format_timestamp(want),
                    format_timestamp(ts)
                )));
            }
            _ => {}
        }
        expected = Some(ts + chrono::Duration::seconds(2));
        let parse = |s: &str| -> Result<f64> {
            let v: f64 =
                s.parse().map_err(|_| Error::parse(path, line, format!("bad number {s:?}")))?;
            if !v.is_finite() || v.abs() > 1.0 {
                return Err(Error::parse(path, line, format!("signal value out of [-1, 1]: {s}")));
            }
            Ok(v)
        };
        rega_hour.push(parse(&record[1])?);
        regd_hour.push(parse(&record[2])?);
        if regd_hour.len() == SIGNAL_SAMPLES_PER_HOUR {
            out.push(aggregate_hour(&regd_hour, &rega_hour)?);
            regd_hour.clear();
            rega_hour.clear();
        }
    }
    if !regd_hour.is_empty() {
        return Err(Error::Gap(format!(
            "{}: trailing partial hour of {} samples",
            path.display(),
            regd_hour.len()
        )));
    }
    let start = start.ok_or_else(|| Error::Gap(format!("{}: empty signal", path.display())))?;
    Ok((start, out))
}

// ---------------------------------------------------------------------------
// Aligned dataset
// ---------------------------------------------------------------------------

/// System-wide hourly regulation market series, aligned to the dataset hours.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RegulationSeries {
    pub rmccp: Vec<f64>,
    pub rmpcp: Vec<f64>,
    pub mileage_rega: Vec<f64>,
    pub mileage_regd: Vec<f64>,
    pub regd_up: Vec<f64>,
    pub regd_down: Vec<f64>,
    pub beta: Vec<f64>,
    pub beta_flagged: Vec<bool>,
}

/// Registry, nodal prices and regulation series on one hourly timeline.
#[derive(Debug, Clone)]
pub struct MarketDataset {
    pub registry: Registry,
    pub start: DateTime<Utc>,
    pub hours: usize,
    pub lmp: BTreeMap<String, Vec<f64>>,
    pub reg: RegulationSeries,
}

/// Hour-aligned view of one calendar day for one node.
#[derive(Debug, Clone, Copy)]
pub struct DayView<'a> {
    pub lmp: &'a [f64],
    pub rmccp: &'a [f64],
    pub rmpcp: &'a [f64],
    pub beta: &'a [f64],
    pub regd_up: &'a [f64],
    pub regd_down: &'a [f64],
}

impl MarketDataset {
    /// Aligns per-node prices, regulation prices, and (optionally) hourly
    /// signal aggregates onto the regulation-price timeline. Every series
    /// must cover exactly the same hours; mismatches name the offender.
    /// Without signal aggregates, the ratio comes from the published
    /// mileage columns and the up/down fractions default to zero (joint
    /// dispatch then carries no state-of-charge drift).
    pub fn build(
        registry: Registry,
        lmp_series: Vec<HourlyLmpSeries>,
        prices: RegulationPriceSeries,
        aggregates: Option<Vec<HourlyRegAggregate>>,
    ) -> Result<Self> {
        let hours = prices.rmccp.len();
        if hours == 0 {
            return Err(Error::Gap("regulation price series is empty".into()));
        }
        if lmp_series.is_empty() {
            return Err(Error::Gap("no lmp series provided".into()));
        }
        let mut lmp = BTreeMap::new();
        for series in lmp_series {
            if !registry.contains(&series.node_id) {
                return Err(Error::invalid(format!(
                    "lmp series for node {} missing from registry",
                    series.node_id
                )));
            }
            if series.start != prices.start || series.values.len() != hours {
                return Err(Error::Gap(format!(
                    "node {}: lmp covers {} hours from {}, expected {} from {}",
                    series.node_id,
                    series.values.len(),
                    format_timestamp(series.start),
                    hours,
                    format_timestamp(prices.start)
                )));
            }
            if lmp.insert(series.node_id.clone(), series.values).is_some() {
                return Err(Error::invalid(format!(
                    "duplicate lmp series for node {}",
                    series.node_id
                )));
            }
        }

        let mut reg = RegulationSeries {
            rmccp: prices.rmccp,
            rmpcp: prices.rmpcp,
            mileage_rega: prices.mileage_rega,
            mileage_regd: prices.mileage_regd,
            ..RegulationSeries::default()
        };
        match aggregates {
            Some(aggs) => {
                if aggs.len() != hours {
                    return Err(Error::Gap(format!(
                        "signal aggregates cover {} hours, expected {hours}",
                        aggs.len()
                    )));
                }
                // Trace-derived mileages supersede the published columns so
                // every regulation quantity is self-consistent.
                reg.mileage_rega = aggs.iter().map(|a| a.mileage_rega).collect();
                reg.mileage_regd = aggs.iter().map(|a| a.mileage_regd).collect();
                reg.regd_up = aggs.iter().map(|a| a.regd_up).collect();
                reg.regd_down = aggs.iter().map(|a| a.regd_down).collect();
                reg.beta = aggs.iter().map(|a| a.beta).collect();
                reg.beta_flagged = aggs.iter().map(|a| a.beta_flagged).collect();
            }
            None => {
                reg.regd_up = vec![0.0; hours];
                reg.regd_down = vec![0.0; hours];
                for t in 0..hours {
                    let (rega, regd) = (reg.mileage_rega[t], reg.mileage_regd[t]);
                    if rega == 0.0 {
                        reg.beta.push(0.0);
                        reg.beta_flagged.push(regd > 0.0);
                    } else {
                        reg.beta.push(regd / rega);
                        reg.beta_flagged.push(false);
                    }
                }
            }
        }

        Ok(MarketDataset { registry, start: prices.start, hours, lmp, reg })
    }

    pub fn node_ids(&self) -> Vec<String> {
        self.lmp.keys().cloned().collect()
    }

    pub fn timestamp(&self, hour: usize) -> DateTime<Utc> {
        self.start + chrono::Duration::hours(hour as i64)
    }

    /// Calendar days (UTC) fully covered by the dataset.
    pub fn full_days(&self) -> Vec<NaiveDate> {
        let mut days = Vec::new();
        let mut t = self.start.date_naive();
        if self.start.hour() != 0 {
            t = t.succ_opt().unwrap();
        }
        while self.day_offset(t).is_ok() {
            days.push(t);
            t = t.succ_opt().unwrap();
        }
        days
    }

    fn day_offset(&self, date: NaiveDate) -> Result<usize> {
        let midnight = date.and_hms_opt(0, 0, 0).unwrap().and_utc();
        let offset = (midnight - self.start).num_hours();
        if offset < 0 || offset % 24 != 0 && self.start.hour() != 0 {
            return Err(Error::Gap(format!("day {date} not covered by dataset")));
        }
        if offset < 0 || (offset as usize) + 24 > self.hours {
            return Err(Error::Gap(format!("day {date} not covered by dataset")));
        }
        Ok(offset as usize)
    }

    /// The 24 aligned hours of `date` for `node`.
    pub fn day_view(&self, node: &str, date: NaiveDate) -> Result<DayView<'_>> {
        let lmp = self
            .lmp
            .get(node)
            .ok_or_else(|| Error::invalid(format!("unknown node {node}")))?;
        let o = self.day_offset(date)?;
        Ok(DayView {
            lmp: &lmp[o..o + 24],
            rmccp: &self.reg.rmccp[o..o + 24],
            rmpcp: &self.reg.rmpcp[o..o + 24],
            beta: &self.reg.beta[o..o + 24],
            regd_up: &self.reg.regd_up[o..o + 24],
            regd_down: &self.reg.regd_down[o..o + 24],
        })
    }

    /// Hourly average price across all nodes (the system price proxy).
    pub fn system_lmp(&self) -> Vec<f64> {
        let n = self.lmp.len() as f64;
        let mut out = vec![0.0; self.hours];
        for series in self.lmp.values() {
            for (acc, v) in out.iter_mut().zip(series) {
                *acc += v / n;
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Dataset directory persistence
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    start: String,
    hours: usize,
    nodes: Vec<String>,
}

/// Writes the normalized dataset layout: `registry.csv`, `lmp.csv`,
/// `reg_prices.csv`, `reg_hourly.csv` and `dataset.json`.
pub fn save_dataset(dir: &Path, ds: &MarketDataset) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_registry(&dir.join("registry.csv"), &ds.registry)?;

    let path = dir.join("lmp.csv");
    let mut w = csv_writer(&path)?;
    write_row(&mut w, &path, &LMP_HEADER)?;
    for (node, values) in &ds.lmp {
        for (t, v) in values.iter().enumerate() {
            write_row(&mut w, &path, &[node, &format_timestamp(ds.timestamp(t)), &v.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("reg_prices.csv");
    let mut w = csv_writer(&path)?;
    write_row(&mut w, &path, &REG_PRICE_HEADER)?;
    for t in 0..ds.hours {
        write_row(
            &mut w,
            &path,
            &[
                &format_timestamp(ds.timestamp(t)),
                &ds.reg.rmccp[t].to_string(),
                &ds.reg.rmpcp[t].to_string(),
                &ds.reg.mileage_rega[t].to_string(),
                &ds.reg.mileage_regd[t].to_string(),
            ],
        )?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("reg_hourly.csv");
    let mut w = csv_writer(&path)?;
    write_row(&mut w, &path, &REG_HOURLY_HEADER)?;
    for t in 0..ds.hours {
        write_row(
            &mut w,
            &path,
            &[
                &format_timestamp(ds.timestamp(t)),
                &ds.reg.regd_up[t].to_string(),
                &ds.reg.regd_down[t].to_string(),
                &ds.reg.beta[t].to_string(),
                if ds.reg.beta_flagged[t] { "true" } else { "false" },
                &ds.reg.mileage_rega[t].to_string(),
                &ds.reg.mileage_regd[t].to_string(),
            ],
        )?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let manifest = DatasetManifest {
        start: format_timestamp(ds.start),
        hours: ds.hours,
        nodes: ds.node_ids(),
    };
    let path = dir.join("dataset.json");
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::to_writer_pretty(&file, &manifest)
        .map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
    writeln!(&file).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// Loads a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<MarketDataset> {
    let registry = load_registry(&dir.join("registry.csv"))?;
    let lmp = load_lmp_csv(&dir.join("lmp.csv"))?;
    let prices = load_reg_prices_csv(&dir.join("reg_prices.csv"))?;

    let path = dir.join("reg_hourly.csv");
    let table = CsvTable::read(&path, &REG_HOURLY_HEADER)?;
    let mut stamps = Vec::new();
    let mut aggs = Vec::with_capacity(table.rows.len());
    for (line, fields) in &table.rows {
        stamps.push(table.parse_ts(*line, &fields[0])?);
        let flagged = match fields[4].as_str() {
            "true" => true,
            "false" => false,
            other => {
                return Err(Error::parse(&path, *line, format!("bad boolean {other:?}")));
            }
        };
        aggs.push(HourlyRegAggregate {
            regd_up: table.parse_f64(*line, &fields[1])?,
            regd_down: table.parse_f64(*line, &fields[2])?,
            beta: table.parse_f64(*line, &fields[3])?,
            beta_flagged: flagged,
            mileage_rega: table.parse_f64(*line, &fields[5])?,
            mileage_regd: table.parse_f64(*line, &fields[6])?,
        });
    }
    let start = check_hourly_contiguous("reg_hourly", &stamps)?;
    if start != prices.start {
        return Err(Error::Gap("reg_hourly and reg_prices start at different hours".into()));
    }
    MarketDataset::build(registry, lmp, prices, Some(aggs))
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Per-node congestion volatility, optionally stepping to new levels on
/// given days (regime shifts).
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct VolatilityProfile {
    /// Base sigma per node; shorter vectors broadcast cyclically.
    pub base: Vec<f64>,
    pub shifts: Vec<SigmaShift>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SigmaShift {
    pub node: usize,
    pub from_day: u32,
    pub sigma: f64,
}

impl VolatilityProfile {
    pub fn uniform(sigma: f64) -> Self {
        VolatilityProfile { base: vec![sigma], shifts: Vec::new() }
    }

    pub fn per_node(base: Vec<f64>) -> Self {
        VolatilityProfile { base, shifts: Vec::new() }
    }

    pub fn with_shift(mut self, node: usize, from_day: u32, sigma: f64) -> Self {
        self.shifts.push(SigmaShift { node, from_day, sigma });
        self
    }

    pub fn sigma_for(&self, node: usize, day: u32) -> f64 {
        let mut sigma = if self.base.is_empty() { 1.0 } else { self.base[node % self.base.len()] };
        for shift in &self.shifts {
            if shift.node == node && shift.from_day <= day {
                sigma = shift.sigma;
            }
        }
        sigma
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub node_count: usize,
    pub days: u32,
    pub start: NaiveDate,
    pub profile: VolatilityProfile,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 1,
            node_count: 10,
            days: 90,
            start: NaiveDate::from_ymd_opt(2018, 1, 1).unwrap(),
            profile: VolatilityProfile::uniform(8.0),
        }
    }
}

/// Deterministically generates a coherent dataset: nodal prices as a system
/// price plus node congestion noise, regulation prices, and 2-second
/// RegD/RegA signals aggregated hourly. Same seed, same dataset.
pub fn generate_synthetic_dataset(cfg: &SynthConfig) -> Result<MarketDataset> {
    if cfg.node_count == 0 || cfg.days == 0 {
        return Err(Error::invalid("synthetic dataset needs at least one node and one day"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let hours = cfg.days as usize * 24;
    let start = cfg.start.and_hms_opt(0, 0, 0).unwrap().and_utc();

    let mut records = Vec::with_capacity(cfg.node_count);
    for i in 0..cfg.node_count {
        records.push(NodeRecord {
            node_id: format!("N{i:03}"),
            display_name: format!("Synthetic node {i}"),
            latitude: rng.random_range(36.0..42.0),
            longitude: rng.random_range(-90.0..-74.0),
            zone: format!("Z{}", i % 4 + 1),
        });
    }
    let registry = Registry::new(records)?;

    let sys_noise = Normal::new(0.0, 2.0).unwrap();
    let mut system = Vec::with_capacity(hours);
    for t in 0..hours {
        let hour_of_day = (t % 24) as f64;
        let diurnal = 12.0 * (std::f64::consts::TAU * (hour_of_day - 12.0) / 24.0).sin();
        system.push(30.0 + diurnal + sys_noise.sample(&mut rng));
    }

    let mut lmp_series = Vec::with_capacity(cfg.node_count);
    for i in 0..cfg.node_count {
        let node_id = format!("N{i:03}");
        let mut values = Vec::with_capacity(hours);
        for (t, sys) in system.iter().enumerate() {
            let sigma = cfg.profile.sigma_for(i, (t / 24) as u32).max(1e-9);
            let congestion = Normal::new(0.0, sigma).unwrap().sample(&mut rng);
            values.push(sys + congestion);
        }
        lmp_series.push(HourlyLmpSeries { node_id, start, values });
    }

    let rmccp_noise: Normal<f64> = Normal::new(12.0, 4.0).unwrap();
    let rmpcp_noise: Normal<f64> = Normal::new(6.0, 2.0).unwrap();
    let mut prices = RegulationPriceSeries {
        start,
        rmccp: Vec::with_capacity(hours),
        rmpcp: Vec::with_capacity(hours),
        mileage_rega: vec![0.0; hours],
        mileage_regd: vec![0.0; hours],
    };
    for _ in 0..hours {
        prices.rmccp.push(rmccp_noise.sample(&mut rng).max(0.0));
        prices.rmpcp.push(rmpcp_noise.sample(&mut rng).max(0.0));
    }

    // Fast and slow signals as clipped AR(1) processes, generated hour by
    // hour so long windows never hold a full 2-second trace in memory.
    let unit = Normal::new(0.0, 1.0).unwrap();
    let mut aggs = Vec::with_capacity(hours);
    let (mut d_state, mut a_state) = (0.0f64, 0.0f64);
    let mut regd_hour = vec![0.0; SIGNAL_SAMPLES_PER_HOUR];
    let mut rega_hour = vec![0.0; SIGNAL_SAMPLES_PER_HOUR];
    for t in 0..hours {
        for k in 0..SIGNAL_SAMPLES_PER_HOUR {
            d_state = (0.85 * d_state + 0.4 * unit.sample(&mut rng)).clamp(-1.0, 1.0);
            a_state = (0.98 * a_state + 0.12 * unit.sample(&mut rng)).clamp(-1.0, 1.0);
            regd_hour[k] = d_state;
            rega_hour[k] = a_state;
        }
        let agg = aggregate_hour(&regd_hour, &rega_hour)?;
        prices.mileage_rega[t] = agg.mileage_rega;
        prices.mileage_regd[t] = agg.mileage_regd;
        aggs.push(agg);
    }

    MarketDataset::build(registry, lmp_series, prices, Some(aggs))
}
