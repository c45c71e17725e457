//! Trace parsing, kinematic filtering and night-window extraction.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{haversine, GeoPoint};

const SECONDS_PER_DAY: f64 = 86_400.0;

/// One GPS record.
#[derive(Debug, Clone, PartialEq)]
pub struct Ping {
    pub device_id: Arc<str>,
    pub point: GeoPoint,
    /// Seconds since the Unix epoch, UTC.
    pub timestamp: f64,
    pub error_radius: f64,
}

/// A single device's pings in non-decreasing timestamp order.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    device_id: Arc<str>,
    pings: Vec<Ping>,
}

impl Trace {
    /// Builds a trace, stably sorting pings by timestamp.
    pub fn new(device_id: impl Into<Arc<str>>, mut pings: Vec<Ping>) -> Self {
        let device_id = device_id.into();
        pings.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
        for p in &mut pings {
            if p.device_id != device_id {
                p.device_id = device_id.clone();
            }
        }
        Trace { device_id, pings }
    }

    /// Convenience constructor from `(lat, lon, timestamp)` triples with a
    /// fixed error radius.
    pub fn from_triples(device_id: &str, error_radius: f64, rows: &[(f64, f64, f64)]) -> Self {
        let id: Arc<str> = Arc::from(device_id);
        let pings = rows
            .iter()
            .map(|&(lat, lon, timestamp)| Ping {
                device_id: id.clone(),
                point: GeoPoint { lat, lon },
                timestamp,
                error_radius,
            })
            .collect();
        Trace::new(id, pings)
    }

    pub fn device_id(&self) -> &str {
        &self.device_id
    }

    pub fn device_arc(&self) -> &Arc<str> {
        &self.device_id
    }

    pub fn pings(&self) -> &[Ping] {
        &self.pings
    }

    pub fn len(&self) -> usize {
        self.pings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pings.is_empty()
    }

    pub fn points(&self) -> Vec<GeoPoint> {
        self.pings.iter().map(|p| p.point).collect()
    }
}

/// Per-ping speed (m/s) and acceleration (m/s²).
#[derive(Debug, Clone, PartialEq)]
pub struct Kinematics {
    pub speed: Vec<f64>,
    pub accel: Vec<f64>,
}

/// Speed and acceleration along the trace. The first ping has zero speed and
/// the first two have zero acceleration. A zero time gap yields zero speed and
/// acceleration for that ping rather than a division by zero.
pub fn compute_kinematics(trace: &Trace) -> Kinematics {
    let pings = trace.pings();
    let n = pings.len();
    let mut speed = vec![0.0; n];
    let mut accel = vec![0.0; n];
    for i in 1..n {
        let dt = pings[i].timestamp - pings[i - 1].timestamp;
        if dt <= 0.0 {
            continue;
        }
        speed[i] = haversine(pings[i].point, pings[i - 1].point) / dt;
        if i >= 2 {
            accel[i] = (speed[i] - speed[i - 1]) / dt;
        }
    }
    Kinematics { speed, accel }
}

/// Thresholds for [`filter_trace`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub max_error_radius_m: f64,
    pub max_speed_mps: f64,
    pub max_abs_accel_mps2: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            max_error_radius_m: 50.0,
            max_speed_mps: 50.0,
            max_abs_accel_mps2: 10.0,
        }
    }
}

/// Removes inaccurate and kinematically implausible pings.
///
/// Pings above the error radius go first, then repeated timestamps (first
/// kept). The remaining sequence is scanned once: each candidate's speed and
/// acceleration are taken against the last *surviving* ping, and a candidate
/// that violates either limit is dropped. Because every kept ping was
/// evaluated against its final predecessor, recomputing kinematics on the
/// output reproduces the accepted values, so the result is a fixed point.
pub fn filter_trace(trace: &Trace, cfg: &FilterConfig) -> Trace {
    let mut kept: Vec<Ping> = Vec::with_capacity(trace.len());
    // speed of the last kept ping, as seen from its own predecessor
    let mut last_speed = 0.0;
    for p in trace.pings() {
        if !(p.error_radius <= cfg.max_error_radius_m) {
            continue;
        }
        let Some(prev) = kept.last() else {
            kept.push(p.clone());
            last_speed = 0.0;
            continue;
        };
        let dt = p.timestamp - prev.timestamp;
        if dt <= 0.0 {
            continue;
        }
        let v = haversine(p.point, prev.point) / dt;
        let a = if kept.len() >= 2 { (v - last_speed) / dt } else { 0.0 };
        if v > cfg.max_speed_mps || a.abs() > cfg.max_abs_accel_mps2 {
            continue;
        }
        kept.push(p.clone());
        last_speed = v;
    }
    Trace {
        device_id: trace.device_id.clone(),
        pings: kept,
    }
}

/// Local-clock interval assumed to capture at-home time. May wrap midnight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NightWindow {
    start_minute: u32,
    end_minute: u32,
    utc_offset_minutes: i32,
}

impl Default for NightWindow {
    fn default() -> Self {
        NightWindow {
            start_minute: 20 * 60,
            end_minute: 5 * 60,
            utc_offset_minutes: 0,
        }
    }
}

impl NightWindow {
    /// `start`/`end` are minutes after local midnight, in `[0, 1440)`.
    pub fn new(start_minute: u32, end_minute: u32, utc_offset_minutes: i32) -> Result<Self> {
        if start_minute >= 1440 || end_minute >= 1440 {
            return Err(Error::arg("night window hours must lie in [0, 24)"));
        }
        if start_minute == end_minute {
            return Err(Error::arg("night window start and end coincide"));
        }
        if utc_offset_minutes.abs() > 14 * 60 {
            return Err(Error::arg("UTC offset must lie within ±14 h"));
        }
        Ok(NightWindow {
            start_minute,
            end_minute,
            utc_offset_minutes,
        })
    }

    pub fn from_hours(start_hour: u32, end_hour: u32, utc_offset_minutes: i32) -> Result<Self> {
        Self::new(start_hour * 60, end_hour * 60, utc_offset_minutes)
    }

    /// Parses `HH:MM-HH:MM`.
    pub fn parse(spec: &str, utc_offset_minutes: i32) -> Result<Self> {
        fn hm(s: &str) -> Option<u32> {
            let (h, m) = s.trim().split_once(':')?;
            let h: u32 = h.parse().ok()?;
            let m: u32 = m.parse().ok()?;
            (h < 24 && m < 60).then_some(h * 60 + m)
        }
        let (a, b) = spec
            .split_once('-')
            .ok_or_else(|| Error::arg(format!("night window `{spec}` is not HH:MM-HH:MM")))?;
        match (hm(a), hm(b)) {
            (Some(s), Some(e)) => Self::new(s, e, utc_offset_minutes),
            _ => Err(Error::arg(format!("night window `{spec}` is not HH:MM-HH:MM"))),
        }
    }

    pub fn start_minute(&self) -> u32 {
        self.start_minute
    }

    pub fn end_minute(&self) -> u32 {
        self.end_minute
    }

    pub fn utc_offset_minutes(&self) -> i32 {
        self.utc_offset_minutes
    }

    pub fn with_offset(self, utc_offset_minutes: i32) -> Result<Self> {
        Self::new(self.start_minute, self.end_minute, utc_offset_minutes)
    }

    pub fn wraps_midnight(&self) -> bool {
        self.start_minute > self.end_minute
    }

    /// Window length in seconds.
    pub fn duration_secs(&self) -> f64 {
        let mins = if self.wraps_midnight() {
            1440 - self.start_minute + self.end_minute
        } else {
            self.end_minute - self.start_minute
        };
        mins as f64 * 60.0
    }

    fn offset_secs(&self) -> f64 {
        self.utc_offset_minutes as f64 * 60.0
    }

    /// Night id (local date of the window start, in days since the epoch) of
    /// the night containing `timestamp`, or `None` outside the window.
    pub fn night_of(&self, timestamp: f64) -> Option<i64> {
        let local = timestamp + self.offset_secs();
        let day = (local / SECONDS_PER_DAY).floor();
        let minute = (local - day * SECONDS_PER_DAY) / 60.0;
        let start = self.start_minute as f64;
        let end = self.end_minute as f64;
        let day = day as i64;
        if self.wraps_midnight() {
            if minute >= start {
                Some(day)
            } else if minute < end {
                Some(day - 1)
            } else {
                None
            }
        } else {
            (minute >= start && minute < end).then_some(day)
        }
    }

    /// UTC bounds `[start, end)` of the given night.
    pub fn night_bounds(&self, night_id: i64) -> (f64, f64) {
        let start = night_id as f64 * SECONDS_PER_DAY + self.start_minute as f64 * 60.0
            - self.offset_secs();
        (start, start + self.duration_secs())
    }

    /// Seconds of `[from, to]` that fall inside any night.
    pub fn overlap_secs(&self, from: f64, to: f64) -> f64 {
        if !(to > from) {
            return 0.0;
        }
        let first = ((from + self.offset_secs()) / SECONDS_PER_DAY).floor() as i64 - 1;
        let last = ((to + self.offset_secs()) / SECONDS_PER_DAY).floor() as i64;
        (first..=last)
            .map(|night| {
                let (s, e) = self.night_bounds(night);
                (to.min(e) - from.max(s)).max(0.0)
            })
            .sum()
    }
}

/// The pings of one night.
#[derive(Debug, Clone, PartialEq)]
pub struct Night {
    pub id: i64,
    pub pings: Vec<Ping>,
}

/// A trace's night-window pings partitioned by night, ordered by night id.
#[derive(Debug, Clone, PartialEq)]
pub struct NightPings {
    pub device_id: Arc<str>,
    pub nights: Vec<Night>,
}

impl NightPings {
    pub fn ping_count(&self) -> usize {
        self.nights.iter().map(|n| n.pings.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.nights.iter().all(|n| n.pings.is_empty())
    }

    pub fn pings(&self) -> impl Iterator<Item = &Ping> {
        self.nights.iter().flat_map(|n| n.pings.iter())
    }

    pub fn points(&self) -> Vec<GeoPoint> {
        self.pings().map(|p| p.point).collect()
    }

    /// Flattened pings as a trace.
    pub fn to_trace(&self) -> Trace {
        Trace {
            device_id: self.device_id.clone(),
            pings: self.pings().cloned().collect(),
        }
    }
}

/// Pings of `trace` whose local time falls inside `window`, grouped by night.
pub fn night_pings(trace: &Trace, window: &NightWindow) -> NightPings {
    let mut by_night: BTreeMap<i64, Vec<Ping>> = BTreeMap::new();
    for p in trace.pings() {
        if let Some(id) = window.night_of(p.timestamp) {
            by_night.entry(id).or_default().push(p.clone());
        }
    }
    NightPings {
        device_id: trace.device_id.clone(),
        nights: by_night
            .into_iter()
            .map(|(id, pings)| Night { id, pings })
            .collect(),
    }
}

/// Delimited-text options for [`parse_traces`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CsvFormat {
    pub delimiter: u8,
    /// `None` detects a header from the first row.
    pub has_header: Option<bool>,
}

impl Default for CsvFormat {
    fn default() -> Self {
        CsvFormat {
            delimiter: b',',
            has_header: None,
        }
    }
}

/// Traces grouped by device plus row accounting.
#[derive(Debug, Clone, Default)]
pub struct ParsedTraces {
    pub traces: BTreeMap<String, Trace>,
    pub rows: usize,
    pub malformed_rows: usize,
}

impl ParsedTraces {
    pub fn ping_count(&self) -> usize {
        self.traces.values().map(Trace::len).sum()
    }
}

fn parse_row(rec: &csv::StringRecord) -> Option<(String, GeoPoint, f64, f64)> {
    if rec.len() != 5 {
        return None;
    }
    let device = rec.get(0)?.trim();
    if device.is_empty() {
        return None;
    }
    let lon: f64 = rec.get(1)?.trim().parse().ok()?;
    let lat: f64 = rec.get(2)?.trim().parse().ok()?;
    let ts: f64 = rec.get(3)?.trim().parse().ok()?;
    let err: f64 = rec.get(4)?.trim().parse().ok()?;
    let point = GeoPoint::new(lat, lon).ok()?;
    if !ts.is_finite() || !(err >= 0.0) || !err.is_finite() {
        return None;
    }
    Some((device.to_string(), point, ts, err))
}

/// Reads a five-column trace table: device id, longitude, latitude,
/// timestamp (s), error radius (m).
pub fn parse_traces(path: &Path, format: &CsvFormat) -> Result<ParsedTraces> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_traces_from_reader(file, format)
}

pub fn parse_traces_from_reader<R: Read>(reader: R, format: &CsvFormat) -> Result<ParsedTraces> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .delimiter(format.delimiter)
        .from_reader(reader);

    let mut grouped: BTreeMap<String, (Arc<str>, Vec<Ping>)> = BTreeMap::new();
    let mut rows = 0usize;
    let mut malformed = 0usize;
    let mut record = csv::StringRecord::new();
    let mut first = true;
    loop {
        let more = match rdr.read_record(&mut record) {
            Ok(more) => more,
            Err(e) if e.is_io_error() => return Err(e.into()),
            Err(_) => {
                rows += 1;
                malformed += 1;
                first = false;
                continue;
            }
        };
        if !more {
            break;
        }
        let is_first = std::mem::replace(&mut first, false);
        if record.iter().all(|f| f.trim().is_empty()) {
            continue;
        }
        let parsed = parse_row(&record);
        if is_first {
            let header = match format.has_header {
                Some(h) => h,
                None => parsed.is_none() && record.get(1).is_some_and(|f| f.trim().parse::<f64>().is_err()),
            };
            if header {
                continue;
            }
        }
        rows += 1;
        match parsed {
            Some((device, point, timestamp, error_radius)) => {
                let entry = grouped
                    .entry(device)
                    .or_insert_with_key(|k| (Arc::from(k.as_str()), Vec::new()));
                entry.1.push(Ping {
                    device_id: entry.0.clone(),
                    point,
                    timestamp,
                    error_radius,
                });
            }
            None => malformed += 1,
        }
    }
    if rows > 0 && malformed * 2 > rows {
        return Err(Error::Format(format!(
            "{malformed} of {rows} rows are malformed"
        )));
    }
    let traces = grouped
        .into_iter()
        .map(|(k, (id, pings))| (k, Trace::new(id, pings)))
        .collect();
    Ok(ParsedTraces {
        traces,
        rows,
        malformed_rows: malformed,
    })
}
