//! The five home-detection algorithms and the common-user harness.
//!
//! * A1 takes the centroid (or medoid) of all night pings.
//! * A2 picks the 20 m grid cell with the most night pings.
//! * A3 runs mean shift over all night pings and takes the largest cluster.
//! * A4 first averages night pings into 30-minute bins, then runs A3's
//!   clustering over the bin centroids, so every time slot weighs the same.
//! * A5 detects stay points on the full trace, groups them into regions and
//!   picks the region with the most night dwell among those passing the
//!   dwell thresholds.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{
    build_stay_regions, detect_stay_points, largest_cluster, mean_shift, MeanShiftConfig, StayConfig,
};
use crate::error::{Error, Result};
use crate::geo::{centroid, medoid, planar_mean, GeoPoint, LocalFrame, PlanarPoint};
use crate::ingest::{night_pings, NightPings, NightWindow, Trace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    A1,
    A2,
    A3,
    A4,
    A5,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [Algorithm::A1, Algorithm::A2, Algorithm::A3, Algorithm::A4, Algorithm::A5];

    pub fn as_str(&self) -> &'static str {
        match self {
            Algorithm::A1 => "a1",
            Algorithm::A2 => "a2",
            Algorithm::A3 => "a3",
            Algorithm::A4 => "a4",
            Algorithm::A5 => "a5",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::arg(format!("unknown algorithm `{s}`")))
    }
}

/// A detected home.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomeLocation {
    pub device_id: String,
    pub point: GeoPoint,
    pub algorithm: Algorithm,
    /// Pings, bins or dwell seconds behind the choice, depending on the algorithm.
    pub support: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CentralPoint {
    #[default]
    Centroid,
    Medoid,
}

/// How A5 ranks qualifying stay regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StayRegionRank {
    #[default]
    NightDwell,
    VisitCount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HdaConfig {
    pub mean_shift: MeanShiftConfig,
    pub grid_cell_m: f64,
    pub bin_period_s: f64,
    pub stay: StayConfig,
    pub a5_min_night_dwell_s: f64,
    pub a5_min_total_dwell_s: f64,
    pub a5_rank: StayRegionRank,
    pub a1_point: CentralPoint,
    pub night: NightWindow,
}

impl Default for HdaConfig {
    fn default() -> Self {
        HdaConfig {
            mean_shift: MeanShiftConfig::default(),
            grid_cell_m: 20.0,
            bin_period_s: 1800.0,
            stay: StayConfig::default(),
            a5_min_night_dwell_s: 3.0 * 3600.0,
            a5_min_total_dwell_s: 24.0 * 3600.0,
            a5_rank: StayRegionRank::NightDwell,
            a1_point: CentralPoint::Centroid,
            night: NightWindow::default(),
        }
    }
}

impl HdaConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("bandwidth", self.mean_shift.bandwidth),
            ("mean-shift tolerance", self.mean_shift.tolerance),
            ("grid cell", self.grid_cell_m),
            ("bin period", self.bin_period_s),
            ("stay distance", self.stay.dist_threshold_m),
            ("stay time", self.stay.time_threshold_s),
            ("region cut", self.stay.region_cut_m),
            ("A5 night dwell", self.a5_min_night_dwell_s),
            ("A5 total dwell", self.a5_min_total_dwell_s),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::arg(format!("{name} must be positive, got {v}")));
            }
        }
        if self.mean_shift.max_iterations == 0 {
            return Err(Error::arg("mean-shift iteration cap must be positive"));
        }
        Ok(())
    }
}

/// The fixed square grid A2 bins into, anchored at the dataset's
/// south-west bounding-box corner so all users share the same cells.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    frame: LocalFrame,
    cell_m: f64,
}

impl GridSpec {
    pub fn new(south_west: GeoPoint, cell_m: f64) -> Self {
        GridSpec {
            frame: LocalFrame::with_domain(south_west, f64::INFINITY),
            cell_m,
        }
    }

    /// Grid anchored at the bounding box of every ping in `traces`.
    pub fn covering<'a>(traces: impl IntoIterator<Item = &'a Trace>, cell_m: f64) -> Option<Self> {
        let mut sw: Option<GeoPoint> = None;
        for p in traces.into_iter().flat_map(|t| t.pings()) {
            sw = Some(match sw {
                None => p.point,
                Some(c) => GeoPoint {
                    lat: c.lat.min(p.point.lat),
                    lon: c.lon.min(p.point.lon),
                },
            });
        }
        sw.map(|c| GridSpec::new(c, cell_m))
    }

    pub fn cell_of(&self, p: GeoPoint) -> (i64, i64) {
        let q = self.frame.project_unchecked(p);
        ((q.y / self.cell_m).floor() as i64, (q.x / self.cell_m).floor() as i64)
    }
}

/// One user's prepared data: the filtered trace, its night pings, and the
/// planar frame anchored at the first filtered ping.
#[derive(Debug, Clone)]
pub struct UserInput {
    pub trace: Trace,
    pub nights: NightPings,
    pub frame: LocalFrame,
}

impl UserInput {
    /// `None` when the trace is empty.
    pub fn new(trace: Trace, window: &NightWindow) -> Option<Self> {
        let origin = trace.pings().first()?.point;
        let nights = night_pings(&trace, window);
        Some(UserInput {
            frame: LocalFrame::new(origin),
            trace,
            nights,
        })
    }

    pub fn device_id(&self) -> &str {
        self.trace.device_id()
    }

    fn home(&self, algorithm: Algorithm, point: GeoPoint, support: f64) -> HomeLocation {
        HomeLocation {
            device_id: self.device_id().to_string(),
            point,
            algorithm,
            support,
        }
    }
}

pub fn a1_centroid(user: &UserInput, cfg: &HdaConfig) -> Option<HomeLocation> {
    let pts = user.nights.points();
    let point = match cfg.a1_point {
        CentralPoint::Centroid => centroid(&pts).ok()?,
        CentralPoint::Medoid => medoid(&pts).ok()?,
    };
    Some(user.home(Algorithm::A1, point, pts.len() as f64))
}

pub fn a2_grid_frequency(user: &UserInput, grid: &GridSpec) -> Option<HomeLocation> {
    #[derive(Default)]
    struct Cell {
        members: Vec<PlanarPoint>,
        nights: BTreeSet<i64>,
    }
    let mut cells: BTreeMap<(i64, i64), Cell> = BTreeMap::new();
    for night in &user.nights.nights {
        for p in &night.pings {
            let cell = cells.entry(grid.cell_of(p.point)).or_default();
            cell.members.push(grid.frame.project_unchecked(p.point));
            cell.nights.insert(night.id);
        }
    }
    // BTreeMap order is ascending (row, col), so strict comparison keeps the lowest on ties
    let mut best: Option<&Cell> = None;
    for cell in cells.values() {
        let better = best.is_none_or(|b| {
            (cell.members.len(), cell.nights.len()) > (b.members.len(), b.nights.len())
        });
        if better {
            best = Some(cell);
        }
    }
    let best = best?;
    let point = grid.frame.unproject(planar_mean(&best.members));
    Some(user.home(Algorithm::A2, point, best.members.len() as f64))
}

pub fn a3_alltime_meanshift(user: &UserInput, cfg: &HdaConfig) -> Option<HomeLocation> {
    let pts: Vec<PlanarPoint> = user
        .nights
        .pings()
        .map(|p| user.frame.project_unchecked(p.point))
        .collect();
    let clusters = mean_shift(&pts, &cfg.mean_shift).ok()?;
    let best = largest_cluster(&clusters)?;
    Some(user.home(Algorithm::A3, user.frame.unproject(best.mode), best.size as f64))
}

/// Per-bin centroids of a user's night pings, bins aligned to each night's
/// window start. Empty bins are skipped.
pub fn night_bin_centroids(user: &UserInput, window: &NightWindow, bin_period_s: f64) -> Vec<PlanarPoint> {
    let mut out = Vec::new();
    for night in &user.nights.nights {
        let (start, _) = window.night_bounds(night.id);
        let mut bins: BTreeMap<i64, Vec<PlanarPoint>> = BTreeMap::new();
        for p in &night.pings {
            let bin = ((p.timestamp - start) / bin_period_s).floor() as i64;
            bins.entry(bin).or_default().push(user.frame.project_unchecked(p.point));
        }
        out.extend(bins.values().map(planar_mean));
    }
    out
}

pub fn a4_binned_meanshift(user: &UserInput, cfg: &HdaConfig) -> Option<HomeLocation> {
    let bins = night_bin_centroids(user, &cfg.night, cfg.bin_period_s);
    let clusters = mean_shift(&bins, &cfg.mean_shift).ok()?;
    let best = largest_cluster(&clusters)?;
    Some(user.home(Algorithm::A4, user.frame.unproject(best.mode), best.size as f64))
}

pub fn a5_staypoint(user: &UserInput, cfg: &HdaConfig) -> Option<HomeLocation> {
    let sps = detect_stay_points(&user.trace, cfg.stay.dist_threshold_m, cfg.stay.time_threshold_s);
    let regions = build_stay_regions(&sps, &cfg.night, &cfg.stay);
    let mut best: Option<&crate::clustering::StayRegion> = None;
    for r in regions
        .iter()
        .filter(|r| r.night_duration >= cfg.a5_min_night_dwell_s || r.total_duration >= cfg.a5_min_total_dwell_s)
    {
        let better = best.is_none_or(|b| match cfg.a5_rank {
            StayRegionRank::NightDwell => r.night_duration > b.night_duration,
            StayRegionRank::VisitCount => {
                (r.visit_count, r.night_duration) > (b.visit_count, b.night_duration)
            }
        });
        if better {
            best = Some(r);
        }
    }
    let best = best?;
    let support = match cfg.a5_rank {
        StayRegionRank::VisitCount => best.visit_count as f64,
        StayRegionRank::NightDwell if best.night_duration > 0.0 => best.night_duration,
        StayRegionRank::NightDwell => best.total_duration,
    };
    Some(user.home(Algorithm::A5, best.centroid, support))
}

/// Runs one algorithm for one user.
pub fn detect(algorithm: Algorithm, user: &UserInput, cfg: &HdaConfig, grid: &GridSpec) -> Option<HomeLocation> {
    match algorithm {
        Algorithm::A1 => a1_centroid(user, cfg),
        Algorithm::A2 => a2_grid_frequency(user, grid),
        Algorithm::A3 => a3_alltime_meanshift(user, cfg),
        Algorithm::A4 => a4_binned_meanshift(user, cfg),
        Algorithm::A5 => a5_staypoint(user, cfg),
    }
}

/// Output of [`run_all`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DetectionRun {
    /// Per-algorithm homes sorted by device id.
    pub tables: BTreeMap<Algorithm, Vec<HomeLocation>>,
    /// Users with a home from every requested algorithm, sorted.
    pub common_users: Vec<String>,
    pub no_home: BTreeMap<Algorithm, usize>,
    pub users: usize,
}

impl DetectionRun {
    /// Homes of `algorithm` restricted to the common user set.
    pub fn common_table(&self, algorithm: Algorithm) -> Vec<HomeLocation> {
        let common: BTreeSet<&str> = self.common_users.iter().map(String::as_str).collect();
        self.tables
            .get(&algorithm)
            .map(|t| t.iter().filter(|h| common.contains(h.device_id.as_str())).cloned().collect())
            .unwrap_or_default()
    }
}

/// Runs the requested algorithms over every (already filtered) trace.
/// Work is spread over the current rayon pool; results do not depend on
/// the number of threads.
pub fn run_all(traces: &BTreeMap<String, Trace>, cfg: &HdaConfig, algorithms: &[Algorithm]) -> Result<DetectionRun> {
    cfg.validate()?;
    let mut algorithms: Vec<Algorithm> = algorithms.to_vec();
    algorithms.sort();
    algorithms.dedup();

    let grid = GridSpec::covering(traces.values(), cfg.grid_cell_m);
    let per_user: Vec<Vec<Option<HomeLocation>>> = traces
        .par_iter()
        .map(|(_, trace)| {
            let user = UserInput::new(trace.clone(), &cfg.night);
            algorithms
                .iter()
                .map(|&a| match (&user, &grid) {
                    (Some(u), Some(g)) => detect(a, u, cfg, g),
                    _ => None,
                })
                .collect()
        })
        .collect();

    let mut run = DetectionRun {
        users: traces.len(),
        ..Default::default()
    };
    for &a in &algorithms {
        run.tables.insert(a, Vec::new());
        run.no_home.insert(a, 0);
    }
    for (device, homes) in traces.keys().zip(per_user) {
        let mut all = !algorithms.is_empty();
        for (&a, home) in algorithms.iter().zip(homes) {
            match home {
                Some(h) => run.tables.get_mut(&a).unwrap().push(h),
                None => {
                    *run.no_home.get_mut(&a).unwrap() += 1;
                    all = false;
                }
            }
        }
        if all {
            run.common_users.push(device.clone());
        }
    }
    if run.common_users.is_empty() && run.users > 0 {
        log::warn!("no user received a home from every algorithm");
    }
    Ok(run)
}

/// Writes `device_id,algorithm,lat,lon,support` rows.
pub fn write_homes_csv<W: Write>(w: W, homes: &[HomeLocation]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["device_id", "algorithm", "lat", "lon", "support"])?;
    for h in homes {
        wtr.write_record([
            h.device_id.clone(),
            h.algorithm.to_string(),
            h.point.lat.to_string(),
            h.point.lon.to_string(),
            h.support.to_string(),
        ])?;
    }
    wtr.flush().map_err(|e| Error::Format(format!("writing homes: {e}")))?;
    Ok(())
}

/// Reads a table written by [`write_homes_csv`]. Every row must parse.
pub fn read_homes_csv<R: Read>(r: R) -> Result<Vec<HomeLocation>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = || Error::Format(format!("home table row {}: expected device_id,algorithm,lat,lon,support", line + 2));
        if rec.len() != 5 {
            return Err(bad());
        }
        let num = |i: usize| rec[i].trim().parse::<f64>().map_err(|_| bad());
        let point = GeoPoint::new(num(2)?, num(3)?).map_err(|_| bad())?;
        out.push(HomeLocation {
            device_id: rec[0].trim().to_string(),
            algorithm: rec[1].parse().map_err(|_| bad())?,
            point,
            support: num(4)?,
        });
    }
    Ok(out)
}
