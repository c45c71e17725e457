//! Stay-point scan and stay-region aggregation.

use serde::{Deserialize, Serialize};

use super::agglomerative::{groups, threshold_agglomerate, Linkage};
use crate::geo::{centroid, haversine, GeoPoint, LocalFrame, PlanarPoint};
use crate::ingest::{NightPings, NightWindow, Ping, Trace};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StayConfig {
    /// Maximum distance from the anchor ping, meters.
    pub dist_threshold_m: f64,
    /// Minimum dwell, seconds; a stay must exceed it.
    pub time_threshold_s: f64,
    /// Cut distance for grouping stay points into regions, meters.
    pub region_cut_m: f64,
    pub linkage: Linkage,
}

impl Default for StayConfig {
    fn default() -> Self {
        StayConfig {
            dist_threshold_m: 200.0,
            time_threshold_s: 1800.0,
            region_cut_m: 250.0,
            linkage: Linkage::Average,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StayPoint {
    pub centroid: GeoPoint,
    pub arrival: f64,
    pub departure: f64,
    pub ping_count: usize,
}

impl StayPoint {
    pub fn duration(&self) -> f64 {
        self.departure - self.arrival
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StayRegion {
    pub stay_points: Vec<StayPoint>,
    /// Duration-weighted centroid of the member stay points.
    pub centroid: GeoPoint,
    pub total_duration: f64,
    pub night_duration: f64,
    pub visit_count: usize,
}

/// Stay points of a sorted trace.
pub fn detect_stay_points(trace: &Trace, dist_threshold: f64, time_threshold: f64) -> Vec<StayPoint> {
    detect_stay_points_in(trace.pings(), dist_threshold, time_threshold)
}

/// Stay-point scan over a time-ordered ping slice.
///
/// From anchor `i`, the run extends while each next ping stays within
/// `dist_threshold` of the anchor. If the run's last ping `j` is more than
/// `time_threshold` after the anchor, pings `i..=j` become one stay point
/// (arrival `t_i`, departure `t_j`) and the scan resumes at `j + 1`;
/// otherwise it resumes at `i + 1`.
pub fn detect_stay_points_in(pings: &[Ping], dist_threshold: f64, time_threshold: f64) -> Vec<StayPoint> {
    let n = pings.len();
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        let anchor = pings[i].point;
        let mut j = i;
        while j + 1 < n && haversine(anchor, pings[j + 1].point) <= dist_threshold {
            j += 1;
        }
        if pings[j].timestamp - pings[i].timestamp > time_threshold {
            let pts: Vec<GeoPoint> = pings[i..=j].iter().map(|p| p.point).collect();
            out.push(StayPoint {
                centroid: centroid(&pts).expect("non-empty run"),
                arrival: pings[i].timestamp,
                departure: pings[j].timestamp,
                ping_count: j - i + 1,
            });
            i = j + 1;
        } else {
            i += 1;
        }
    }
    out
}

/// Groups stay points into regions by agglomerative clustering of their
/// centroids, aggregating dwell time overall and inside the night window.
/// Regions are ordered by their earliest stay point.
pub fn build_stay_regions(stay_points: &[StayPoint], night: &NightWindow, cfg: &StayConfig) -> Vec<StayRegion> {
    let Some(first) = stay_points.first() else {
        return Vec::new();
    };
    let frame = LocalFrame::new(first.centroid);
    let planar: Vec<PlanarPoint> = stay_points
        .iter()
        .map(|s| frame.project_unchecked(s.centroid))
        .collect();
    let labels = threshold_agglomerate(&planar, cfg.region_cut_m, cfg.linkage).expect("validated inputs");
    groups(&labels)
        .into_iter()
        .map(|members| {
            let total: f64 = members.iter().map(|&i| stay_points[i].duration()).sum();
            let night_duration: f64 = members
                .iter()
                .map(|&i| night.overlap_secs(stay_points[i].arrival, stay_points[i].departure))
                .sum();
            let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
            for &i in &members {
                let w = if total > 0.0 { stay_points[i].duration() } else { 1.0 };
                sx += planar[i].x * w;
                sy += planar[i].y * w;
                sw += w;
            }
            StayRegion {
                centroid: frame.unproject(PlanarPoint::new(sx / sw, sy / sw)),
                stay_points: members.iter().map(|&i| stay_points[i].clone()).collect(),
                total_duration: total,
                night_duration: night_duration.min(total),
                visit_count: members.len(),
            }
        })
        .collect()
}

/// Stay regions from night-only data: stay points are detected within each
/// night separately (so no stay bridges the daytime gap), then clustered.
pub fn night_stay_regions(nights: &NightPings, window: &NightWindow, cfg: &StayConfig) -> Vec<StayRegion> {
    let sps: Vec<StayPoint> = nights
        .nights
        .iter()
        .flat_map(|n| detect_stay_points_in(&n.pings, cfg.dist_threshold_m, cfg.time_threshold_s))
        .collect();
    build_stay_regions(&sps, window, cfg)
}
