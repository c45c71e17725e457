//! Ground-truth-free quality metrics for detected homes.
//!
//! * M1, residential detection rate: buffer-weighted share of homes within
//!   `r` meters of residential land use.
//! * M2, proximity: normalized area under the CDF of each user's median
//!   nightly distance from home to their closest night ping.
//! * M3, home stay: normalized area under the CDF of the share of stay
//!   time spent outside the stay region nearest the home.
//!
//! All three lie in `[0, 1]` and higher is better.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{night_stay_regions, StayConfig, StayRegion};
use crate::error::{Error, Result};
use crate::geo::{haversine, GeoPoint};
use crate::hda::{Algorithm, HomeLocation};
use crate::ingest::{night_pings, NightPings, NightWindow, Trace};
use crate::spatial::LandUseMap;

/// Slack when comparing a computed distance against a buffer width.
const BUFFER_EPS_M: f64 = 1e-6;

/// Linearly decreasing buffer weights `w(r) ∝ r_max − r` over
/// `r = 0, step, …, r_max`, kept as exact integer ratios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BufferWeights {
    r_max_m: u32,
    step_m: u32,
}

impl Default for BufferWeights {
    fn default() -> Self {
        BufferWeights { r_max_m: 50, step_m: 5 }
    }
}

impl BufferWeights {
    pub fn new(r_max_m: u32, step_m: u32) -> Result<Self> {
        if r_max_m == 0 || step_m == 0 || !r_max_m.is_multiple_of(step_m) {
            return Err(Error::arg(format!(
                "buffer r_max ({r_max_m} m) must be a positive multiple of the step ({step_m} m)"
            )));
        }
        Ok(BufferWeights { r_max_m, step_m })
    }

    pub fn r_max_m(&self) -> u32 {
        self.r_max_m
    }

    pub fn step_m(&self) -> u32 {
        self.step_m
    }

    pub fn radii(&self) -> Vec<u32> {
        (0..=self.r_max_m).step_by(self.step_m as usize).collect()
    }

    /// Weight numerators `r_max − r`.
    pub fn numerators(&self) -> Vec<u64> {
        self.radii().iter().map(|r| (self.r_max_m - r) as u64).collect()
    }

    /// Common denominator: the sum of the numerators.
    pub fn denominator(&self) -> u64 {
        self.numerators().iter().sum()
    }

    pub fn weights(&self) -> Vec<f64> {
        let den = self.denominator() as f64;
        self.numerators().iter().map(|&n| n as f64 / den).collect()
    }
}

/// Normalized area under the empirical CDF of `values` over `[0, upper]`:
/// `(1/upper) ∫₀^upper F(v) dv`, integrated exactly over the step function.
pub fn cdf_auc(values: &[f64], upper: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::arg("CDF area of an empty sample"));
    }
    if !(upper > 0.0) || !upper.is_finite() {
        return Err(Error::arg("CDF upper limit must be positive"));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::arg("CDF sample contains NaN"));
    }
    let mut sorted: Vec<f64> = values.iter().map(|v| v.clamp(0.0, upper)).collect();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    // F is k/n on [v_(k), v_(k+1)); the last step runs to `upper`
    let mut area = 0.0;
    for (k, w) in sorted.windows(2).enumerate() {
        area += (k + 1) as f64 / n * (w[1] - w[0]);
    }
    area += upper - sorted[sorted.len() - 1];
    Ok(area / upper)
}

/// Median with the even-count midpoint convention.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Sample quantiles (nearest-rank, lower) for plotting CDF curves.
pub fn quantiles(values: &[f64], probs: &[f64]) -> Vec<(f64, f64)> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    probs
        .iter()
        .filter_map(|&q| {
            let last = v.len().checked_sub(1)?;
            let idx = ((q.clamp(0.0, 1.0) * last as f64).floor() as usize).min(last);
            Some((q, v[idx]))
        })
        .collect()
}

pub const CDF_PROBS: [f64; 11] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct M1Result {
    pub value: f64,
    /// `(r, ρ(r))` for every buffer width.
    pub rho: Vec<(u32, f64)>,
    /// Smallest buffer width at which each home is residential.
    pub in_residential_at: Vec<Option<u32>>,
}

/// Residential detection rate.
pub fn m1_residential(homes: &[GeoPoint], land_use: &LandUseMap, weights: &BufferWeights) -> Result<M1Result> {
    if homes.is_empty() {
        return Err(Error::Metric("M1 needs at least one home".into()));
    }
    if !land_use.has_residential() {
        return Err(Error::Metric("land-use map has no residential polygons".into()));
    }
    let radii = weights.radii();
    let r_max = weights.r_max_m() as f64;
    let in_residential_at: Vec<Option<u32>> = homes
        .iter()
        .map(|&h| {
            let d = land_use.residential_distance(h, r_max + BUFFER_EPS_M)?;
            radii.iter().copied().find(|&r| d <= r as f64 + BUFFER_EPS_M)
        })
        .collect();
    let n = homes.len() as f64;
    let rho: Vec<(u32, f64)> = radii
        .iter()
        .map(|&r| {
            let inside = in_residential_at.iter().filter(|x| matches!(x, Some(at) if *at <= r)).count();
            (r, inside as f64 / n)
        })
        .collect();
    let value = rho.iter().zip(weights.weights()).map(|((_, p), w)| w * p).sum();
    Ok(M1Result {
        value,
        rho,
        in_residential_at,
    })
}

/// Median over nights of the closest night ping's distance to `home`;
/// `None` for a user without night pings.
pub fn proximity_delta(home: GeoPoint, nights: &NightPings) -> Option<f64> {
    let minima: Vec<f64> = nights
        .nights
        .iter()
        .filter(|n| !n.pings.is_empty())
        .map(|n| n.pings.iter().map(|p| haversine(home, p.point)).fold(f64::INFINITY, f64::min))
        .collect();
    median(&minima)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct M2Result {
    pub value: f64,
    /// Per-user δ for users that were not excluded, input order.
    pub deltas: Vec<f64>,
    pub excluded: usize,
}

/// Proximity metric over `(home, night pings)` pairs.
pub fn m2_proximity(samples: &[(GeoPoint, &NightPings)], delta_max_m: f64) -> Result<M2Result> {
    let mut deltas = Vec::with_capacity(samples.len());
    let mut excluded = 0;
    for (home, nights) in samples {
        match proximity_delta(*home, nights) {
            Some(d) => deltas.push(d),
            None => excluded += 1,
        }
    }
    if deltas.is_empty() {
        return Err(Error::Metric("M2: no user has night pings".into()));
    }
    Ok(M2Result {
        value: cdf_auc(&deltas, delta_max_m)?,
        deltas,
        excluded,
    })
}

/// What the home region's dwell is divided by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StayShare {
    /// Sum of dwell over all regions.
    #[default]
    Sum,
    /// Dwell of the longest region.
    Max,
}

/// Share of stay time outside the region nearest `home`; `None` without
/// regions or dwell.
pub fn outside_home_fraction(home: GeoPoint, regions: &[StayRegion], share: StayShare) -> Option<f64> {
    let mut nearest: Option<(f64, &StayRegion)> = None;
    for r in regions {
        let d = haversine(home, r.centroid);
        if nearest.is_none_or(|(b, _)| d < b) {
            nearest = Some((d, r));
        }
    }
    let (_, home_region) = nearest?;
    let denom = match share {
        StayShare::Sum => regions.iter().map(|r| r.total_duration).sum::<f64>(),
        StayShare::Max => regions.iter().map(|r| r.total_duration).fold(0.0, f64::max),
    };
    if !(denom > 0.0) {
        return None;
    }
    Some((1.0 - home_region.total_duration / denom).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct M3Result {
    pub value: f64,
    pub outside_fractions: Vec<f64>,
    pub excluded: usize,
}

/// Home-stay metric over `(home, stay regions)` pairs.
pub fn m3_home_stay(samples: &[(GeoPoint, &[StayRegion])], share: StayShare) -> Result<M3Result> {
    let mut fractions = Vec::with_capacity(samples.len());
    let mut excluded = 0;
    for (home, regions) in samples {
        match outside_home_fraction(*home, regions, share) {
            Some(f) => fractions.push(f),
            None => excluded += 1,
        }
    }
    if fractions.is_empty() {
        return Err(Error::Metric("M3: no user has stay regions".into()));
    }
    Ok(M3Result {
        value: cdf_auc(&fractions, 1.0)?,
        outside_fractions: fractions,
        excluded,
    })
}

pub fn mean_metric(m1: f64, m2: f64, m3: f64) -> f64 {
    (m1 + m2 + m3) / 3.0
}

/// M1 of points drawn uniformly over the land-use extent.
pub fn uniform_random_baseline(land_use: &LandUseMap, weights: &BufferWeights, sample_size: usize, seed: u64) -> Result<f64> {
    if sample_size == 0 {
        return Err(Error::arg("baseline sample size must be positive"));
    }
    let ext = land_use
        .index()
        .extent()
        .ok_or_else(|| Error::arg("land-use map is empty"))?;
    if !(ext[2] > ext[0] && ext[3] > ext[1]) {
        return Err(Error::arg("land-use extent is degenerate"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<GeoPoint> = (0..sample_size)
        .map(|_| GeoPoint {
            lon: rng.gen_range(ext[0]..ext[2]),
            lat: rng.gen_range(ext[1]..ext[3]),
        })
        .collect();
    Ok(m1_residential(&points, land_use, weights)?.value)
}

/// Which metrics to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricSet {
    pub m1: bool,
    pub m2: bool,
    pub m3: bool,
}

impl Default for MetricSet {
    fn default() -> Self {
        MetricSet { m1: true, m2: true, m3: true }
    }
}

impl std::str::FromStr for MetricSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut set = MetricSet { m1: false, m2: false, m3: false };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_lowercase().as_str() {
                "m1" => set.m1 = true,
                "m2" => set.m2 = true,
                "m3" => set.m3 = true,
                other => return Err(Error::arg(format!("unknown metric `{other}`"))),
            }
        }
        if !(set.m1 || set.m2 || set.m3) {
            return Err(Error::arg("no metric selected"));
        }
        Ok(set)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricSettings {
    pub weights: BufferWeights,
    pub delta_max_m: f64,
    pub stay_share: StayShare,
}

impl Default for MetricSettings {
    fn default() -> Self {
        MetricSettings {
            weights: BufferWeights::default(),
            delta_max_m: 5000.0,
            stay_share: StayShare::Sum,
        }
    }
}

/// What M2 and M3 need to know about a user besides the home.
#[derive(Debug, Clone)]
pub struct UserEvidence {
    pub nights: NightPings,
    pub stay_regions: Vec<StayRegion>,
}

/// Night pings and night-only stay regions for every trace.
pub fn build_evidence(traces: &BTreeMap<String, Trace>, window: &NightWindow, stay: &StayConfig) -> BTreeMap<String, UserEvidence> {
    let built: Vec<UserEvidence> = traces
        .par_iter()
        .map(|(_, t)| {
            let nights = night_pings(t, window);
            let stay_regions = night_stay_regions(&nights, window, stay);
            UserEvidence { nights, stay_regions }
        })
        .collect();
    traces.keys().cloned().zip(built).collect()
}

/// Per-user metric inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserMetricSample {
    pub device_id: String,
    pub delta_m: Option<f64>,
    pub outside_fraction: Option<f64>,
    pub in_residential_at: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub algorithm: Algorithm,
    pub n_users: usize,
    pub m1: Option<f64>,
    pub m2: Option<f64>,
    pub m3: Option<f64>,
    pub mean: Option<f64>,
    pub rho: Vec<(u32, f64)>,
    pub m2_excluded: usize,
    pub m3_excluded: usize,
    /// Homes whose user has no evidence at all (not in the trace data).
    pub missing_evidence: usize,
    pub m2_cdf: Vec<(f64, f64)>,
    pub m3_cdf: Vec<(f64, f64)>,
    pub samples: Vec<UserMetricSample>,
}

/// Computes the selected metrics for one algorithm's homes.
pub fn evaluate(
    algorithm: Algorithm,
    homes: &[HomeLocation],
    evidence: &BTreeMap<String, UserEvidence>,
    land_use: Option<&LandUseMap>,
    which: MetricSet,
    settings: &MetricSettings,
) -> Result<MetricReport> {
    let mut report = MetricReport {
        algorithm,
        n_users: homes.len(),
        m1: None,
        m2: None,
        m3: None,
        mean: None,
        rho: Vec::new(),
        m2_excluded: 0,
        m3_excluded: 0,
        missing_evidence: 0,
        m2_cdf: Vec::new(),
        m3_cdf: Vec::new(),
        samples: homes
            .iter()
            .map(|h| UserMetricSample {
                device_id: h.device_id.clone(),
                delta_m: None,
                outside_fraction: None,
                in_residential_at: None,
            })
            .collect(),
    };
    if homes.is_empty() {
        return Ok(report);
    }

    if which.m1 {
        let land_use = land_use.ok_or_else(|| Error::Metric("M1 requires a land-use map".into()))?;
        let points: Vec<GeoPoint> = homes.iter().map(|h| h.point).collect();
        let m1 = m1_residential(&points, land_use, &settings.weights)?;
        for (s, at) in report.samples.iter_mut().zip(&m1.in_residential_at) {
            s.in_residential_at = *at;
        }
        report.m1 = Some(m1.value);
        report.rho = m1.rho;
    }

    let with_evidence: Vec<(usize, &HomeLocation, &UserEvidence)> = homes
        .iter()
        .enumerate()
        .filter_map(|(i, h)| evidence.get(&h.device_id).map(|e| (i, h, e)))
        .collect();
    report.missing_evidence = homes.len() - with_evidence.len();

    if which.m2 {
        let pairs: Vec<(GeoPoint, &NightPings)> = with_evidence.iter().map(|(_, h, e)| (h.point, &e.nights)).collect();
        for (i, h, e) in &with_evidence {
            report.samples[*i].delta_m = proximity_delta(h.point, &e.nights);
        }
        report.m2_excluded = report.missing_evidence;
        // a subset where nobody has night pings yields no value rather than an error
        if pairs.iter().any(|(_, n)| !n.is_empty()) {
            let m2 = m2_proximity(&pairs, settings.delta_max_m)?;
            report.m2 = Some(m2.value);
            report.m2_excluded += m2.excluded;
            report.m2_cdf = quantiles(&m2.deltas, &CDF_PROBS);
        } else {
            report.m2_excluded += pairs.len();
        }
    }

    if which.m3 {
        let pairs: Vec<(GeoPoint, &[StayRegion])> = with_evidence
            .iter()
            .map(|(_, h, e)| (h.point, e.stay_regions.as_slice()))
            .collect();
        for (i, h, e) in &with_evidence {
            report.samples[*i].outside_fraction = outside_home_fraction(h.point, &e.stay_regions, settings.stay_share);
        }
        report.m3_excluded = report.missing_evidence;
        if report.samples.iter().any(|s| s.outside_fraction.is_some()) {
            let m3 = m3_home_stay(&pairs, settings.stay_share)?;
            report.m3 = Some(m3.value);
            report.m3_excluded += m3.excluded;
            report.m3_cdf = quantiles(&m3.outside_fractions, &CDF_PROBS);
        } else {
            report.m3_excluded += pairs.len();
        }
    }

    if let (Some(a), Some(b), Some(c)) = (report.m1, report.m2, report.m3) {
        report.mean = Some(mean_metric(a, b, c));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spatial::{Feature, Polygon};
    use proptest::prelude::*;

    const M_PER_DEG: f64 = 111_194.926_644_558_7;

    fn m(v: f64) -> f64 {
        v / M_PER_DEG
    }

    /// Closed form of the normalized CDF area.
    fn closed_form(values: &[f64], upper: f64) -> f64 {
        1.0 - values.iter().map(|v| v.clamp(0.0, upper)).sum::<f64>() / values.len() as f64 / upper
    }

    /// Trapezoid integration of the ECDF sampled on a fine grid.
    fn trapezoid(values: &[f64], upper: f64, steps: usize) -> f64 {
        let f = |x: f64| values.iter().filter(|v| **v <= x).count() as f64 / values.len() as f64;
        let h = upper / steps as f64;
        let mut area = 0.0;
        for k in 0..steps {
            area += 0.5 * h * (f(k as f64 * h) + f((k + 1) as f64 * h));
        }
        area / upper
    }

    #[test]
    fn weight_table_is_exact() {
        let w = BufferWeights::default();
        assert_eq!(w.radii(), vec![0, 5, 10, 15, 20, 25, 30, 35, 40, 45, 50]);
        assert_eq!(w.numerators(), vec![50, 45, 40, 35, 30, 25, 20, 15, 10, 5, 0]);
        assert_eq!(w.denominator(), 275);
        let ws = w.weights();
        assert_eq!(ws[0], 50.0 / 275.0);
        assert_eq!(ws[9], 5.0 / 275.0);
        assert_eq!(ws[10], 0.0);
        assert!(ws.windows(2).all(|p| p[0] > p[1]));
        assert!((ws.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(BufferWeights::new(50, 7).is_err());
        assert!(BufferWeights::new(0, 5).is_err());
    }

    #[test]
    fn cdf_auc_examples() {
        assert_eq!(cdf_auc(&[0.0, 0.0], 5000.0).unwrap(), 1.0);
        assert_eq!(cdf_auc(&[5000.0, 9000.0], 5000.0).unwrap(), 0.0);
        assert!((cdf_auc(&[0.0, 2500.0, 10_000.0], 5000.0).unwrap() - 0.5).abs() < 1e-12);
        assert!(cdf_auc(&[], 1.0).is_err());
        assert!(cdf_auc(&[1.0], 0.0).is_err());
    }

    #[test]
    fn cdf_auc_trapezoid_agrees() {
        let vals = [120.0, 4000.0, 4000.0, 35.5, 7000.0];
        let t = trapezoid(&vals, 5000.0, 200_000);
        assert!((t - cdf_auc(&vals, 5000.0).unwrap()).abs() < 1e-4);
    }

    fn residential_square(side_m: f64) -> LandUseMap {
        let features = vec![
            Feature { parts: vec![Polygon::rect(0.0, 0.0, m(side_m), m(side_m)).unwrap()], data: "residential".to_string() },
            Feature {
                parts: vec![Polygon::rect(m(2000.0), 0.0, m(2100.0), m(100.0)).unwrap()],
                data: "commercial".to_string(),
            },
        ];
        LandUseMap::new(features, ["residential".to_string()].into_iter().collect())
    }

    #[test]
    fn m1_examples() {
        let map = residential_square(100.0);
        let w = BufferWeights::default();
        let inside = [GeoPoint { lat: m(50.0), lon: m(50.0) }; 3];
        assert_eq!(m1_residential(&inside, &map, &w).unwrap().value, 1.0);

        let far = [GeoPoint { lat: m(50.0), lon: m(500.0) }];
        assert_eq!(m1_residential(&far, &map, &w).unwrap().value, 0.0);

        // weights for r = 10..50: (40+35+...+0)/275
        let ten_out = [GeoPoint { lat: m(50.0), lon: m(110.0) }];
        let r = m1_residential(&ten_out, &map, &w).unwrap();
        let brute: u64 = w.radii().iter().zip(w.numerators()).filter(|(r, _)| **r >= 10).map(|(_, n)| n).sum();
        assert_eq!(brute, 180);
        assert!((r.value - 180.0 / 275.0).abs() < 1e-12);
        assert_eq!(r.in_residential_at, vec![Some(10)]);
        assert!(r.rho.windows(2).all(|p| p[0].1 <= p[1].1));
    }

    #[test]
    fn m1_requires_residential() {
        let map = LandUseMap::new(
            vec![Feature { parts: vec![Polygon::rect(0.0, 0.0, 0.01, 0.01).unwrap()], data: "forest".to_string() }],
            ["residential".to_string()].into_iter().collect(),
        );
        let err = m1_residential(&[GeoPoint { lat: 0.0, lon: 0.0 }], &map, &BufferWeights::default()).unwrap_err();
        assert!(matches!(err, Error::Metric(_)));
    }

    fn nights_at(lon_m: &[f64]) -> NightPings {
        let rows: Vec<(f64, f64, f64)> = lon_m
            .iter()
            .enumerate()
            .map(|(k, x)| (0.0, m(*x), (19_000 + k) as f64 * 86_400.0 + 22.0 * 3600.0))
            .collect();
        night_pings(&Trace::from_triples("u", 5.0, &rows), &NightWindow::default())
    }

    #[test]
    fn m2_examples() {
        let home = GeoPoint { lat: 0.0, lon: 0.0 };
        let on_path = nights_at(&[0.0, 0.0, 0.0]);
        assert_eq!(m2_proximity(&[(home, &on_path)], 5000.0).unwrap().value, 1.0);

        let far = nights_at(&[6000.0, 7000.0]);
        assert_eq!(m2_proximity(&[(home, &far)], 5000.0).unwrap().value, 0.0);

        let a = nights_at(&[0.0]);
        let b = nights_at(&[2500.0]);
        let r = m2_proximity(&[(home, &a), (home, &b)], 5000.0).unwrap();
        assert!((r.value - 0.75).abs() < 1e-9);
    }

    #[test]
    fn m2_median_of_nightly_minima() {
        let home = GeoPoint { lat: 0.0, lon: 0.0 };
        let n = nights_at(&[100.0, 300.0, 200.0, 1000.0]);
        // even count: midpoint of 200 and 300
        assert!((proximity_delta(home, &n).unwrap() - 250.0).abs() < 1e-6);
        let empty = NightPings { device_id: "u".into(), nights: vec![] };
        assert!(proximity_delta(home, &empty).is_none());
        let r = m2_proximity(&[(home, &n), (home, &empty)], 5000.0).unwrap();
        assert_eq!(r.excluded, 1);
    }

    fn region(lon_m: f64, total_h: f64) -> StayRegion {
        StayRegion {
            stay_points: vec![],
            centroid: GeoPoint { lat: 0.0, lon: m(lon_m) },
            total_duration: total_h * 3600.0,
            night_duration: 0.0,
            visit_count: 1,
        }
    }

    #[test]
    fn m3_examples() {
        let home = GeoPoint { lat: 0.0, lon: 0.0 };
        let only = [region(10.0, 8.0)];
        assert_eq!(m3_home_stay(&[(home, &only[..])], StayShare::Sum).unwrap().value, 1.0);

        let half = vec![region(0.0, 4.0), region(3000.0, 4.0)];
        let r = m3_home_stay(&[(home, &only[..]), (home, &half[..])], StayShare::Sum).unwrap();
        assert!((r.value - 0.75).abs() < 1e-12);

        // far from every region still takes the nearest
        let far_home = GeoPoint { lat: 0.0, lon: m(10_000.0) };
        assert_eq!(outside_home_fraction(far_home, &half, StayShare::Sum), Some(0.5));
        assert!(outside_home_fraction(home, &[], StayShare::Sum).is_none());
    }

    #[test]
    fn m3_max_denominator() {
        let home = GeoPoint { lat: 0.0, lon: 0.0 };
        let regions = vec![region(0.0, 2.0), region(3000.0, 4.0), region(6000.0, 2.0)];
        assert_eq!(outside_home_fraction(home, &regions, StayShare::Max), Some(0.5));
        assert_eq!(outside_home_fraction(home, &regions, StayShare::Sum), Some(0.75));
    }

    #[test]
    fn mean_metric_examples() {
        assert_eq!(mean_metric(1.0, 1.0, 1.0), 1.0);
        assert_eq!(mean_metric(0.0, 0.0, 0.0), 0.0);
        assert!((mean_metric(0.6, 0.9, 0.9) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn baseline_on_simple_maps() {
        let w = BufferWeights::default();
        let all_res = LandUseMap::new(
            vec![Feature { parts: vec![Polygon::rect(0.0, 0.0, m(1000.0), m(1000.0)).unwrap()], data: "residential".into() }],
            ["residential".to_string()].into_iter().collect(),
        );
        assert_eq!(uniform_random_baseline(&all_res, &w, 500, 1).unwrap(), 1.0);

        // left half residential, right half commercial, 1 km square
        let split = LandUseMap::new(
            vec![
                Feature { parts: vec![Polygon::rect(0.0, 0.0, m(500.0), m(1000.0)).unwrap()], data: "residential".into() },
                Feature { parts: vec![Polygon::rect(m(500.0), 0.0, m(1000.0), m(1000.0)).unwrap()], data: "commercial".into() },
            ],
            ["residential".to_string()].into_iter().collect(),
        );
        // ρ(r) = 0.5 + r/L, so M1 = 0.5 + Σ w(r)·r / L
        let excess: f64 = w.radii().iter().zip(w.weights()).map(|(r, wt)| wt * *r as f64).sum();
        assert!((excess - 15.0).abs() < 1e-12);
        let analytic = 0.5 + excess / 1000.0;
        let got = uniform_random_baseline(&split, &w, 40_000, 3).unwrap();
        assert!((got - analytic).abs() < 0.01, "{got} vs {analytic}");

        let none = LandUseMap::new(
            vec![Feature { parts: vec![Polygon::rect(0.0, 0.0, m(1000.0), m(1000.0)).unwrap()], data: "commercial".into() }],
            ["residential".to_string()].into_iter().collect(),
        );
        assert!(uniform_random_baseline(&none, &w, 10, 1).is_err());
        assert!(uniform_random_baseline(&all_res, &w, 0, 1).is_err());
    }

    #[test]
    fn metric_set_parsing() {
        let s: MetricSet = "m2,m3".parse().unwrap();
        assert_eq!(s, MetricSet { m1: false, m2: true, m3: true });
        assert!("m4".parse::<MetricSet>().is_err());
        assert!("".parse::<MetricSet>().is_err());
    }

    proptest! {
        #[test]
        fn cdf_auc_matches_closed_form(vals in prop::collection::vec(-10.0..8000.0f64, 1..200), upper in 1.0..6000.0f64) {
            let got = cdf_auc(&vals, upper).unwrap();
            prop_assert!((got - closed_form(&vals, upper)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&got));
        }

        #[test]
        fn cdf_auc_invariant_under_order_and_duplication(vals in prop::collection::vec(0.0..8000.0f64, 1..50)) {
            let base = cdf_auc(&vals, 5000.0).unwrap();
            let mut rev = vals.clone();
            rev.reverse();
            let mut dup = vals.clone();
            dup.extend(vals.iter().copied());
            prop_assert!((cdf_auc(&rev, 5000.0).unwrap() - base).abs() < 1e-12);
            prop_assert!((cdf_auc(&dup, 5000.0).unwrap() - base).abs() < 1e-12);
        }
    }
}
