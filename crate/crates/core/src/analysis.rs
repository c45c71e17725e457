//! Data-quality sensitivity and the downstream applications built on home
//! tables: evacuation identification and zonal / income consistency.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::haversine;
use crate::hda::{Algorithm, HomeLocation};
use crate::ingest::NightPings;
use crate::metrics::{evaluate, MetricReport, MetricSet, MetricSettings, UserEvidence};
use crate::spatial::{LandUseMap, ZoneMap};

/// Quality thresholds in mean night pings per night.
pub const DEFAULT_THRESHOLDS: [f64; 9] = [0.0, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 200.0];

pub const DEFAULT_EVACUATION_THRESHOLD_M: f64 = 1000.0;

/// Number of calendar nights spanned by the data, counting nights without
/// any ping.
pub fn study_night_count<'a>(nights: impl IntoIterator<Item = &'a NightPings>) -> usize {
    let mut range: Option<(i64, i64)> = None;
    for user in nights {
        for n in user.nights.iter().filter(|n| !n.pings.is_empty()) {
            range = Some(match range {
                None => (n.id, n.id),
                Some((lo, hi)) => (lo.min(n.id), hi.max(n.id)),
            });
        }
    }
    range.map_or(0, |(lo, hi)| (hi - lo + 1) as usize)
}

/// Mean night pings per night of the study period.
pub fn user_quality(nights: &NightPings, night_count: usize) -> Result<f64> {
    if night_count == 0 {
        return Err(Error::arg("study period has no nights"));
    }
    Ok(nights.ping_count() as f64 / night_count as f64)
}

/// Quality of every user, over the period spanned by all of them.
pub fn quality_table(evidence: &BTreeMap<String, UserEvidence>) -> Result<BTreeMap<String, f64>> {
    let count = study_night_count(evidence.values().map(|e| &e.nights));
    evidence
        .iter()
        .map(|(id, e)| Ok((id.clone(), user_quality(&e.nights, count)?)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub algorithm: Algorithm,
    pub threshold: f64,
    pub n_users: usize,
    /// Fraction of the population with quality below the threshold.
    pub cdf_below: f64,
    /// `None` when no user qualifies.
    pub report: Option<MetricReport>,
}

impl SensitivityRow {
    pub fn is_absent(&self) -> bool {
        self.report.is_none()
    }
}

/// Inputs shared by every sensitivity row.
pub struct SensitivityInputs<'a> {
    /// Home tables over the common user set.
    pub tables: &'a BTreeMap<Algorithm, Vec<HomeLocation>>,
    pub evidence: &'a BTreeMap<String, UserEvidence>,
    pub quality: &'a BTreeMap<String, f64>,
    pub land_use: Option<&'a LandUseMap>,
    pub metrics: MetricSet,
    pub settings: MetricSettings,
}

/// Metrics recomputed on the users whose quality reaches each threshold.
/// Rows come back ordered by algorithm, then threshold.
pub fn sensitivity_curve(inputs: &SensitivityInputs<'_>, thresholds: &[f64]) -> Result<Vec<SensitivityRow>> {
    if thresholds.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
        return Err(Error::arg("quality thresholds must be finite and non-negative"));
    }
    if thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::arg("quality thresholds must be sorted ascending"));
    }
    let population: BTreeSet<&str> = inputs
        .tables
        .values()
        .flat_map(|t| t.iter().map(|h| h.device_id.as_str()))
        .collect();
    let quality_of = |id: &str| inputs.quality.get(id).copied().unwrap_or(0.0);

    let tasks: Vec<(Algorithm, f64)> = inputs
        .tables
        .keys()
        .flat_map(|&a| thresholds.iter().map(move |&t| (a, t)))
        .collect();
    tasks
        .par_iter()
        .map(|&(algorithm, threshold)| {
            let subset: Vec<HomeLocation> = inputs.tables[&algorithm]
                .iter()
                .filter(|h| quality_of(&h.device_id) >= threshold)
                .cloned()
                .collect();
            let below = population.iter().filter(|id| quality_of(id) < threshold).count();
            let cdf_below = if population.is_empty() { 0.0 } else { below as f64 / population.len() as f64 };
            let report = if subset.is_empty() {
                None
            } else {
                Some(evaluate(
                    algorithm,
                    &subset,
                    inputs.evidence,
                    inputs.land_use,
                    inputs.metrics,
                    &inputs.settings,
                )?)
            };
            Ok(SensitivityRow {
                algorithm,
                threshold,
                n_users: subset.len(),
                cdf_below,
                report,
            })
        })
        .collect()
}

fn table_map(homes: &[HomeLocation]) -> Result<BTreeMap<&str, &HomeLocation>> {
    let mut map = BTreeMap::new();
    for h in homes {
        if map.insert(h.device_id.as_str(), h).is_some() {
            return Err(Error::Format(format!("duplicate home for device `{}`", h.device_id)));
        }
    }
    Ok(map)
}

/// Users present in both tables, plus how many appear in only one.
fn paired<'a>(a: &'a [HomeLocation], b: &'a [HomeLocation]) -> Result<(Vec<(&'a HomeLocation, &'a HomeLocation)>, usize)> {
    let ma = table_map(a)?;
    let mb = table_map(b)?;
    let pairs: Vec<_> = ma
        .iter()
        .filter_map(|(id, ha)| mb.get(id).map(|hb| (*ha, *hb)))
        .collect();
    let unmatched = ma.len() + mb.len() - 2 * pairs.len();
    Ok((pairs, unmatched))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvacuationUser {
    pub device_id: String,
    pub distance_m: f64,
    pub evacuated: bool,
    /// Zone of the pre-event home.
    pub zone_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneEvacuation {
    pub zone_id: String,
    pub users: usize,
    pub evacuated: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvacuationReport {
    pub threshold_m: f64,
    pub users: Vec<EvacuationUser>,
    /// Users found in only one of the two tables.
    pub excluded: usize,
    /// Paired users whose pre-event home lies outside every zone.
    pub outside_zones: usize,
    pub evacuated_fraction: Option<f64>,
    /// Sorted by zone id.
    pub zones: Vec<ZoneEvacuation>,
}

/// Flags users whose home moved more than `threshold_m` between the two
/// tables and aggregates the share per zone of the pre-event home.
pub fn evacuation_classify(
    pre: &[HomeLocation],
    post: &[HomeLocation],
    zones: Option<&ZoneMap>,
    threshold_m: f64,
) -> Result<EvacuationReport> {
    if !(threshold_m >= 0.0) || !threshold_m.is_finite() {
        return Err(Error::arg("evacuation threshold must be non-negative"));
    }
    let (pairs, excluded) = paired(pre, post)?;
    let users: Vec<EvacuationUser> = pairs
        .iter()
        .map(|(a, b)| {
            let distance_m = haversine(a.point, b.point);
            EvacuationUser {
                device_id: a.device_id.clone(),
                distance_m,
                evacuated: distance_m > threshold_m,
                zone_id: zones.and_then(|z| z.zone_of(a.point)).map(|z| z.zone_id.clone()),
            }
        })
        .collect();

    let mut per_zone: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    let mut outside_zones = 0;
    if zones.is_some() {
        for u in &users {
            match &u.zone_id {
                Some(z) => {
                    let e = per_zone.entry(z.as_str()).or_default();
                    e.0 += 1;
                    e.1 += u.evacuated as usize;
                }
                None => outside_zones += 1,
            }
        }
    }
    let evacuated = users.iter().filter(|u| u.evacuated).count();
    let zones = per_zone
        .into_iter()
        .map(|(zone_id, (n, e))| ZoneEvacuation {
            zone_id: zone_id.to_string(),
            users: n,
            evacuated: e,
            fraction: e as f64 / n as f64,
        })
        .collect();
    Ok(EvacuationReport {
        threshold_m,
        evacuated_fraction: (!users.is_empty()).then(|| evacuated as f64 / users.len() as f64),
        users,
        excluded,
        outside_zones,
        zones,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub compared: usize,
    pub consistent: usize,
    pub fraction: Option<f64>,
    /// Users found in only one of the two tables.
    pub excluded_unpaired: usize,
    /// Paired users with either home outside every zone.
    pub excluded_outside: usize,
}

/// Share of users whose two homes fall in the same zone.
pub fn zonal_consistency(a: &[HomeLocation], b: &[HomeLocation], zones: &ZoneMap) -> Result<ConsistencyReport> {
    let (pairs, excluded_unpaired) = paired(a, b)?;
    let mut report = ConsistencyReport {
        compared: 0,
        consistent: 0,
        fraction: None,
        excluded_unpaired,
        excluded_outside: 0,
    };
    for (ha, hb) in pairs {
        match (zones.zone_of(ha.point), zones.zone_of(hb.point)) {
            (Some(za), Some(zb)) => {
                report.compared += 1;
                report.consistent += (za.zone_id == zb.zone_id) as usize;
            }
            _ => report.excluded_outside += 1,
        }
    }
    if report.compared > 0 {
        report.fraction = Some(report.consistent as f64 / report.compared as f64);
    }
    Ok(report)
}

/// Median monthly income band of a zone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum IncomeCategory {
    Low,
    Mid,
    High,
}

impl IncomeCategory {
    pub const ALL: [IncomeCategory; 3] = [IncomeCategory::Low, IncomeCategory::Mid, IncomeCategory::High];
    pub const MID_FROM: f64 = 1250.0;
    pub const HIGH_FROM: f64 = 3333.0;

    /// `None` for negative or non-finite incomes.
    pub fn classify(monthly_income: f64) -> Option<Self> {
        if !monthly_income.is_finite() || monthly_income < 0.0 {
            return None;
        }
        Some(if monthly_income < Self::MID_FROM {
            IncomeCategory::Low
        } else if monthly_income < Self::HIGH_FROM {
            IncomeCategory::Mid
        } else {
            IncomeCategory::High
        })
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            IncomeCategory::Low => "low",
            IncomeCategory::Mid => "mid",
            IncomeCategory::High => "high",
        }
    }
}

impl fmt::Display for IncomeCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncomeTransitions {
    /// `matrix[from][to]` counts, indexed by [`IncomeCategory::index`].
    pub matrix: [[usize; 3]; 3],
    pub compared: usize,
    pub excluded_unpaired: usize,
    pub excluded_outside: usize,
    /// Paired users whose zone (in either period) has no income value.
    pub excluded_no_income: usize,
    /// Percentage of compared users whose category changed.
    pub off_diagonal_pct: Option<f64>,
}

impl IncomeTransitions {
    pub fn row_sum(&self, from: IncomeCategory) -> usize {
        self.matrix[from.index()].iter().sum()
    }
}

/// Income-band transitions between the zones of two home tables.
pub fn income_mismatch(a: &[HomeLocation], b: &[HomeLocation], zones: &ZoneMap) -> Result<IncomeTransitions> {
    let (pairs, excluded_unpaired) = paired(a, b)?;
    let mut t = IncomeTransitions {
        matrix: [[0; 3]; 3],
        compared: 0,
        excluded_unpaired,
        excluded_outside: 0,
        excluded_no_income: 0,
        off_diagonal_pct: None,
    };
    for (ha, hb) in pairs {
        let (Some(za), Some(zb)) = (zones.zone_of(ha.point), zones.zone_of(hb.point)) else {
            t.excluded_outside += 1;
            continue;
        };
        let ca = za.median_income_monthly.and_then(IncomeCategory::classify);
        let cb = zb.median_income_monthly.and_then(IncomeCategory::classify);
        let (Some(ca), Some(cb)) = (ca, cb) else {
            t.excluded_no_income += 1;
            continue;
        };
        t.matrix[ca.index()][cb.index()] += 1;
        t.compared += 1;
    }
    if t.compared > 0 {
        let diag: usize = (0..3).map(|i| t.matrix[i][i]).sum();
        t.off_diagonal_pct = Some(100.0 * (t.compared - diag) as f64 / t.compared as f64);
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::GeoPoint;
    use crate::ingest::{night_pings, NightWindow, Trace};
    use crate::spatial::{Feature, Polygon, Zone};
    use proptest::prelude::*;

    const M_PER_DEG: f64 = 111_194.926_644_558_7;
    const DAY0: f64 = 19_000.0 * 86_400.0;

    fn m(v: f64) -> f64 {
        v / M_PER_DEG
    }

    fn home(id: &str, x_m: f64, y_m: f64) -> HomeLocation {
        HomeLocation {
            device_id: id.to_string(),
            point: GeoPoint { lat: m(y_m), lon: m(x_m) },
            algorithm: Algorithm::A1,
            support: 1.0,
        }
    }

    /// Three 1 km square zones side by side along x.
    fn zones(incomes: [Option<f64>; 3]) -> ZoneMap {
        let features = incomes
            .iter()
            .enumerate()
            .map(|(k, inc)| Feature {
                parts: vec![Polygon::rect(m(k as f64 * 1000.0), 0.0, m((k + 1) as f64 * 1000.0), m(1000.0)).unwrap()],
                data: Zone { zone_id: format!("z{k}"), median_income_monthly: *inc },
            })
            .collect();
        ZoneMap::new(features).unwrap()
    }

    fn nights_with(counts: &[usize]) -> NightPings {
        let mut rows = Vec::new();
        for (night, &c) in counts.iter().enumerate() {
            for k in 0..c {
                rows.push((0.0, 0.0, DAY0 + night as f64 * 86_400.0 + 20.0 * 3600.0 + k as f64 * 60.0));
            }
        }
        night_pings(&Trace::from_triples("u", 5.0, &rows), &NightWindow::default())
    }

    #[test]
    fn quality_examples() {
        let n = nights_with(&[10; 10]);
        assert_eq!(user_quality(&n, 10).unwrap(), 10.0);
        let empty = nights_with(&[]);
        assert_eq!(user_quality(&empty, 10).unwrap(), 0.0);
        assert!(user_quality(&n, 0).is_err());
        // a ping every minute of a 9 h window
        let full = nights_with(&[540; 10]);
        assert_eq!(user_quality(&full, 10).unwrap(), 540.0);
    }

    #[test]
    fn night_count_spans_gaps() {
        let a = nights_with(&[3, 0, 0, 0, 2]);
        let b = nights_with(&[1]);
        assert_eq!(study_night_count([&a, &b]), 5);
        assert_eq!(study_night_count([&nights_with(&[])]), 0);
    }

    #[test]
    fn evacuation_examples() {
        let pre = vec![home("a", 100.0, 100.0), home("b", 100.0, 200.0), home("c", 100.0, 300.0), home("d", 0.0, 0.0)];
        let post = vec![home("a", 100.0, 100.0), home("b", 1600.0, 200.0), home("c", 900.0, 300.0), home("e", 0.0, 0.0)];
        let z = zones([None; 3]);
        let r = evacuation_classify(&pre, &post, Some(&z), DEFAULT_EVACUATION_THRESHOLD_M).unwrap();
        assert_eq!(r.excluded, 2);
        let flags: Vec<(f64, bool)> = r.users.iter().map(|u| (u.distance_m, u.evacuated)).collect();
        assert_eq!(flags[0], (0.0, false));
        assert!((flags[1].0 - 1500.0).abs() < 0.5 && flags[1].1);
        assert!((flags[2].0 - 800.0).abs() < 0.5 && !flags[2].1);
        assert_eq!(r.zones.len(), 1);
        assert_eq!(r.zones[0].zone_id, "z0");
        assert_eq!((r.zones[0].users, r.zones[0].evacuated), (3, 1));
        assert!((r.evacuated_fraction.unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn duplicate_homes_rejected() {
        let t = vec![home("a", 0.0, 0.0), home("a", 5.0, 0.0)];
        assert!(evacuation_classify(&t, &t, None, 1000.0).is_err());
    }

    #[test]
    fn consistency_examples() {
        let z = zones([None; 3]);
        let a = vec![home("a", 500.0, 500.0), home("b", 1500.0, 500.0), home("c", 9000.0, 500.0)];
        let same = zonal_consistency(&a, &a, &z).unwrap();
        assert_eq!(same.fraction, Some(1.0));
        assert_eq!(same.excluded_outside, 1);

        let moved = vec![home("a", 1500.0, 500.0), home("b", 2500.0, 500.0)];
        let r = zonal_consistency(&a, &moved, &z).unwrap();
        assert_eq!(r.fraction, Some(0.0));
        assert_eq!(r.excluded_unpaired, 1);
    }

    #[test]
    fn income_categories() {
        assert_eq!(IncomeCategory::classify(1000.0), Some(IncomeCategory::Low));
        assert_eq!(IncomeCategory::classify(2000.0), Some(IncomeCategory::Mid));
        assert_eq!(IncomeCategory::classify(5000.0), Some(IncomeCategory::High));
        assert_eq!(IncomeCategory::classify(1250.0), Some(IncomeCategory::Mid));
        assert_eq!(IncomeCategory::classify(3333.0), Some(IncomeCategory::High));
        assert_eq!(IncomeCategory::classify(0.0), Some(IncomeCategory::Low));
        assert_eq!(IncomeCategory::classify(-1.0), None);
    }

    #[test]
    fn income_transitions() {
        let z = zones([Some(1000.0), Some(2000.0), None]);
        let a = vec![home("a", 500.0, 500.0), home("b", 1500.0, 500.0), home("c", 500.0, 100.0)];
        let identity = income_mismatch(&a, &a, &z).unwrap();
        assert_eq!(identity.matrix, [[2, 0, 0], [0, 1, 0], [0, 0, 0]]);
        assert_eq!(identity.off_diagonal_pct, Some(0.0));

        let b = vec![home("a", 1500.0, 500.0), home("b", 1500.0, 500.0), home("c", 2500.0, 100.0)];
        let t = income_mismatch(&a, &b, &z).unwrap();
        assert_eq!(t.matrix[0][1], 1);
        assert_eq!(t.matrix[1][1], 1);
        assert_eq!(t.excluded_no_income, 1);
        assert_eq!(t.off_diagonal_pct, Some(50.0));
    }

    #[test]
    fn sensitivity_rows() {
        let mut evidence = BTreeMap::new();
        let mut homes = Vec::new();
        for (k, c) in [1usize, 4, 12].iter().enumerate() {
            let id = format!("u{k}");
            let nights = nights_with(&[*c; 10]);
            evidence.insert(id.clone(), UserEvidence { nights, stay_regions: vec![] });
            homes.push(home(&id, 0.0, 0.0));
        }
        let quality = quality_table(&evidence).unwrap();
        assert_eq!(quality["u1"], 4.0);
        let tables: BTreeMap<Algorithm, Vec<HomeLocation>> = [(Algorithm::A1, homes.clone())].into_iter().collect();
        let inputs = SensitivityInputs {
            tables: &tables,
            evidence: &evidence,
            quality: &quality,
            land_use: None,
            metrics: "m2".parse().unwrap(),
            settings: MetricSettings::default(),
        };
        let rows = sensitivity_curve(&inputs, &[0.0, 2.0, 5.0, 50.0]).unwrap();
        assert_eq!(rows.iter().map(|r| r.n_users).collect::<Vec<_>>(), vec![3, 2, 1, 0]);
        assert!(rows[3].is_absent());
        assert!((rows[1].cdf_below - 1.0 / 3.0).abs() < 1e-12);
        let headline = evaluate(Algorithm::A1, &homes, &evidence, None, inputs.metrics, &inputs.settings).unwrap();
        assert_eq!(rows[0].report.as_ref().unwrap(), &headline);
        assert!(sensitivity_curve(&inputs, &[5.0, 1.0]).is_err());
    }

    proptest! {
        #[test]
        fn evacuated_fraction_non_increasing(moves in prop::collection::vec(0.0..5000.0f64, 1..40)) {
            let pre: Vec<HomeLocation> = (0..moves.len()).map(|k| home(&format!("u{k}"), 0.0, k as f64 * 10.0)).collect();
            let post: Vec<HomeLocation> = moves.iter().enumerate().map(|(k, d)| home(&format!("u{k}"), *d, k as f64 * 10.0)).collect();
            let mut last = f64::INFINITY;
            for t in [0.0, 100.0, 500.0, 1000.0, 2000.0, 4000.0] {
                let f = evacuation_classify(&pre, &post, None, t).unwrap().evacuated_fraction.unwrap();
                prop_assert!(f <= last);
                last = f;
            }
        }

        #[test]
        fn income_rows_match_period_a(xa in prop::collection::vec(0.0..3000.0f64, 1..30), xb in prop::collection::vec(0.0..3000.0f64, 30)) {
            let z = zones([Some(900.0), Some(2000.0), Some(4000.0)]);
            let a: Vec<HomeLocation> = xa.iter().enumerate().map(|(k, x)| home(&format!("u{k}"), *x, 500.0)).collect();
            let b: Vec<HomeLocation> = xa.iter().enumerate().map(|(k, _)| home(&format!("u{k}"), xb[k], 500.0)).collect();
            let t = income_mismatch(&a, &b, &z).unwrap();
            for c in IncomeCategory::ALL {
                let in_a = a.iter().filter(|h| {
                    z.zone_of(h.point).and_then(|zz| zz.median_income_monthly).and_then(IncomeCategory::classify) == Some(c)
                }).count();
                prop_assert_eq!(t.row_sum(c), in_a);
            }
        }
    }
}
