//! Synthetic agents with known homes, and a synthetic city to place them in.
//!
//! Each agent alternates nights at an anchor with days at another anchor,
//! travelling between them at a fixed speed. Stationary pings carry Gaussian
//! noise truncated at 3σ and report σ as their error radius. Every agent
//! draws from its own ChaCha stream, so output does not depend on thread
//! count or on which other agents are generated.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{GeoPoint, LocalFrame, PlanarPoint};
use crate::ingest::{NightWindow, Ping, Trace};
use crate::spatial::{features_to_geojson, Feature, LandUseMap, Polygon, Zone, ZoneMap};

/// Behaviour pattern of an agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Persona {
    /// Nights at home, days at work.
    Regular,
    /// Nights at work, days at home.
    NightShift,
    /// Home around the clock.
    WorkFromHome,
    /// A different place every night and day.
    Traveler,
    /// Regular, plus a nightly trip to a fixed spot 10 km away that holds a
    /// tenth of the night pings.
    Excursion,
    /// Two home pings per night; on one night, a dense 20-minute burst on a
    /// slow path 2 km from home.
    BurstDrive,
}

impl Persona {
    pub const ALL: [Persona; 6] = [
        Persona::Regular,
        Persona::NightShift,
        Persona::WorkFromHome,
        Persona::Traveler,
        Persona::Excursion,
        Persona::BurstDrive,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Persona::Regular => "regular",
            Persona::NightShift => "night-shift",
            Persona::WorkFromHome => "work-from-home",
            Persona::Traveler => "traveler",
            Persona::Excursion => "excursion",
            Persona::BurstDrive => "burst-drive",
        }
    }
}

impl fmt::Display for Persona {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Persona {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        Persona::ALL
            .into_iter()
            .find(|p| p.as_str() == key)
            .ok_or_else(|| Error::arg(format!("unknown persona `{s}`")))
    }
}

/// Excursion distance and share of night pings.
pub const EXCURSION_DISTANCE_M: f64 = 10_000.0;
pub const EXCURSION_SHARE: f64 = 0.1;

/// Burst geometry.
pub const BURST_PINGS: usize = 60;
pub const BURST_DURATION_S: f64 = 1200.0;
pub const BURST_DISTANCE_M: f64 = 2000.0;
pub const BURST_PATH_M: f64 = 300.0;
pub const BURST_HOME_PINGS_PER_NIGHT: u32 = 2;

const TRAVEL_PING_INTERVAL_S: f64 = 60.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub device_id: String,
    pub persona: Persona,
    pub home: GeoPoint,
    pub work: GeoPoint,
    /// Probability of spending a night at the night anchor.
    pub p_home: f64,
    /// Positional noise, meters.
    pub sigma_m: f64,
    /// Inclusive range of night pings per night.
    pub night_pings: (u32, u32),
    /// Inclusive range of stationary daytime pings per day.
    pub day_pings: (u32, u32),
    pub commute_speed_mps: f64,
}

impl AgentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.device_id.is_empty() {
            return Err(Error::arg("agent device id is empty"));
        }
        if !self.home.is_valid() || !self.work.is_valid() {
            return Err(Error::arg(format!("agent `{}` has invalid anchors", self.device_id)));
        }
        if !(0.0..=1.0).contains(&self.p_home) {
            return Err(Error::arg(format!("agent `{}`: p_home must lie in [0, 1]", self.device_id)));
        }
        if !(self.sigma_m >= 0.0) || !self.sigma_m.is_finite() {
            return Err(Error::arg(format!("agent `{}`: sigma must be non-negative", self.device_id)));
        }
        if self.night_pings.0 > self.night_pings.1 || self.day_pings.0 > self.day_pings.1 {
            return Err(Error::arg(format!("agent `{}`: empty ping-count range", self.device_id)));
        }
        if !(self.commute_speed_mps > 0.0) || !self.commute_speed_mps.is_finite() {
            return Err(Error::arg(format!("agent `{}`: commute speed must be positive", self.device_id)));
        }
        Ok(())
    }
}

/// Consecutive nights, identified like [`NightWindow::night_of`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthPeriod {
    pub first_night: i64,
    pub nights: u32,
}

impl Default for SynthPeriod {
    fn default() -> Self {
        // 2022-01-08
        SynthPeriod { first_night: 19_000, nights: 14 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentLog {
    /// Nights spent at the persona's night anchor.
    pub nights_at_anchor: u32,
    pub nights: u32,
}

#[derive(Debug, Clone, Default)]
pub struct SynthOutput {
    pub traces: BTreeMap<String, Trace>,
    pub truth: BTreeMap<String, GeoPoint>,
    pub logs: BTreeMap<String, AgentLog>,
}

impl SynthOutput {
    pub fn ping_count(&self) -> usize {
        self.traces.values().map(Trace::len).sum()
    }
}

struct Agent<'a> {
    spec: &'a AgentSpec,
    rng: ChaCha8Rng,
    frame: LocalFrame,
    noise: Option<Normal<f64>>,
    out: Vec<(f64, PlanarPoint)>,
}

impl<'a> Agent<'a> {
    fn new(spec: &'a AgentSpec, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Agent {
            spec,
            rng,
            frame: LocalFrame::with_domain(spec.home, f64::INFINITY),
            noise: (spec.sigma_m > 0.0).then(|| Normal::new(0.0, spec.sigma_m).expect("finite sigma")),
            out: Vec::new(),
        }
    }

    fn noisy(&mut self, p: PlanarPoint) -> PlanarPoint {
        let Some(noise) = self.noise else {
            return p;
        };
        let limit = 3.0 * self.spec.sigma_m;
        loop {
            let dx = noise.sample(&mut self.rng);
            let dy = noise.sample(&mut self.rng);
            if dx * dx + dy * dy <= limit * limit {
                return PlanarPoint::new(p.x + dx, p.y + dy);
            }
        }
    }

    /// `count` pings at `at`, one per equal slice of `[t0, t1)`.
    fn stay(&mut self, at: PlanarPoint, t0: f64, t1: f64, count: u32) {
        if count == 0 || t1 <= t0 {
            return;
        }
        let slice = (t1 - t0) / count as f64;
        for k in 0..count {
            let t = (t0 + (k as f64 + self.rng.gen_range(0.25..0.75)) * slice).round();
            let p = self.noisy(at);
            self.out.push((t, p));
        }
    }

    /// Moves from `from` to `to` starting at `t0`; returns the arrival time.
    fn travel(&mut self, from: PlanarPoint, to: PlanarPoint, t0: f64, emit: bool) -> f64 {
        let duration = from.dist(&to) / self.spec.commute_speed_mps;
        if emit {
            let mut t = TRAVEL_PING_INTERVAL_S;
            while t < duration {
                let f = t / duration;
                let p = PlanarPoint::new(from.x + f * (to.x - from.x), from.y + f * (to.y - from.y));
                let p = self.noisy(p);
                self.out.push(((t0 + t).round(), p));
                t += TRAVEL_PING_INTERVAL_S;
            }
        }
        t0 + duration
    }

    fn count(&mut self, range: (u32, u32)) -> u32 {
        self.rng.gen_range(range.0..=range.1)
    }

    /// A point `lo..hi` meters from home in a random direction.
    fn somewhere(&mut self, lo: f64, hi: f64) -> PlanarPoint {
        let r = self.rng.gen_range(lo..hi);
        let a = self.rng.gen_range(0.0..std::f64::consts::TAU);
        PlanarPoint::new(r * a.cos(), r * a.sin())
    }
}

fn generate_agent(spec: &AgentSpec, period: &SynthPeriod, window: &NightWindow, seed: u64, stream: u64) -> (Trace, AgentLog) {
    let mut ag = Agent::new(spec, seed, stream);
    let home = PlanarPoint::new(0.0, 0.0);
    let work = ag.frame.project_unchecked(spec.work);
    let persona = spec.persona;
    let nights: Vec<(f64, f64)> = (0..period.nights as i64)
        .map(|n| window.night_bounds(period.first_night + n))
        .collect();
    let mut log = AgentLog {
        nights_at_anchor: 0,
        nights: period.nights,
    };

    if persona == Persona::BurstDrive {
        let burst_night = nights.len() / 2;
        let bearing = ag.rng.gen_range(0.0..std::f64::consts::TAU);
        let (c, s) = (bearing.cos(), bearing.sin());
        let start = PlanarPoint::new(BURST_DISTANCE_M * c, BURST_DISTANCE_M * s);
        let end = PlanarPoint::new(start.x - BURST_PATH_M * s, start.y + BURST_PATH_M * c);
        for (k, &(ns, ne)) in nights.iter().enumerate() {
            log.nights_at_anchor += 1;
            if k != burst_night {
                ag.stay(home, ns, ne, BURST_HOME_PINGS_PER_NIGHT);
                continue;
            }
            let len = ne - ns;
            ag.stay(home, ns, ns + 0.2 * len, 1);
            let t0 = ag.travel(home, start, ns + 0.3 * len, false);
            for i in 0..BURST_PINGS {
                let f = i as f64 / (BURST_PINGS - 1) as f64;
                let p = PlanarPoint::new(start.x + f * (end.x - start.x), start.y + f * (end.y - start.y));
                let p = ag.noisy(p);
                ag.out.push(((t0 + f * BURST_DURATION_S).round(), p));
            }
            let back = ag.travel(end, home, t0 + BURST_DURATION_S, false);
            ag.stay(home, back.max(ne - 0.2 * len), ne, 1);
        }
        return (finish(&ag, spec), log);
    }

    let excursion = (persona == Persona::Excursion).then(|| {
        let a = ag.rng.gen_range(0.0..std::f64::consts::TAU);
        PlanarPoint::new(EXCURSION_DISTANCE_M * a.cos(), EXCURSION_DISTANCE_M * a.sin())
    });

    // where each night is spent
    let night_anchor = match persona {
        Persona::NightShift => work,
        _ => home,
    };
    let mut places = Vec::with_capacity(nights.len());
    for _ in 0..nights.len() {
        let place = if persona == Persona::Traveler {
            ag.somewhere(3000.0, 15_000.0)
        } else if ag.rng.gen_bool(spec.p_home) {
            log.nights_at_anchor += 1;
            night_anchor
        } else {
            ag.somewhere(2000.0, 8000.0)
        };
        places.push(place);
    }

    for (k, &(ns, ne)) in nights.iter().enumerate() {
        let place = places[k];
        let n = ag.count(spec.night_pings);
        match excursion {
            Some(x) if n > 0 => {
                let away = ((n as f64 * EXCURSION_SHARE).round() as u32).max(1).min(n);
                let before = (n - away) / 2;
                let after = n - away - before;
                let len = ne - ns;
                let leave = ns + 0.4 * len;
                ag.stay(place, ns, leave, before);
                let arrive = ag.travel(place, x, leave, false);
                let depart = arrive + 0.1 * len;
                ag.stay(x, arrive, depart, away);
                let back = ag.travel(x, place, depart, false);
                ag.stay(place, back, ne, after);
            }
            _ => ag.stay(place, ns, ne, n),
        }

        // the day that follows, unless this was the last night
        let Some(&(next_ns, _)) = nights.get(k + 1) else {
            continue;
        };
        let next_place = places[k + 1];
        let day_anchor = match persona {
            Persona::Regular | Persona::Excursion => work,
            Persona::NightShift | Persona::WorkFromHome => home,
            Persona::Traveler => ag.somewhere(0.0, 15_000.0),
            Persona::BurstDrive => unreachable!(),
        };
        let len = next_ns - ne;
        let total = ag.count(spec.day_pings);
        let morning = total / 5;
        let evening = total / 4;
        let midday = total - morning - evening;
        let leave = ne + 0.2 * len;
        ag.stay(place, ne, leave, morning);
        let arrive = ag.travel(place, day_anchor, leave, true);
        let go_back = (ne + 0.75 * len).max(arrive);
        ag.stay(day_anchor, arrive, go_back, midday);
        let home_again = ag.travel(day_anchor, next_place, go_back, true);
        ag.stay(next_place, home_again, next_ns, evening);
    }
    (finish(&ag, spec), log)
}

fn finish(ag: &Agent<'_>, spec: &AgentSpec) -> Trace {
    let id: Arc<str> = Arc::from(spec.device_id.as_str());
    let pings = ag
        .out
        .iter()
        .map(|&(t, p)| Ping {
            device_id: id.clone(),
            point: ag.frame.unproject(p),
            timestamp: t,
            error_radius: spec.sigma_m,
        })
        .collect();
    Trace::new(id, pings)
}

/// Generates every agent's trace and ground-truth home. Agent `i` draws from
/// stream `i` of the ChaCha generator seeded with `seed`.
pub fn generate(specs: &[AgentSpec], period: &SynthPeriod, window: &NightWindow, seed: u64) -> Result<SynthOutput> {
    if specs.is_empty() {
        return Err(Error::arg("no agents to generate"));
    }
    if period.nights == 0 {
        return Err(Error::arg("synthetic period has no nights"));
    }
    for s in specs {
        s.validate()?;
    }
    let mut seen = std::collections::BTreeSet::new();
    if let Some(dup) = specs.iter().find(|s| !seen.insert(s.device_id.as_str())) {
        return Err(Error::arg(format!("duplicate agent id `{}`", dup.device_id)));
    }

    let made: Vec<(Trace, AgentLog)> = specs
        .par_iter()
        .enumerate()
        .map(|(i, s)| generate_agent(s, period, window, seed, i as u64))
        .collect();
    let mut out = SynthOutput::default();
    for (spec, (trace, log)) in specs.iter().zip(made) {
        out.truth.insert(spec.device_id.clone(), spec.home);
        out.logs.insert(spec.device_id.clone(), log);
        out.traces.insert(spec.device_id.clone(), trace);
    }
    Ok(out)
}

/// Writes traces in the ingest schema, ordered by device then time.
pub fn write_traces_csv<W: Write>(w: W, traces: &BTreeMap<String, Trace>) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["device_id", "longitude", "latitude", "timestamp", "error_radius"])?;
    for trace in traces.values() {
        for p in trace.pings() {
            wtr.write_record([
                trace.device_id().to_string(),
                p.point.lon.to_string(),
                p.point.lat.to_string(),
                p.timestamp.to_string(),
                p.error_radius.to_string(),
            ])?;
        }
    }
    wtr.flush().map_err(|e| Error::Format(format!("writing traces: {e}")))?;
    Ok(())
}

/// Writes `device_id,lat,lon` rows.
pub fn write_truth_csv<W: Write>(w: W, truth: &BTreeMap<String, GeoPoint>) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["device_id", "lat", "lon"])?;
    for (id, p) in truth {
        wtr.write_record([id.clone(), p.lat.to_string(), p.lon.to_string()])?;
    }
    wtr.flush().map_err(|e| Error::Format(format!("writing truth: {e}")))?;
    Ok(())
}

/// Square grid of blocks alternating residential and commercial use, grouped
/// into zones of `zone_blocks × zone_blocks` blocks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CityConfig {
    /// South-west corner.
    pub origin: GeoPoint,
    pub blocks: u32,
    pub block_m: f64,
    pub zone_blocks: u32,
    /// Range of zone median monthly incomes.
    pub income_range: (f64, f64),
}

impl Default for CityConfig {
    fn default() -> Self {
        CityConfig {
            origin: GeoPoint { lat: 40.0, lon: -75.0 },
            blocks: 10,
            block_m: 400.0,
            zone_blocks: 2,
            income_range: (600.0, 6000.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCity {
    cfg: CityConfig,
    frame: LocalFrame,
    incomes: Vec<f64>,
}

impl SyntheticCity {
    pub fn new(cfg: CityConfig, seed: u64) -> Result<Self> {
        if cfg.blocks == 0 || cfg.zone_blocks == 0 || !(cfg.block_m > 0.0) {
            return Err(Error::arg("city needs positive block count and size"));
        }
        if !(cfg.income_range.0 <= cfg.income_range.1) {
            return Err(Error::arg("income range is reversed"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let per_side = cfg.blocks.div_ceil(cfg.zone_blocks);
        let incomes = (0..per_side * per_side)
            .map(|_| {
                if cfg.income_range.0 == cfg.income_range.1 {
                    cfg.income_range.0
                } else {
                    rng.gen_range(cfg.income_range.0..cfg.income_range.1).round()
                }
            })
            .collect();
        Ok(SyntheticCity {
            frame: LocalFrame::with_domain(cfg.origin, f64::INFINITY),
            cfg,
            incomes,
        })
    }

    pub fn config(&self) -> &CityConfig {
        &self.cfg
    }

    pub fn is_residential_block(&self, i: u32, j: u32) -> bool {
        (i + j).is_multiple_of(2)
    }

    fn rect(&self, x0: f64, y0: f64, x1: f64, y1: f64) -> Polygon {
        let sw = self.frame.unproject(PlanarPoint::new(x0, y0));
        let ne = self.frame.unproject(PlanarPoint::new(x1, y1));
        Polygon::rect(sw.lon, sw.lat, ne.lon, ne.lat).expect("finite corners")
    }

    pub fn land_use_features(&self) -> Vec<Feature<String>> {
        let b = self.cfg.block_m;
        let mut out = Vec::new();
        for j in 0..self.cfg.blocks {
            for i in 0..self.cfg.blocks {
                let kind = if self.is_residential_block(i, j) { "residential" } else { "commercial" };
                out.push(Feature {
                    parts: vec![self.rect(i as f64 * b, j as f64 * b, (i + 1) as f64 * b, (j + 1) as f64 * b)],
                    data: kind.to_string(),
                });
            }
        }
        out
    }

    pub fn zone_features(&self) -> Vec<Feature<Zone>> {
        let b = self.cfg.block_m;
        let zb = self.cfg.zone_blocks;
        let per_side = self.cfg.blocks.div_ceil(zb);
        let mut out = Vec::new();
        for zj in 0..per_side {
            for zi in 0..per_side {
                let x0 = (zi * zb) as f64 * b;
                let y0 = (zj * zb) as f64 * b;
                let x1 = (((zi + 1) * zb).min(self.cfg.blocks)) as f64 * b;
                let y1 = (((zj + 1) * zb).min(self.cfg.blocks)) as f64 * b;
                out.push(Feature {
                    parts: vec![self.rect(x0, y0, x1, y1)],
                    data: Zone {
                        zone_id: format!("Z{zj:02}{zi:02}"),
                        median_income_monthly: Some(self.incomes[(zj * per_side + zi) as usize]),
                    },
                });
            }
        }
        out
    }

    pub fn land_use(&self) -> LandUseMap {
        LandUseMap::new(self.land_use_features(), ["residential".to_string()].into_iter().collect())
    }

    pub fn zones(&self) -> ZoneMap {
        ZoneMap::new(self.zone_features()).expect("zone ids are unique")
    }

    pub fn land_use_geojson(&self) -> String {
        features_to_geojson(&self.land_use_features(), |kind| {
            let mut m = serde_json::Map::new();
            m.insert("landuse".into(), kind.clone().into());
            m
        })
    }

    pub fn zones_geojson(&self) -> String {
        features_to_geojson(&self.zone_features(), |z| {
            let mut m = serde_json::Map::new();
            m.insert("zone_id".into(), z.zone_id.clone().into());
            if let Some(inc) = z.median_income_monthly {
                m.insert("median_income_monthly".into(), inc.into());
            }
            m
        })
    }

    /// A uniform point inside a random block of the given use, at least
    /// `inset_m` from the block edge.
    pub fn sample_block_point<R: Rng>(&self, rng: &mut R, residential: bool, inset_m: f64) -> GeoPoint {
        let b = self.cfg.block_m;
        let inset = inset_m.clamp(0.0, b / 2.0 - 1e-6);
        let blocks: Vec<(u32, u32)> = (0..self.cfg.blocks)
            .flat_map(|j| (0..self.cfg.blocks).map(move |i| (i, j)))
            .filter(|&(i, j)| self.is_residential_block(i, j) == residential)
            .collect();
        let &(i, j) = if blocks.is_empty() {
            &(0, 0)
        } else {
            &blocks[rng.gen_range(0..blocks.len())]
        };
        let x = i as f64 * b + rng.gen_range(inset..b - inset);
        let y = j as f64 * b + rng.gen_range(inset..b - inset);
        self.frame.unproject(PlanarPoint::new(x, y))
    }
}

/// Parameters for [`population`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PopulationConfig {
    pub agents: usize,
    pub p_home: f64,
    pub sigma_m: f64,
    pub night_pings: (u32, u32),
    pub day_pings: (u32, u32),
    pub commute_speed_mps: f64,
    /// Relative persona weights.
    pub mix: BTreeMap<Persona, f64>,
    /// Minimum distance between a home and its block edge.
    pub home_inset_m: f64,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        PopulationConfig {
            agents: 100,
            p_home: 0.9,
            sigma_m: 15.0,
            night_pings: (20, 30),
            day_pings: (10, 20),
            commute_speed_mps: 10.0,
            mix: [(Persona::Regular, 1.0)].into_iter().collect(),
            home_inset_m: 60.0,
        }
    }
}

/// Agents with homes in residential blocks and workplaces in commercial
/// ones. Personas are assigned in proportion to the mix weights.
pub fn population(city: &SyntheticCity, cfg: &PopulationConfig, seed: u64) -> Result<Vec<AgentSpec>> {
    if cfg.agents == 0 {
        return Err(Error::arg("population needs at least one agent"));
    }
    let total: f64 = cfg.mix.values().sum();
    if cfg.mix.values().any(|w| !(*w >= 0.0)) || !(total > 0.0) {
        return Err(Error::arg("persona weights must be non-negative with a positive sum"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let width = cfg.agents.to_string().len().max(4);
    let specs: Vec<AgentSpec> = (0..cfg.agents)
        .map(|i| {
            let mut pick = rng.gen_range(0.0..total);
            let mut persona = *cfg.mix.keys().next().expect("non-empty mix");
            for (p, w) in &cfg.mix {
                if pick < *w {
                    persona = *p;
                    break;
                }
                pick -= w;
            }
            AgentSpec {
                device_id: format!("agent{i:0width$}"),
                persona,
                home: city.sample_block_point(&mut rng, true, cfg.home_inset_m),
                work: city.sample_block_point(&mut rng, false, cfg.home_inset_m),
                p_home: cfg.p_home,
                sigma_m: cfg.sigma_m,
                night_pings: cfg.night_pings,
                day_pings: cfg.day_pings,
                commute_speed_mps: cfg.commute_speed_mps,
            }
        })
        .collect();
    for s in &specs {
        s.validate()?;
    }
    Ok(specs)
}
