//! Polygon layers (land use, zones) with an R-tree over feature bounding
//! boxes, loaded from GeoJSON feature collections.

use std::collections::BTreeSet;
use std::path::Path;

use geojson::{GeoJson, Value};
use rstar::primitives::{GeomWithData, Rectangle};
use rstar::{RTree, AABB};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{GeoPoint, LocalFrame, PlanarPoint};

/// Points closer than this to an edge count as on the boundary.
const BOUNDARY_EPS_M: f64 = 1e-6;

/// `[min_lon, min_lat, max_lon, max_lat]`.
pub type BBox = [f64; 4];

/// A polygon: exterior ring followed by holes, each closed.
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    rings: Vec<Vec<GeoPoint>>,
    bbox: BBox,
}

impl Polygon {
    /// Builds a polygon from `(lon, lat)` rings. Unclosed rings are closed.
    pub fn new(rings: Vec<Vec<(f64, f64)>>) -> Result<Self> {
        let mut out = Vec::with_capacity(rings.len());
        for ring in rings {
            let mut pts = Vec::with_capacity(ring.len() + 1);
            for (lon, lat) in ring {
                pts.push(GeoPoint::new(lat, lon)?);
            }
            if pts.first() != pts.last() {
                pts.push(pts[0]);
            }
            if pts.len() < 4 {
                return Err(Error::Format("polygon ring has fewer than three distinct vertices".into()));
            }
            out.push(pts);
        }
        if out.is_empty() {
            return Err(Error::Format("polygon without rings".into()));
        }
        let mut bbox = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
        for p in &out[0] {
            bbox[0] = bbox[0].min(p.lon);
            bbox[1] = bbox[1].min(p.lat);
            bbox[2] = bbox[2].max(p.lon);
            bbox[3] = bbox[3].max(p.lat);
        }
        Ok(Polygon { rings: out, bbox })
    }

    /// Axis-aligned rectangle, convenient for tests and synthetic maps.
    pub fn rect(min_lon: f64, min_lat: f64, max_lon: f64, max_lat: f64) -> Result<Self> {
        Polygon::new(vec![vec![
            (min_lon, min_lat),
            (max_lon, min_lat),
            (max_lon, max_lat),
            (min_lon, max_lat),
        ]])
    }

    pub fn bbox(&self) -> BBox {
        self.bbox
    }

    pub fn rings(&self) -> &[Vec<GeoPoint>] {
        &self.rings
    }

    fn planar_rings(&self, at: GeoPoint) -> Vec<Vec<PlanarPoint>> {
        let frame = LocalFrame::new(at);
        self.rings
            .iter()
            .map(|r| r.iter().map(|p| frame.project_unchecked(*p)).collect())
            .collect()
    }

    /// Meters from `p` to the polygon; zero inside or on the boundary.
    pub fn distance_m(&self, p: GeoPoint) -> f64 {
        let rings = self.planar_rings(p);
        let origin = PlanarPoint::default();
        let mut min_edge = f64::INFINITY;
        let mut inside = false;
        for ring in &rings {
            for w in ring.windows(2) {
                min_edge = min_edge.min(segment_distance(&origin, &w[0], &w[1]));
                let (a, b) = (&w[0], &w[1]);
                if (a.y > 0.0) != (b.y > 0.0) {
                    let x = a.x + (0.0 - a.y) * (b.x - a.x) / (b.y - a.y);
                    if x > 0.0 {
                        inside = !inside;
                    }
                }
            }
        }
        if inside || min_edge <= BOUNDARY_EPS_M {
            0.0
        } else {
            min_edge
        }
    }

    pub fn contains(&self, p: GeoPoint) -> bool {
        p.lon >= self.bbox[0] - 1e-9
            && p.lon <= self.bbox[2] + 1e-9
            && p.lat >= self.bbox[1] - 1e-9
            && p.lat <= self.bbox[3] + 1e-9
            && self.distance_m(p) == 0.0
    }
}

fn segment_distance(p: &PlanarPoint, a: &PlanarPoint, b: &PlanarPoint) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    if len2 == 0.0 {
        return p.dist(a);
    }
    let t = (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0);
    p.dist(&PlanarPoint::new(a.x + t * dx, a.y + t * dy))
}

/// A (multi)polygon feature with attached data.
#[derive(Debug, Clone)]
pub struct Feature<T> {
    pub parts: Vec<Polygon>,
    pub data: T,
}

impl<T> Feature<T> {
    fn bbox(&self) -> BBox {
        self.parts.iter().fold(
            [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY],
            |acc, p| {
                let b = p.bbox();
                [acc[0].min(b[0]), acc[1].min(b[1]), acc[2].max(b[2]), acc[3].max(b[3])]
            },
        )
    }

    pub fn distance_m(&self, p: GeoPoint) -> f64 {
        self.parts.iter().map(|poly| poly.distance_m(p)).fold(f64::INFINITY, f64::min)
    }

    pub fn contains(&self, p: GeoPoint) -> bool {
        self.parts.iter().any(|poly| poly.contains(p))
    }
}

/// Features in file order with a bounding-box R-tree.
#[derive(Debug, Clone)]
pub struct PolygonIndex<T> {
    features: Vec<Feature<T>>,
    tree: RTree<GeomWithData<Rectangle<[f64; 2]>, usize>>,
}

impl<T> PolygonIndex<T> {
    pub fn new(features: Vec<Feature<T>>) -> Self {
        let boxes = features
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let b = f.bbox();
                GeomWithData::new(Rectangle::from_corners([b[0], b[1]], [b[2], b[3]]), i)
            })
            .collect();
        PolygonIndex {
            tree: RTree::bulk_load(boxes),
            features,
        }
    }

    pub fn features(&self) -> &[Feature<T>] {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Bounding box of all features, `None` when empty.
    pub fn extent(&self) -> Option<BBox> {
        (!self.features.is_empty()).then(|| {
            self.features.iter().fold(
                [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY],
                |acc, f| {
                    let b = f.bbox();
                    [acc[0].min(b[0]), acc[1].min(b[1]), acc[2].max(b[2]), acc[3].max(b[3])]
                },
            )
        })
    }

    /// Indices of features whose bounding box comes within `radius_m` of `p`,
    /// ascending.
    pub fn candidates(&self, p: GeoPoint, radius_m: f64) -> Vec<usize> {
        let frame = LocalFrame::new(p);
        let dlat = radius_m / frame.m_per_deg_lat() + 1e-9;
        let dlon = radius_m / frame.m_per_deg_lon().max(1e-9) + 1e-9;
        let env = AABB::from_corners([p.lon - dlon, p.lat - dlat], [p.lon + dlon, p.lat + dlat]);
        let mut out: Vec<usize> = self
            .tree
            .locate_in_envelope_intersecting(&env)
            .map(|g| g.data)
            .collect();
        out.sort_unstable();
        out
    }

    /// First feature in file order containing `p` (boundary inclusive).
    pub fn first_containing(&self, p: GeoPoint) -> Option<&Feature<T>> {
        self.candidates(p, 0.0)
            .into_iter()
            .map(|i| &self.features[i])
            .find(|f| f.contains(p))
    }

    /// Distance to the nearest feature accepted by `keep`, if within `max_m`.
    pub fn nearest_within(&self, p: GeoPoint, max_m: f64, keep: impl Fn(&T) -> bool) -> Option<f64> {
        self.candidates(p, max_m)
            .into_iter()
            .filter(|&i| keep(&self.features[i].data))
            .map(|i| self.features[i].distance_m(p))
            .filter(|d| *d <= max_m)
            .fold(None, |acc: Option<f64>, d| Some(acc.map_or(d, |a| a.min(d))))
    }
}

fn polygons_of(value: &Value) -> Result<Option<Vec<Polygon>>> {
    let conv = |rings: &Vec<Vec<Vec<f64>>>| -> Result<Polygon> {
        Polygon::new(
            rings
                .iter()
                .map(|r| {
                    r.iter()
                        .map(|pos| match pos.as_slice() {
                            [lon, lat, ..] => Ok((*lon, *lat)),
                            _ => Err(Error::Format("position with fewer than two coordinates".into())),
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?,
        )
    };
    Ok(match value {
        Value::Polygon(rings) => Some(vec![conv(rings)?]),
        Value::MultiPolygon(polys) => Some(polys.iter().map(conv).collect::<Result<Vec<_>>>()?),
        _ => None,
    })
}

/// Reads polygon features from a GeoJSON document; non-polygonal features
/// are skipped. `extract` maps the feature's properties to its data.
pub fn read_features<T>(
    text: &str,
    mut extract: impl FnMut(&serde_json::Map<String, serde_json::Value>) -> Result<T>,
) -> Result<Vec<Feature<T>>> {
    let gj: GeoJson = text
        .parse()
        .map_err(|e: geojson::Error| Error::Format(format!("invalid GeoJSON: {e}")))?;
    let features = match gj {
        GeoJson::FeatureCollection(fc) => fc.features,
        GeoJson::Feature(f) => vec![f],
        GeoJson::Geometry(_) => return Err(Error::Format("expected a FeatureCollection".into())),
    };
    let empty = serde_json::Map::new();
    let mut out = Vec::new();
    for f in features {
        let Some(geom) = f.geometry.as_ref() else { continue };
        let Some(parts) = polygons_of(&geom.value)? else { continue };
        let data = extract(f.properties.as_ref().unwrap_or(&empty))?;
        out.push(Feature { parts, data });
    }
    Ok(out)
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn property_string(v: &serde_json::Value) -> Option<String> {
    match v {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

/// How land-use categories are read from feature properties.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LandUseSchema {
    pub category_key: String,
    pub residential_values: BTreeSet<String>,
}

impl Default for LandUseSchema {
    fn default() -> Self {
        LandUseSchema {
            category_key: "landuse".into(),
            residential_values: ["residential".to_string()].into_iter().collect(),
        }
    }
}

/// Category-labelled land-use polygons.
#[derive(Debug, Clone)]
pub struct LandUseMap {
    index: PolygonIndex<String>,
    residential: BTreeSet<String>,
}

impl LandUseMap {
    pub fn new(features: Vec<Feature<String>>, residential: BTreeSet<String>) -> Self {
        LandUseMap {
            index: PolygonIndex::new(features),
            residential,
        }
    }

    pub fn from_geojson(text: &str, schema: &LandUseSchema) -> Result<Self> {
        let features = read_features(text, |props| {
            Ok(props
                .get(&schema.category_key)
                .and_then(property_string)
                .unwrap_or_default())
        })?;
        Ok(LandUseMap::new(features, schema.residential_values.clone()))
    }

    pub fn load(path: &Path, schema: &LandUseSchema) -> Result<Self> {
        Self::from_geojson(&read_text(path)?, schema)
    }

    pub fn index(&self) -> &PolygonIndex<String> {
        &self.index
    }

    pub fn is_residential(&self, category: &str) -> bool {
        self.residential.contains(category)
    }

    pub fn has_residential(&self) -> bool {
        self.index.features().iter().any(|f| self.is_residential(&f.data))
    }

    /// Distance in meters from `p` to the nearest residential polygon, if it
    /// is at most `max_m`.
    pub fn residential_distance(&self, p: GeoPoint, max_m: f64) -> Option<f64> {
        self.index.nearest_within(p, max_m, |c| self.is_residential(c))
    }
}

/// A zone (tract, county) with optional monthly median income.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Zone {
    pub zone_id: String,
    pub median_income_monthly: Option<f64>,
}

/// Zone polygons; lookups return the first containing zone in file order.
#[derive(Debug, Clone)]
pub struct ZoneMap {
    index: PolygonIndex<Zone>,
}

impl ZoneMap {
    pub fn new(features: Vec<Feature<Zone>>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for f in &features {
            if !seen.insert(f.data.zone_id.clone()) {
                return Err(Error::Format(format!("duplicate zone id `{}`", f.data.zone_id)));
            }
        }
        Ok(ZoneMap {
            index: PolygonIndex::new(features),
        })
    }

    pub fn from_geojson(text: &str) -> Result<Self> {
        let features = read_features(text, |props| {
            let zone_id = props
                .get("zone_id")
                .and_then(property_string)
                .ok_or_else(|| Error::Format("zone feature without `zone_id`".into()))?;
            let median_income_monthly = props.get("median_income_monthly").and_then(|v| v.as_f64());
            Ok(Zone {
                zone_id,
                median_income_monthly,
            })
        })?;
        ZoneMap::new(features)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_geojson(&read_text(path)?)
    }

    pub fn zone_of(&self, p: GeoPoint) -> Option<&Zone> {
        self.index.first_containing(p).map(|f| &f.data)
    }

    pub fn zones(&self) -> impl Iterator<Item = &Zone> {
        self.index.features().iter().map(|f| &f.data)
    }
}

/// Serializes features as a GeoJSON FeatureCollection.
pub fn features_to_geojson<T>(features: &[Feature<T>], props: impl Fn(&T) -> serde_json::Map<String, serde_json::Value>) -> String {
    let ring = |r: &Vec<GeoPoint>| -> Vec<Vec<f64>> { r.iter().map(|p| vec![p.lon, p.lat]).collect() };
    let fc = geojson::FeatureCollection {
        bbox: None,
        foreign_members: None,
        features: features
            .iter()
            .map(|f| {
                let value = if f.parts.len() == 1 {
                    Value::Polygon(f.parts[0].rings().iter().map(ring).collect())
                } else {
                    Value::MultiPolygon(f.parts.iter().map(|p| p.rings().iter().map(ring).collect()).collect())
                };
                geojson::Feature {
                    bbox: None,
                    geometry: Some(geojson::Geometry::new(value)),
                    id: None,
                    properties: Some(props(&f.data)),
                    foreign_members: None,
                }
            })
            .collect(),
    };
    GeoJson::FeatureCollection(fc).to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::haversine;

    const M_PER_DEG: f64 = 111_194.926_644_558_7;

    fn m(v: f64) -> f64 {
        v / M_PER_DEG
    }

    fn square(side_m: f64) -> Polygon {
        Polygon::rect(0.0, 0.0, m(side_m), m(side_m)).unwrap()
    }

    #[test]
    fn inside_outside_boundary() {
        let sq = square(100.0);
        assert_eq!(sq.distance_m(GeoPoint { lat: m(50.0), lon: m(50.0) }), 0.0);
        assert_eq!(sq.distance_m(GeoPoint { lat: m(50.0), lon: m(100.0) }), 0.0);
        assert_eq!(sq.distance_m(GeoPoint { lat: 0.0, lon: 0.0 }), 0.0);
        let d = sq.distance_m(GeoPoint { lat: m(50.0), lon: m(110.0) });
        assert!((d - 10.0).abs() < 1e-6, "{d}");
        let corner = GeoPoint { lat: m(103.0), lon: m(104.0) };
        let d = sq.distance_m(corner);
        let expected = haversine(corner, GeoPoint { lat: m(100.0), lon: m(100.0) });
        assert!((d - expected).abs() < 1e-3);
    }

    #[test]
    fn holes_are_outside() {
        let poly = Polygon::new(vec![
            vec![(0.0, 0.0), (m(100.0), 0.0), (m(100.0), m(100.0)), (0.0, m(100.0))],
            vec![(m(40.0), m(40.0)), (m(60.0), m(40.0)), (m(60.0), m(60.0)), (m(40.0), m(60.0))],
        ])
        .unwrap();
        let d = poly.distance_m(GeoPoint { lat: m(50.0), lon: m(50.0) });
        assert!((d - 10.0).abs() < 1e-6);
        assert!(poly.contains(GeoPoint { lat: m(20.0), lon: m(20.0) }));
    }

    #[test]
    fn degenerate_ring_rejected() {
        assert!(Polygon::new(vec![vec![(0.0, 0.0), (1.0, 1.0)]]).is_err());
    }

    const LANDUSE: &str = r#"{"type":"FeatureCollection","features":[
      {"type":"Feature","properties":{"landuse":"residential"},
       "geometry":{"type":"Polygon","coordinates":[[[0,0],[0.001,0],[0.001,0.001],[0,0.001],[0,0]]]}},
      {"type":"Feature","properties":{"landuse":"commercial"},
       "geometry":{"type":"MultiPolygon","coordinates":[[[[0.002,0],[0.003,0],[0.003,0.001],[0.002,0.001],[0.002,0]]]]}},
      {"type":"Feature","properties":{"landuse":"residential"},
       "geometry":{"type":"Point","coordinates":[0.5,0.5]}}
    ]}"#;

    #[test]
    fn land_use_from_geojson() {
        let map = LandUseMap::from_geojson(LANDUSE, &LandUseSchema::default()).unwrap();
        assert_eq!(map.index().len(), 2);
        assert!(map.has_residential());
        let inside = GeoPoint { lat: 0.0005, lon: 0.0005 };
        assert_eq!(map.residential_distance(inside, 50.0), Some(0.0));
        // inside the commercial block, > 100 m from residential
        assert_eq!(map.residential_distance(GeoPoint { lat: 0.0005, lon: 0.0025 }, 50.0), None);
        let near = GeoPoint { lat: 0.0005, lon: 0.001 + m(20.0) };
        let d = map.residential_distance(near, 50.0).unwrap();
        assert!((d - 20.0).abs() < 1e-6);
    }

    #[test]
    fn zones_first_match_and_duplicates() {
        let text = r#"{"type":"FeatureCollection","features":[
          {"type":"Feature","properties":{"zone_id":"A","median_income_monthly":1000},
           "geometry":{"type":"Polygon","coordinates":[[[0,0],[1,0],[1,1],[0,1],[0,0]]]}},
          {"type":"Feature","properties":{"zone_id":7},
           "geometry":{"type":"Polygon","coordinates":[[[1,0],[2,0],[2,1],[1,1],[1,0]]]}}
        ]}"#;
        let zones = ZoneMap::from_geojson(text).unwrap();
        let a = zones.zone_of(GeoPoint { lat: 0.5, lon: 0.5 }).unwrap();
        assert_eq!(a.zone_id, "A");
        assert_eq!(a.median_income_monthly, Some(1000.0));
        // shared edge: first in file order
        assert_eq!(zones.zone_of(GeoPoint { lat: 0.5, lon: 1.0 }).unwrap().zone_id, "A");
        assert_eq!(zones.zone_of(GeoPoint { lat: 0.5, lon: 1.5 }).unwrap().zone_id, "7");
        assert!(zones.zone_of(GeoPoint { lat: 5.0, lon: 5.0 }).is_none());

        let dup = text.replace("\"zone_id\":7", "\"zone_id\":\"A\"");
        assert!(ZoneMap::from_geojson(&dup).is_err());
    }

    #[test]
    fn geojson_round_trip() {
        let features = vec![Feature { parts: vec![square(100.0)], data: "residential".to_string() }];
        let text = features_to_geojson(&features, |c| {
            let mut m = serde_json::Map::new();
            m.insert("landuse".into(), c.clone().into());
            m
        });
        let map = LandUseMap::from_geojson(&text, &LandUseSchema::default()).unwrap();
        assert_eq!(map.index().features()[0].parts[0], features[0].parts[0]);
    }
}
