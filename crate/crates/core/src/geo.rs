//! Coordinate primitives shared by every other module.
//!
//! Clustering and grid work happens in a [`LocalFrame`]: an equirectangular
//! projection anchored at some origin, giving planar meters east/north. At city
//! scale the distortion is far below the kernel radii used downstream.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean Earth radius used for every great-circle computation.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Default radius around a frame origin inside which projection is accepted.
pub const DEFAULT_FRAME_DOMAIN_M: f64 = 100_000.0;

/// A WGS-84 position in decimal degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    /// Builds a validated point.
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !(lat.is_finite() && lon.is_finite()) {
            return Err(Error::arg(format!("non-finite coordinate ({lat}, {lon})")));
        }
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(Error::arg(format!("coordinate out of range ({lat}, {lon})")));
        }
        Ok(GeoPoint { lat, lon })
    }

    pub fn is_valid(&self) -> bool {
        self.lat.is_finite()
            && self.lon.is_finite()
            && (-90.0..=90.0).contains(&self.lat)
            && (-180.0..=180.0).contains(&self.lon)
    }
}

/// Planar coordinates in meters (east, north) relative to a frame origin.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PlanarPoint {
    pub x: f64,
    pub y: f64,
}

impl PlanarPoint {
    pub const fn new(x: f64, y: f64) -> Self {
        PlanarPoint { x, y }
    }

    #[inline]
    pub fn dist_sq(&self, other: &PlanarPoint) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }

    #[inline]
    pub fn dist(&self, other: &PlanarPoint) -> f64 {
        self.dist_sq(other).sqrt()
    }
}

/// Great-circle distance in meters.
pub fn haversine(a: GeoPoint, b: GeoPoint) -> f64 {
    let lat1 = a.lat.to_radians();
    let lat2 = b.lat.to_radians();
    let dlat = lat2 - lat1;
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    // clamp guards against h creeping past 1 through rounding on antipodes
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Equirectangular projection around an origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalFrame {
    origin: GeoPoint,
    m_per_deg_lat: f64,
    m_per_deg_lon: f64,
    domain_m: f64,
}

impl LocalFrame {
    pub fn new(origin: GeoPoint) -> Self {
        Self::with_domain(origin, DEFAULT_FRAME_DOMAIN_M)
    }

    /// A frame accepting points up to `domain_m` from its origin.
    pub fn with_domain(origin: GeoPoint, domain_m: f64) -> Self {
        let m_per_deg_lat = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
        LocalFrame {
            origin,
            m_per_deg_lat,
            m_per_deg_lon: m_per_deg_lat * origin.lat.to_radians().cos(),
            domain_m,
        }
    }

    pub fn origin(&self) -> GeoPoint {
        self.origin
    }

    pub fn m_per_deg_lat(&self) -> f64 {
        self.m_per_deg_lat
    }

    pub fn m_per_deg_lon(&self) -> f64 {
        self.m_per_deg_lon
    }

    /// Projects `p`, failing if it lies outside the frame domain.
    pub fn project(&self, p: GeoPoint) -> Result<PlanarPoint> {
        let d = haversine(self.origin, p);
        if d > self.domain_m {
            return Err(Error::FrameDomain {
                lat: p.lat,
                lon: p.lon,
                distance_m: d,
                domain_m: self.domain_m,
            });
        }
        Ok(self.project_unchecked(p))
    }

    #[inline]
    pub fn project_unchecked(&self, p: GeoPoint) -> PlanarPoint {
        PlanarPoint {
            x: (p.lon - self.origin.lon) * self.m_per_deg_lon,
            y: (p.lat - self.origin.lat) * self.m_per_deg_lat,
        }
    }

    #[inline]
    pub fn unproject(&self, q: PlanarPoint) -> GeoPoint {
        GeoPoint {
            lat: self.origin.lat + q.y / self.m_per_deg_lat,
            lon: self.origin.lon + q.x / self.m_per_deg_lon,
        }
    }
}

/// Arithmetic mean of planar points. Panics on empty input; callers guard.
pub(crate) fn planar_mean<'a>(points: impl IntoIterator<Item = &'a PlanarPoint>) -> PlanarPoint {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for p in points {
        sx += p.x;
        sy += p.y;
        n += 1;
    }
    assert!(n > 0, "planar_mean of empty set");
    PlanarPoint::new(sx / n as f64, sy / n as f64)
}

/// Mean of the points in a frame anchored at the first point.
pub fn centroid(points: &[GeoPoint]) -> Result<GeoPoint> {
    let first = *points
        .first()
        .ok_or_else(|| Error::arg("centroid of an empty point set"))?;
    let frame = LocalFrame::new(first);
    let projected: Vec<PlanarPoint> = points.iter().map(|p| frame.project_unchecked(*p)).collect();
    Ok(frame.unproject(planar_mean(&projected)))
}

/// Member point minimizing the summed haversine distance to all others.
/// Ties resolve to the earliest index.
pub fn medoid(points: &[GeoPoint]) -> Result<GeoPoint> {
    if points.is_empty() {
        return Err(Error::arg("medoid of an empty point set"));
    }
    let mut best = (0usize, f64::INFINITY);
    for (i, p) in points.iter().enumerate() {
        let total: f64 = points.iter().map(|q| haversine(*p, *q)).sum();
        if total < best.1 {
            best = (i, total);
        }
    }
    Ok(points[best.0])
}
