use serde::{Deserialize, Serialize};

use super::grid::GridIndex;
use crate::error::{Error, Result};
use crate::geo::PlanarPoint;

/// Flat-kernel mean-shift parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MeanShiftConfig {
    /// Kernel radius in meters.
    pub bandwidth: f64,
    /// A seed stops climbing once its next step would be shorter than this.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for MeanShiftConfig {
    fn default() -> Self {
        MeanShiftConfig {
            bandwidth: 250.0,
            tolerance: 0.1,
            max_iterations: 300,
        }
    }
}

impl MeanShiftConfig {
    pub fn with_bandwidth(bandwidth: f64) -> Self {
        MeanShiftConfig {
            bandwidth,
            ..Default::default()
        }
    }
}

/// A group of input points sharing a density mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    /// Ascending indices into the input.
    pub member_indices: Vec<usize>,
    pub mode: PlanarPoint,
    pub size: usize,
    /// Number of input points within one bandwidth of the mode.
    pub support: usize,
}

impl Cluster {
    fn first_member(&self) -> usize {
        self.member_indices[0]
    }
}

fn neighbor_mean(index: &GridIndex<'_>, points: &[PlanarPoint], at: &PlanarPoint, radius: f64) -> Option<PlanarPoint> {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    index.for_each_within(at, radius, |i| {
        sx += points[i].x;
        sy += points[i].y;
        n += 1;
    });
    (n > 0).then(|| PlanarPoint::new(sx / n as f64, sy / n as f64))
}

/// Flat-kernel mean shift with every point as a seed.
///
/// Each seed repeatedly moves to the mean of the points within `bandwidth`
/// until the next move would be shorter than the tolerance; the position it
/// stops at is its mode. Modes closer than `bandwidth` are merged, keeping
/// the one with more kernel support (earlier seed on ties). Every point is
/// then assigned to its nearest surviving mode. Clusters come back sorted by
/// size, largest first, ties broken by earliest member index.
pub fn mean_shift(points: &[PlanarPoint], cfg: &MeanShiftConfig) -> Result<Vec<Cluster>> {
    if points.is_empty() {
        return Err(Error::arg("mean shift over an empty point set"));
    }
    if !(cfg.bandwidth > 0.0) || !cfg.bandwidth.is_finite() {
        return Err(Error::arg("mean shift bandwidth must be positive"));
    }
    let bw = cfg.bandwidth;
    let index = GridIndex::new(points, bw);

    let mut modes: Vec<(PlanarPoint, usize, usize)> = Vec::with_capacity(points.len());
    for (seed, start) in points.iter().enumerate() {
        let mut x = *start;
        for _ in 0..cfg.max_iterations {
            let Some(m) = neighbor_mean(&index, points, &x, bw) else {
                break;
            };
            if m.dist(&x) < cfg.tolerance {
                break;
            }
            x = m;
        }
        modes.push((x, index.count_within(&x, bw), seed));
    }

    modes.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
    let mut centers: Vec<(PlanarPoint, usize)> = Vec::new();
    for (m, support, _) in modes {
        if centers.iter().all(|(c, _)| c.dist(&m) >= bw) {
            centers.push((m, support));
        }
    }

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); centers.len()];
    for (i, p) in points.iter().enumerate() {
        let mut best = (0usize, f64::INFINITY);
        for (k, (c, _)) in centers.iter().enumerate() {
            let d = c.dist_sq(p);
            if d < best.1 {
                best = (k, d);
            }
        }
        members[best.0].push(i);
    }

    let mut clusters: Vec<Cluster> = centers
        .into_iter()
        .zip(members)
        .filter(|(_, m)| !m.is_empty())
        .map(|((mode, support), member_indices)| Cluster {
            size: member_indices.len(),
            member_indices,
            mode,
            support,
        })
        .collect();
    clusters.sort_by(|a, b| b.size.cmp(&a.size).then(a.first_member().cmp(&b.first_member())));
    Ok(clusters)
}

/// The cluster a home detector should pick: most members, then most kernel
/// support at the mode, then earliest member.
pub fn largest_cluster(clusters: &[Cluster]) -> Option<&Cluster> {
    clusters.iter().min_by(|a, b| {
        b.size
            .cmp(&a.size)
            .then(b.support.cmp(&a.support))
            .then(a.first_member().cmp(&b.first_member()))
    })
}
