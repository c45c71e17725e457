use std::collections::HashMap;

use crate::geo::PlanarPoint;

/// Uniform hash grid over planar points for exact radius queries.
pub(crate) struct GridIndex<'a> {
    points: &'a [PlanarPoint],
    cell: f64,
    cells: HashMap<(i64, i64), Vec<usize>>,
}

impl<'a> GridIndex<'a> {
    pub fn new(points: &'a [PlanarPoint], cell: f64) -> Self {
        let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(p, cell)).or_default().push(i);
        }
        GridIndex { points, cell, cells }
    }

    fn key(p: &PlanarPoint, cell: f64) -> (i64, i64) {
        ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64)
    }

    /// Calls `f` with every index whose point lies within `radius` (inclusive)
    /// of `q`. Visit order is deterministic.
    pub fn for_each_within(&self, q: &PlanarPoint, radius: f64, mut f: impl FnMut(usize)) {
        let r2 = radius * radius;
        let span = (radius / self.cell).ceil() as i64;
        let (cx, cy) = Self::key(q, self.cell);
        for dx in -span..=span {
            for dy in -span..=span {
                if let Some(bucket) = self.cells.get(&(cx + dx, cy + dy)) {
                    for &i in bucket {
                        if self.points[i].dist_sq(q) <= r2 {
                            f(i);
                        }
                    }
                }
            }
        }
    }

    pub fn count_within(&self, q: &PlanarPoint, radius: f64) -> usize {
        let mut n = 0;
        self.for_each_within(q, radius, |_| n += 1);
        n
    }
}
