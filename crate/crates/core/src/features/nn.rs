use std::collections::HashMap;

use nalgebra::Point3;

/// Exact fixed-radius nearest-neighbor index on a uniform hash grid.
///
/// The cell edge equals the build radius, so every point within that radius
/// of a query lies in the 27 surrounding cells.
#[derive(Debug)]
pub struct NearestNeighbor<'a> {
    points: &'a [Point3<f64>],
    cell: f64,
    grid: HashMap<(i64, i64, i64), Vec<usize>>,
}

impl<'a> NearestNeighbor<'a> {
    pub fn build(points: &'a [Point3<f64>], radius: f64) -> Self {
        let mut grid: HashMap<_, Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            grid.entry(Self::key(p, radius)).or_default().push(i);
        }
        Self {
            points,
            cell: radius,
            grid,
        }
    }

    fn key(p: &Point3<f64>, cell: f64) -> (i64, i64, i64) {
        (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        )
    }

    /// Nearest point with distance `<= radius` (`radius` must not exceed the
    /// build radius). Equal distances resolve to the lowest index.
    pub fn nearest_within(&self, q: &Point3<f64>, radius: f64) -> Option<(usize, f64)> {
        debug_assert!(radius <= self.cell);
        let (cx, cy, cz) = Self::key(q, self.cell);
        let mut best: Option<(usize, f64)> = None;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(bucket) = self.grid.get(&(cx + dx, cy + dy, cz + dz)) else {
                        continue;
                    };
                    for &i in bucket {
                        let d2 = (self.points[i] - q).norm_squared();
                        let better = match best {
                            None => true,
                            Some((bi, bd)) => d2 < bd || (d2 == bd && i < bi),
                        };
                        if better {
                            best = Some((i, d2));
                        }
                    }
                }
            }
        }
        best.map(|(i, d2)| (i, d2.sqrt()))
            .filter(|&(_, d)| d <= radius)
    }
}
