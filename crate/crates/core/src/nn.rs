//! Exact nearest-neighbour queries on a uniform voxel grid.

use nalgebra::Vector3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    L1,
    L2,
}

impl Metric {
    pub fn distance(self, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
        match self {
            Metric::L1 => (a - b).abs().sum(),
            Metric::L2 => (a - b).norm(),
        }
    }
}

/// Brute-force nearest neighbour; ties resolve to the lowest index.
pub fn nearest_brute_force(
    points: &[Vector3<f64>],
    q: &Vector3<f64>,
    metric: Metric,
) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, p) in points.iter().enumerate() {
        let d = metric.distance(p, q);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

pub struct PointGrid<'a> {
    points: &'a [Vector3<f64>],
    origin: Vector3<f64>,
    cell: f64,
    dims: [i64; 3],
    // cell_start[c]..cell_start[c+1] indexes into `order`
    cell_start: Vec<usize>,
    order: Vec<usize>,
}

impl<'a> PointGrid<'a> {
    pub fn new(points: &'a [Vector3<f64>]) -> Self {
        assert!(!points.is_empty(), "grid needs at least one point");
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let extent = (hi - lo).max().max(1e-12);
        let per_axis = (points.len() as f64).cbrt().ceil().max(1.0);
        let cell = extent / per_axis;
        let dims: [i64; 3] =
            std::array::from_fn(|k| (((hi[k] - lo[k]) / cell).floor() as i64 + 1).max(1));
        let n_cells = (dims[0] * dims[1] * dims[2]) as usize;

        let mut grid = PointGrid {
            points,
            origin: lo,
            cell,
            dims,
            cell_start: vec![0; n_cells + 1],
            order: vec![0; points.len()],
        };
        let ids: Vec<usize> = points.iter().map(|p| grid.flat(grid.cell_of(p))).collect();
        for &c in &ids {
            grid.cell_start[c + 1] += 1;
        }
        for c in 0..n_cells {
            grid.cell_start[c + 1] += grid.cell_start[c];
        }
        let mut fill = grid.cell_start.clone();
        for (i, &c) in ids.iter().enumerate() {
            grid.order[fill[c]] = i;
            fill[c] += 1;
        }
        grid
    }

    fn cell_of(&self, p: &Vector3<f64>) -> [i64; 3] {
        std::array::from_fn(|k| ((p[k] - self.origin[k]) / self.cell).floor() as i64)
    }

    fn flat(&self, c: [i64; 3]) -> usize {
        let c: [i64; 3] = std::array::from_fn(|k| c[k].clamp(0, self.dims[k] - 1));
        ((c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]) as usize
    }

    /// Exact nearest neighbour `(index, distance)`; ties resolve to the lowest index.
    pub fn nearest(&self, q: &Vector3<f64>, metric: Metric) -> (usize, f64) {
        // Rings grow around the nearest grid cell. A cell r+1 rings out is at
        // least r cells away along some axis whether q is inside the grid or not.
        let raw = self.cell_of(q);
        let qc: [i64; 3] = std::array::from_fn(|k| raw[k].clamp(0, self.dims[k] - 1));
        let mut best = (usize::MAX, f64::INFINITY);
        let max_ring = (0..3)
            .map(|k| qc[k].max(self.dims[k] - 1 - qc[k]))
            .max()
            .unwrap_or(0);
        for r in 0..=max_ring {
            let lo: [i64; 3] = std::array::from_fn(|k| (qc[k] - r).max(0));
            let hi: [i64; 3] = std::array::from_fn(|k| (qc[k] + r).min(self.dims[k] - 1));
            for x in lo[0]..=hi[0] {
                for y in lo[1]..=hi[1] {
                    for z in lo[2]..=hi[2] {
                        let ring = (x - qc[0])
                            .abs()
                            .max((y - qc[1]).abs())
                            .max((z - qc[2]).abs());
                        if ring != r {
                            continue;
                        }
                        let c = self.flat([x, y, z]);
                        for &i in &self.order[self.cell_start[c]..self.cell_start[c + 1]] {
                            let d = metric.distance(&self.points[i], q);
                            if d < best.1 || (d == best.1 && i < best.0) {
                                best = (i, d);
                            }
                        }
                    }
                }
            }
            // Every point in ring r+1 or beyond differs by at least r cells on some axis.
            if best.1 < r as f64 * self.cell {
                break;
            }
        }
        best
    }
}
