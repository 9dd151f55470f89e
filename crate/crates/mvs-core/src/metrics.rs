//! Depth-map and point-cloud evaluation metrics.

use nalgebra::Vector3;
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::fusion::PointCloud;
use crate::par;

/// Mean absolute depth error and the fractions of pixels exceeding 1 and 3
/// depth units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthMetrics {
    pub epe: f64,
    pub e1: f64,
    pub e3: f64,
}

pub fn depth_metrics(
    pred: &Array2<f64>,
    gt: &Array2<f64>,
    valid: &Array2<bool>,
) -> Result<DepthMetrics> {
    if pred.dim() != gt.dim() || pred.dim() != valid.dim() {
        return Err(Error::usage("metric input shapes disagree"));
    }
    let mut n = 0usize;
    let mut abs_sum = 0.0;
    let mut over1 = 0usize;
    let mut over3 = 0usize;
    for ((p, g), &v) in pred.iter().zip(gt.iter()).zip(valid.iter()) {
        if !v {
            continue;
        }
        let err = (p - g).abs();
        abs_sum += err;
        if err > 1.0 {
            over1 += 1;
        }
        if err > 3.0 {
            over3 += 1;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::usage("no valid pixels to evaluate"));
    }
    Ok(DepthMetrics {
        epe: abs_sum / n as f64,
        e1: over1 as f64 / n as f64,
        e3: over3 as f64 / n as f64,
    })
}

/// Accuracy (reconstruction to GT), completeness (GT to reconstruction) and
/// their mean, with per-point distances capped at `dist_cap`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CloudMetrics {
    pub accuracy: f64,
    pub completeness: f64,
    pub overall: f64,
}

pub fn cloud_metrics(recon: &PointCloud, gt: &PointCloud, dist_cap: f64) -> Result<CloudMetrics> {
    if recon.is_empty() || gt.is_empty() {
        return Err(Error::usage("point clouds must be non-empty"));
    }
    if dist_cap <= 0.0 {
        return Err(Error::config("distance cap must be positive"));
    }
    let accuracy = mean_capped_nn(&recon.points, &gt.points, dist_cap);
    let completeness = mean_capped_nn(&gt.points, &recon.points, dist_cap);
    Ok(CloudMetrics {
        accuracy,
        completeness,
        overall: 0.5 * (accuracy + completeness),
    })
}

fn mean_capped_nn(from: &[Vector3<f64>], to: &[Vector3<f64>], cap: f64) -> f64 {
    let grid = GridIndex::build(to);
    let sums = par::map_indexed(from.len(), |i| grid.nearest_distance(from[i]).min(cap));
    sums.iter().sum::<f64>() / from.len() as f64
}

/// Uniform-grid accelerator for exact nearest-neighbor distances.
pub struct GridIndex<'a> {
    points: &'a [Vector3<f64>],
    cells: Vec<Vec<u32>>,
    dims: [usize; 3],
    origin: Vector3<f64>,
    cell: f64,
}

impl<'a> GridIndex<'a> {
    pub fn build(points: &'a [Vector3<f64>]) -> Self {
        assert!(!points.is_empty());
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let extent = hi - lo;
        let diag = extent.norm().max(1e-12);
        // Aim for a handful of points per cell; cap the grid to keep memory
        // bounded on degenerate (flat or linear) clouds.
        let cell = (diag / (points.len() as f64).cbrt().max(1.0)).max(diag / 256.0);
        let dims = [
            ((extent.x / cell).floor() as usize + 1).min(512),
            ((extent.y / cell).floor() as usize + 1).min(512),
            ((extent.z / cell).floor() as usize + 1).min(512),
        ];
        let mut cells = vec![Vec::new(); dims[0] * dims[1] * dims[2]];
        for (i, p) in points.iter().enumerate() {
            let idx = Self::cell_of(p, &lo, cell, &dims);
            cells[idx].push(i as u32);
        }
        Self {
            points,
            cells,
            dims,
            origin: lo,
            cell,
        }
    }

    fn cell_coords(
        p: &Vector3<f64>,
        origin: &Vector3<f64>,
        cell: f64,
        dims: &[usize; 3],
    ) -> [usize; 3] {
        let mut c = [0usize; 3];
        for a in 0..3 {
            let f = ((p[a] - origin[a]) / cell).floor();
            c[a] = (f.max(0.0) as usize).min(dims[a] - 1);
        }
        c
    }

    fn cell_of(p: &Vector3<f64>, origin: &Vector3<f64>, cell: f64, dims: &[usize; 3]) -> usize {
        let c = Self::cell_coords(p, origin, cell, dims);
        (c[2] * dims[1] + c[1]) * dims[0] + c[0]
    }

    /// Exact nearest-neighbor distance via expanding ring search.
    pub fn nearest_distance(&self, p: Vector3<f64>) -> f64 {
        let center = Self::cell_coords(&p, &self.origin, self.cell, &self.dims);
        let max_ring = *self.dims.iter().max().expect("3 dims");
        let mut best = f64::INFINITY;
        for ring in 0..=max_ring {
            // Every cell beyond ring `k` lies outside the box of cells
            // within Chebyshev distance k; once the best distance is closer
            // than that box's boundary, no farther ring can win.
            if ring > 0 && best.is_finite() {
                let bound = self.dist_to_ring_lower_bound(&p, &center, ring);
                if best <= bound {
                    break;
                }
            }
            self.scan_ring(&p, &center, ring, &mut best);
        }
        best.sqrt()
    }

    /// Lower bound on the squared distance from `p` to any cell at Chebyshev
    /// ring `ring` around `center`: the squared distance from `p` to the
    /// outside of the box covered by rings `< ring`.
    fn dist_to_ring_lower_bound(&self, p: &Vector3<f64>, center: &[usize; 3], ring: usize) -> f64 {
        let mut min_exit = f64::INFINITY;
        let mut outside = false;
        for a in 0..3 {
            let lo_cell = center[a] as isize - (ring as isize - 1);
            let hi_cell = center[a] as isize + (ring as isize - 1);
            let lo = self.origin[a] + lo_cell as f64 * self.cell;
            let hi = self.origin[a] + (hi_cell + 1) as f64 * self.cell;
            if p[a] < lo || p[a] > hi {
                outside = true;
                break;
            }
            min_exit = min_exit.min((p[a] - lo).min(hi - p[a]));
        }
        if outside {
            0.0
        } else {
            min_exit * min_exit
        }
    }

    fn scan_ring(&self, p: &Vector3<f64>, center: &[usize; 3], ring: usize, best: &mut f64) {
        let r = ring as isize;
        for dz in -r..=r {
            for dy in -r..=r {
                for dx in -r..=r {
                    if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                        continue;
                    }
                    let cx = center[0] as isize + dx;
                    let cy = center[1] as isize + dy;
                    let cz = center[2] as isize + dz;
                    if cx < 0
                        || cy < 0
                        || cz < 0
                        || cx >= self.dims[0] as isize
                        || cy >= self.dims[1] as isize
                        || cz >= self.dims[2] as isize
                    {
                        continue;
                    }
                    let idx =
                        (cz as usize * self.dims[1] + cy as usize) * self.dims[0] + cx as usize;
                    for &pi in &self.cells[idx] {
                        let d2 = (self.points[pi as usize] - p).norm_squared();
                        if d2 < *best {
                            *best = d2;
                        }
                    }
                }
            }
        }
    }
}
