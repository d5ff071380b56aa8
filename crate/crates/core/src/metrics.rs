//! Geometric evaluation of occupancy grids against ground truth:
//! boundary-surface extraction, (near-field) Chamfer distance, and
//! ray-rendered depth errors. Nearest-neighbor queries go through an
//! exact KD-tree.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Point3, PointCloud};
use crate::grid::{traverse_ray, OccupancyGrid};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty point set: {0}")]
    EmptySet(String),
    #[error("no evaluable rays ({no_hit} without a predicted hit, {too_short} shorter than eps_depth)")]
    NoEvaluableRays { no_hit: usize, too_short: usize },
    #[error("invalid argument: {0}")]
    Invalid(String),
}

/// Exact nearest-neighbor index over 3D points. Ties in distance resolve
/// to the lowest point index.
pub struct KdTree3 {
    pts: Vec<[f64; 3]>,
    nodes: Vec<KdNode>,
    root: usize,
}

struct KdNode {
    point: u32,
    axis: u8,
    left: u32,
    right: u32,
}

const KD_NIL: u32 = u32::MAX;

impl KdTree3 {
    pub fn build(points: &[Point3]) -> Result<KdTree3, MetricsError> {
        if points.is_empty() {
            return Err(MetricsError::EmptySet("KD-tree input".to_string()));
        }
        let pts: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
        let mut idx: Vec<u32> = (0..pts.len() as u32).collect();
        let mut nodes = Vec::with_capacity(pts.len());
        let root = build_node(&pts, &mut idx, 0, &mut nodes);
        Ok(KdTree3 { pts, nodes, root })
    }

    pub fn len(&self) -> usize {
        self.pts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pts.is_empty()
    }

    /// Index and Euclidean distance of the nearest stored point.
    pub fn nearest(&self, q: &Point3) -> (usize, f64) {
        let q = [q.x, q.y, q.z];
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(self.root, &q, &mut best);
        (best.0, best.1.sqrt())
    }

    fn search(&self, node: usize, q: &[f64; 3], best: &mut (usize, f64)) {
        let n = &self.nodes[node];
        let pi = n.point as usize;
        let p = &self.pts[pi];
        let d2 = (0..3).map(|a| (p[a] - q[a]).powi(2)).sum::<f64>();
        if d2 < best.1 || (d2 == best.1 && pi < best.0) {
            *best = (pi, d2);
        }
        let axis = n.axis as usize;
        let delta = q[axis] - p[axis];
        let (near, far) = if delta < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        if near != KD_NIL {
            self.search(near as usize, q, best);
        }
        // The far side can still hold an equal-distance lower index, so
        // prune with <= rather than <.
        if far != KD_NIL && delta * delta <= best.1 {
            self.search(far as usize, q, best);
        }
    }
}

fn build_node(pts: &[[f64; 3]], idx: &mut [u32], depth: usize, nodes: &mut Vec<KdNode>) -> usize {
    let axis = depth % 3;
    let mid = idx.len() / 2;
    idx.select_nth_unstable_by(mid, |a, b| {
        let (pa, pb) = (pts[*a as usize][axis], pts[*b as usize][axis]);
        pa.partial_cmp(&pb)
            .expect("finite coordinates")
            .then(a.cmp(b))
    });
    let point = idx[mid];
    let me = nodes.len();
    nodes.push(KdNode {
        point,
        axis: axis as u8,
        left: KD_NIL,
        right: KD_NIL,
    });
    let (lo, rest) = idx.split_at_mut(mid);
    let hi = &mut rest[1..];
    if !lo.is_empty() {
        let l = build_node(pts, lo, depth + 1, nodes);
        nodes[me].left = l as u32;
    }
    if !hi.is_empty() {
        let r = build_node(pts, hi, depth + 1, nodes);
        nodes[me].right = r as u32;
    }
    me
}

/// Neumaier-compensated sum; order-independent enough that parallel and
/// serial reductions over the same sequence agree.
fn compensated_sum(values: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for &v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

fn mean_nn_distance(from: &[Point3], index: &KdTree3) -> f64 {
    let dists: Vec<f64> = from.par_iter().map(|p| index.nearest(p).1).collect();
    compensated_sum(&dists) / dists.len() as f64
}

/// Symmetric Chamfer distance: the mean of non-squared Euclidean
/// nearest-neighbor distances, averaged over both directions.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64, MetricsError> {
    if a.is_empty() {
        return Err(MetricsError::EmptySet("chamfer set A".to_string()));
    }
    if b.is_empty() {
        return Err(MetricsError::EmptySet("chamfer set B".to_string()));
    }
    let ia = KdTree3::build(&a.points)?;
    let ib = KdTree3::build(&b.points)?;
    Ok(0.5 * (mean_nn_distance(&a.points, &ib) + mean_nn_distance(&b.points, &ia)))
}

/// Chamfer distance restricted to points within `r_nf` meters of the
/// sensor, in both sets.
pub fn near_field_chamfer(
    a: &PointCloud,
    b: &PointCloud,
    sensor: &Point3,
    r_nf: f64,
) -> Result<f64, MetricsError> {
    if !(r_nf > 0.0) {
        return Err(MetricsError::Invalid(format!("r_nf {r_nf} must be > 0")));
    }
    let filter = |cloud: &PointCloud, name: &str| -> Result<PointCloud, MetricsError> {
        let kept: Vec<Point3> = cloud
            .points
            .iter()
            .filter(|p| p.dist(sensor) <= r_nf)
            .cloned()
            .collect();
        if kept.is_empty() {
            return Err(MetricsError::EmptySet(format!(
                "near-field set {name} (r_nf = {r_nf} m leaves no points)"
            )));
        }
        Ok(PointCloud::new(kept))
    };
    let fa = filter(a, "A")?;
    let fb = filter(b, "B")?;
    chamfer(&fa, &fb)
}

/// Centers of occupied boundary voxels: prob >= threshold with at least
/// one face neighbor below threshold. Cells outside the volume count as
/// free, so edge voxels are boundary.
pub fn extract_surface(grid: &OccupancyGrid, threshold: f64) -> PointCloud {
    let spec = &grid.spec;
    let [nx, ny, nz] = spec.dims_unchecked();
    let occupied = |ix: i64, iy: i64, iz: i64| -> bool {
        if ix < 0 || iy < 0 || iz < 0 || ix >= nx as i64 || iy >= ny as i64 || iz >= nz as i64 {
            return false;
        }
        grid.prob_at([ix as usize, iy as usize, iz as usize]) >= threshold
    };
    let mut points = Vec::new();
    // (z, x, y) order matches the dense storage layout.
    for iz in 0..nz {
        for ix in 0..nx {
            for iy in 0..ny {
                let (x, y, z) = (ix as i64, iy as i64, iz as i64);
                if !occupied(x, y, z) {
                    continue;
                }
                let boundary = !occupied(x - 1, y, z)
                    || !occupied(x + 1, y, z)
                    || !occupied(x, y - 1, z)
                    || !occupied(x, y + 1, z)
                    || !occupied(x, y, z - 1)
                    || !occupied(x, y, z + 1);
                if boundary {
                    points.push(spec.center([ix, iy, iz]));
                }
            }
        }
    }
    PointCloud::new(points)
}

/// Rays with GT depth below this are excluded from depth metrics.
pub const EPS_DEPTH: f64 = 1e-6;

/// Occupancy threshold for surface extraction and depth rendering.
pub const OCC_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq)]
pub struct DepthCounts {
    pub total: usize,
    pub evaluated: usize,
    pub no_hit: usize,
    pub too_short: usize,
}

/// Depth L2 and relative (AR) errors: each GT point defines a ray from
/// the sensor; the predicted depth is the entry distance of the first
/// voxel with prob >= 0.5 along it.
pub fn depth_l2_ar(
    grid: &OccupancyGrid,
    gt_cloud: &PointCloud,
    sensor: &Point3,
) -> Result<(f64, f64, DepthCounts), MetricsError> {
    if gt_cloud.is_empty() {
        return Err(MetricsError::EmptySet("depth GT cloud".to_string()));
    }
    let mut counts = DepthCounts {
        total: gt_cloud.len(),
        ..DepthCounts::default()
    };
    // Allow hits slightly past the GT depth: the containing voxel's far
    // side can lie beyond the point itself.
    let diag = grid.spec.voxel_diagonal();
    let per_ray: Vec<Option<(f64, f64)>> = gt_cloud
        .points
        .par_iter()
        .map(|p| {
            let d = p.sub(sensor);
            let d_gt = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            if d_gt < EPS_DEPTH {
                return Some((f64::NAN, f64::NAN)); // marker: too short
            }
            let dir = [d[0] / d_gt, d[1] / d_gt, d[2] / d_gt];
            let hit = traverse_ray(&grid.spec, sensor, &dir, d_gt + diag)
                .into_iter()
                .find(|s| grid.prob_at(s.cell) >= OCC_THRESHOLD);
            hit.map(|s| {
                let err = (s.t_entry - d_gt).abs();
                (err, err / d_gt)
            })
        })
        .collect();
    let mut l2_terms = Vec::new();
    let mut ar_terms = Vec::new();
    for r in per_ray {
        match r {
            Some((e, _)) if e.is_nan() => counts.too_short += 1,
            Some((e, rel)) => {
                l2_terms.push(e);
                ar_terms.push(rel);
            }
            None => counts.no_hit += 1,
        }
    }
    counts.evaluated = l2_terms.len();
    if counts.evaluated == 0 {
        return Err(MetricsError::NoEvaluableRays {
            no_hit: counts.no_hit,
            too_short: counts.too_short,
        });
    }
    let l2 = compensated_sum(&l2_terms) / counts.evaluated as f64;
    let ar = compensated_sum(&ar_terms) / counts.evaluated as f64;
    Ok((l2, ar, counts))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct MetricsConfig {
    pub r_nf: f64,
    pub threshold: f64,
    pub eps_depth: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            r_nf: 20.0,
            threshold: OCC_THRESHOLD,
            eps_depth: EPS_DEPTH,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsCounts {
    pub pred_surface_points: usize,
    pub gt_points: usize,
    pub depth: DepthCounts,
}

/// One evaluation run, serialized as a single JSON object. The config
/// echo makes the conventions behind each number explicit.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub cd: f64,
    pub nfcd: f64,
    pub l2: f64,
    pub ar: f64,
    pub counts: MetricsCounts,
    pub config: MetricsConfig,
}

impl MetricsReport {
    /// Fixed-width table with the CD / NFCD / AR / L2 column order used
    /// by the standard quantitative-comparison layout.
    pub fn format_table(&self, label: &str) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<16} {:>10} {:>10} {:>10} {:>10}\n",
            "method", "CD", "NFCD", "AR", "L2"
        ));
        out.push_str(&format!(
            "{:<16} {:>10.3} {:>10.3} {:>10.3} {:>10.3}\n",
            label, self.cd, self.nfcd, self.ar, self.l2
        ));
        out
    }
}

/// Full evaluation of a predicted grid against a GT surface cloud.
pub fn evaluate_grid(
    pred: &OccupancyGrid,
    gt_surface: &PointCloud,
    sensor: &Point3,
    config: &MetricsConfig,
) -> Result<MetricsReport, MetricsError> {
    let pred_surface = extract_surface(pred, config.threshold);
    if pred_surface.is_empty() {
        return Err(MetricsError::EmptySet(
            "predicted surface (no occupied boundary voxels)".to_string(),
        ));
    }
    let cd = chamfer(&pred_surface, gt_surface)?;
    let nfcd = near_field_chamfer(&pred_surface, gt_surface, sensor, config.r_nf)?;
    let (l2, ar, depth) = depth_l2_ar(pred, gt_surface, sensor)?;
    Ok(MetricsReport {
        cd,
        nfcd,
        l2,
        ar,
        counts: MetricsCounts {
            pred_surface_points: pred_surface.len(),
            gt_points: gt_surface.len(),
            depth,
        },
        config: *config,
    })
}
