//! The fixed estimation volume: voxel grid spec, cell indexing, DDA ray
//! traversal, and the dense occupancy grid container.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Point3;
use crate::io::IoError;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("{axis} range ({lo}, {hi}) is not divisible by voxel size {voxel}")]
    NotDivisible {
        axis: char,
        lo: f64,
        hi: f64,
        voxel: f64,
    },
    #[error("invalid grid parameter: {0}")]
    Invalid(String),
}

/// Axis-aligned voxelization of the estimation volume.
///
/// Ranges must be exactly divisible by the voxel size; dims are always
/// recomputed from ranges, never stored independently. Cells are
/// half-open `[lo, hi)`: a point exactly at the upper bound is outside.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoxelGridSpec {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub z_range: (f64, f64),
    pub voxel: (f64, f64, f64),
}

impl Default for VoxelGridSpec {
    /// The default estimation volume: 51.2 m forward, +/-25.6 m lateral,
    /// (-3, 3) m vertical, 0.4 m voxels -> 128x128x15 cells.
    fn default() -> Self {
        VoxelGridSpec {
            x_range: (0.0, 51.2),
            y_range: (-25.6, 25.6),
            z_range: (-3.0, 3.0),
            voxel: (0.4, 0.4, 0.4),
        }
    }
}

fn axis_dim(axis: char, lo: f64, hi: f64, voxel: f64) -> Result<usize, GridError> {
    if !(voxel > 0.0) || !(hi > lo) {
        return Err(GridError::Invalid(format!(
            "{axis} axis: range ({lo}, {hi}) with voxel {voxel}"
        )));
    }
    let n = (hi - lo) / voxel;
    let rounded = n.round();
    if (n - rounded).abs() > 1e-9 * n.max(1.0) || rounded < 1.0 {
        return Err(GridError::NotDivisible {
            axis,
            lo,
            hi,
            voxel,
        });
    }
    Ok(rounded as usize)
}

impl VoxelGridSpec {
    pub fn new(
        x_range: (f64, f64),
        y_range: (f64, f64),
        z_range: (f64, f64),
        voxel: (f64, f64, f64),
    ) -> Result<Self, GridError> {
        let spec = VoxelGridSpec {
            x_range,
            y_range,
            z_range,
            voxel,
        };
        spec.dims()?;
        Ok(spec)
    }

    /// (nx, ny, nz); recomputed from ranges on every call.
    pub fn dims(&self) -> Result<[usize; 3], GridError> {
        Ok([
            axis_dim('x', self.x_range.0, self.x_range.1, self.voxel.0)?,
            axis_dim('y', self.y_range.0, self.y_range.1, self.voxel.1)?,
            axis_dim('z', self.z_range.0, self.z_range.1, self.voxel.2)?,
        ])
    }

    /// Dims for a spec already known to be valid.
    pub fn dims_unchecked(&self) -> [usize; 3] {
        self.dims().expect("grid spec validated at construction")
    }

    pub fn num_cells(&self) -> usize {
        let [nx, ny, nz] = self.dims_unchecked();
        nx * ny * nz
    }

    pub fn lo(&self) -> [f64; 3] {
        [self.x_range.0, self.y_range.0, self.z_range.0]
    }

    pub fn hi(&self) -> [f64; 3] {
        [self.x_range.1, self.y_range.1, self.z_range.1]
    }

    pub fn voxel_arr(&self) -> [f64; 3] {
        [self.voxel.0, self.voxel.1, self.voxel.2]
    }

    /// Half the main diagonal of one voxel.
    pub fn voxel_diagonal(&self) -> f64 {
        let [vx, vy, vz] = self.voxel_arr();
        (vx * vx + vy * vy + vz * vz).sqrt()
    }

    /// Cell containing `p`, or `None` if outside the half-open volume.
    pub fn cell_of(&self, p: &Point3) -> Option<[usize; 3]> {
        let lo = self.lo();
        let hi = self.hi();
        let v = self.voxel_arr();
        let coords = [p.x, p.y, p.z];
        let mut cell = [0usize; 3];
        let dims = self.dims_unchecked();
        for a in 0..3 {
            if coords[a] < lo[a] || coords[a] >= hi[a] {
                return None;
            }
            cell[a] = (((coords[a] - lo[a]) / v[a]).floor() as usize).min(dims[a] - 1);
        }
        Some(cell)
    }

    pub fn center(&self, cell: [usize; 3]) -> Point3 {
        let lo = self.lo();
        let v = self.voxel_arr();
        Point3::new(
            lo[0] + (cell[0] as f64 + 0.5) * v[0],
            lo[1] + (cell[1] as f64 + 0.5) * v[1],
            lo[2] + (cell[2] as f64 + 0.5) * v[2],
        )
    }

    /// Linear index in (z, x, y) order, matching the D x H x W layout of
    /// dense occupancy grids.
    pub fn linear_index(&self, cell: [usize; 3]) -> usize {
        let [nx, ny, _] = self.dims_unchecked();
        (cell[2] * nx + cell[0]) * ny + cell[1]
    }

    pub fn cell_from_linear(&self, idx: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims_unchecked();
        let iy = idx % ny;
        let rest = idx / ny;
        let ix = rest % nx;
        let iz = rest / nx;
        [ix, iy, iz]
    }

    /// Clips the segment `[origin, origin + dir * t_max]` to the volume.
    /// Returns the parameter interval `[t0, t1]` inside, if any.
    pub fn clip_ray(&self, origin: &Point3, dir: &[f64; 3], t_max: f64) -> Option<(f64, f64)> {
        let lo = self.lo();
        let hi = self.hi();
        let o = [origin.x, origin.y, origin.z];
        let mut t0 = 0.0f64;
        let mut t1 = t_max;
        for a in 0..3 {
            if dir[a].abs() < 1e-300 {
                if o[a] < lo[a] || o[a] >= hi[a] {
                    return None;
                }
            } else {
                let inv = 1.0 / dir[a];
                let (mut ta, mut tb) = ((lo[a] - o[a]) * inv, (hi[a] - o[a]) * inv);
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                }
                t0 = t0.max(ta);
                t1 = t1.min(tb);
            }
        }
        if t0 <= t1 {
            Some((t0, t1))
        } else {
            None
        }
    }
}

/// One step of an Amanatides-Woo grid traversal: the visited cell and the
/// ray parameter (meters along a unit direction) at which it was entered.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraversalStep {
    pub cell: [usize; 3],
    pub t_entry: f64,
}

/// Enumerates every cell the ray `origin + t * dir`, `t in [0, t_max]`,
/// passes through inside the grid, in traversal order.
pub fn traverse_ray(
    spec: &VoxelGridSpec,
    origin: &Point3,
    dir: &[f64; 3],
    t_max: f64,
) -> Vec<TraversalStep> {
    let mut out = Vec::new();
    let Some((t0, t1)) = spec.clip_ray(origin, dir, t_max) else {
        return out;
    };
    let dims = spec.dims_unchecked();
    let lo = spec.lo();
    let v = spec.voxel_arr();
    let o = [origin.x, origin.y, origin.z];

    // Entry cell from the clipped start point, clamped onto the boundary.
    let start = [o[0] + dir[0] * t0, o[1] + dir[1] * t0, o[2] + dir[2] * t0];
    let mut cell = [0i64; 3];
    for a in 0..3 {
        let idx = ((start[a] - lo[a]) / v[a]).floor() as i64;
        cell[a] = idx.clamp(0, dims[a] as i64 - 1);
    }

    let mut step = [0i64; 3];
    let mut t_next = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        if dir[a] > 0.0 {
            step[a] = 1;
            let boundary = lo[a] + (cell[a] + 1) as f64 * v[a];
            t_next[a] = (boundary - o[a]) / dir[a];
            t_delta[a] = v[a] / dir[a];
        } else if dir[a] < 0.0 {
            step[a] = -1;
            let boundary = lo[a] + cell[a] as f64 * v[a];
            t_next[a] = (boundary - o[a]) / dir[a];
            t_delta[a] = -v[a] / dir[a];
        }
    }

    let mut t_entry = t0;
    loop {
        out.push(TraversalStep {
            cell: [cell[0] as usize, cell[1] as usize, cell[2] as usize],
            t_entry,
        });
        // Next boundary crossing.
        let mut axis = 0;
        for a in 1..3 {
            if t_next[a] < t_next[axis] {
                axis = a;
            }
        }
        let t_cross = t_next[axis];
        // A cell entered at exactly t1 has zero traversed extent; skip it.
        if t_cross >= t1 || !t_cross.is_finite() {
            break;
        }
        cell[axis] += step[axis];
        if cell[axis] < 0 || cell[axis] >= dims[axis] as i64 {
            break;
        }
        t_entry = t_cross;
        t_next[axis] += t_delta[axis];
    }
    out
}

/// Where an occupancy grid came from; carried through serialization so
/// reports can state what they were computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridProvenance {
    Predicted,
    TeacherRayCarved,
    GroundTruth,
}

/// Dense probability grid over the estimation volume, stored D x H x W
/// (z, x, y) row-major. Boolean grids use probabilities 0.0 / 1.0.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub spec: VoxelGridSpec,
    pub probs: Vec<f64>,
    pub provenance: GridProvenance,
}

pub const GRID_MAGIC: &[u8; 4] = b"OGRD";
pub const GRID_VERSION: u32 = 1;

impl OccupancyGrid {
    pub fn zeros(spec: VoxelGridSpec, provenance: GridProvenance) -> Self {
        let n = spec.num_cells();
        OccupancyGrid {
            spec,
            probs: vec![0.0; n],
            provenance,
        }
    }

    pub fn prob_at(&self, cell: [usize; 3]) -> f64 {
        self.probs[self.spec.linear_index(cell)]
    }

    pub fn set(&mut self, cell: [usize; 3], p: f64) {
        let idx = self.spec.linear_index(cell);
        self.probs[idx] = p;
    }

    pub fn validate(&self) -> Result<(), GridError> {
        if self.probs.len() != self.spec.num_cells() {
            return Err(GridError::Invalid(format!(
                "prob buffer has {} entries for {} cells",
                self.probs.len(),
                self.spec.num_cells()
            )));
        }
        if let Some(p) = self.probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(GridError::Invalid(format!("probability {p} outside [0,1]")));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        let ioerr = |e: std::io::Error| IoError::Io {
            path: path.display().to_string(),
            source: e,
        };
        let file = File::create(path).map_err(ioerr)?;
        let mut w = BufWriter::new(file);
        w.write_all(GRID_MAGIC).map_err(ioerr)?;
        w.write_all(&GRID_VERSION.to_le_bytes()).map_err(ioerr)?;
        for v in [
            self.spec.x_range.0,
            self.spec.x_range.1,
            self.spec.y_range.0,
            self.spec.y_range.1,
            self.spec.z_range.0,
            self.spec.z_range.1,
            self.spec.voxel.0,
            self.spec.voxel.1,
            self.spec.voxel.2,
        ] {
            w.write_all(&v.to_le_bytes()).map_err(ioerr)?;
        }
        let prov = match self.provenance {
            GridProvenance::Predicted => 0u8,
            GridProvenance::TeacherRayCarved => 1,
            GridProvenance::GroundTruth => 2,
        };
        w.write_all(&[prov]).map_err(ioerr)?;
        w.write_all(&(self.probs.len() as u64).to_le_bytes())
            .map_err(ioerr)?;
        for p in &self.probs {
            w.write_all(&(*p as f32).to_le_bytes()).map_err(ioerr)?;
        }
        w.flush().map_err(ioerr)
    }

    pub fn load(path: &Path) -> Result<OccupancyGrid, IoError> {
        let ioerr = |e: std::io::Error| IoError::Io {
            path: path.display().to_string(),
            source: e,
        };
        let perr = |offset: usize, msg: String| IoError::ParseBinary {
            path: path.display().to_string(),
            offset,
            msg,
        };
        let mut buf = Vec::new();
        File::open(path)
            .map_err(ioerr)?
            .read_to_end(&mut buf)
            .map_err(ioerr)?;
        let header = 4 + 4 + 9 * 8 + 1 + 8;
        if buf.len() < header {
            return Err(perr(buf.len(), "truncated grid header".into()));
        }
        if &buf[0..4] != GRID_MAGIC {
            return Err(perr(0, "bad magic, expected OGRD".into()));
        }
        let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
        if version != GRID_VERSION {
            return Err(perr(4, format!("unsupported grid version {version}")));
        }
        let mut f = [0f64; 9];
        for (i, v) in f.iter_mut().enumerate() {
            let off = 8 + i * 8;
            *v = f64::from_le_bytes(buf[off..off + 8].try_into().unwrap());
        }
        let spec = VoxelGridSpec::new((f[0], f[1]), (f[2], f[3]), (f[4], f[5]), (f[6], f[7], f[8]))
            .map_err(|e| perr(8, e.to_string()))?;
        let prov = match buf[80] {
            0 => GridProvenance::Predicted,
            1 => GridProvenance::TeacherRayCarved,
            2 => GridProvenance::GroundTruth,
            other => return Err(perr(80, format!("unknown provenance tag {other}"))),
        };
        let count = u64::from_le_bytes(buf[81..89].try_into().unwrap()) as usize;
        if count != spec.num_cells() {
            return Err(perr(81, format!("cell count {count} does not match spec")));
        }
        if buf.len() < header + count * 4 {
            return Err(perr(buf.len(), "truncated grid payload".into()));
        }
        let probs = (0..count)
            .map(|i| {
                let off = header + i * 4;
                f32::from_le_bytes(buf[off..off + 4].try_into().unwrap()) as f64
            })
            .collect();
        Ok(OccupancyGrid {
            spec,
            probs,
            provenance: prov,
        })
    }
}
