//! LiDAR-derived supervision signals: occupancy query points sampled
//! along sensor rays, and the per-cell max-Z height map with its
//! radar-validity mask.
//!
//! Query geometry, for a sensor at `c` and a return at `p` with unit
//! direction `u = (p - c) / |p - c|`:
//!
//! - one occupied sample `R+ = p + r_occ * u`, just behind the surface;
//! - `negatives_per_point` free samples `R- = p - r * u` strictly inside
//!   the segment `(c, p)`, which the short-wavelength assumption says is
//!   empty.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{Point3, PointCloud};
use crate::io::IoError;

/// How the free-space sample radii are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeLaw {
    /// First negative uniform in (0, r_occ] (near-surface hard negative),
    /// the rest uniform over the whole free segment (0, |p - c|).
    Mixed,
    /// All negatives uniform in (0, r_occ].
    NearSurface,
    /// All negatives uniform in (0, |p - c|).
    FreeSegment,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryGenConfig {
    /// Offset behind the surface for the occupied sample, meters.
    pub r_occ: f64,
    pub negatives_per_point: usize,
    pub law: NegativeLaw,
    pub seed: u64,
}

impl Default for QueryGenConfig {
    fn default() -> Self {
        QueryGenConfig {
            // Half the default 0.4 m voxel: R+ stays within the surface
            // voxel or its neighbor.
            r_occ: 0.2,
            negatives_per_point: 2,
            law: NegativeLaw::Mixed,
            seed: 0,
        }
    }
}

/// Paired occupied/free query samples derived from one scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyQuerySet {
    pub positives: Vec<Point3>,
    pub negatives: Vec<Point3>,
    pub r_occ: f64,
    pub source_frame: String,
    /// Points closer to the sensor than r_occ (or exactly at it), skipped.
    pub skipped_near: usize,
}

/// Draws a uniform sample strictly inside (0, 1).
fn open_unit(rng: &mut impl Rng) -> f64 {
    loop {
        let t: f64 = rng.gen();
        if t > 0.0 {
            return t;
        }
    }
}

/// Generates occupancy query pairs from a scan. Deterministic for a fixed
/// config; points with `|p - c| <= r_occ` (degenerate rays included) are
/// skipped and counted.
pub fn generate_occupancy_queries(cloud: &PointCloud, cfg: &QueryGenConfig) -> OccupancyQuerySet {
    assert!(cfg.r_occ > 0.0, "r_occ must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let c = cloud.sensor_origin;
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    let mut skipped = 0usize;
    for p in &cloud.points {
        let d = p.dist(&c);
        if d <= cfg.r_occ {
            skipped += 1;
            continue;
        }
        let u = [(p.x - c.x) / d, (p.y - c.y) / d, (p.z - c.z) / d];
        positives.push(p.add_scaled(&u, cfg.r_occ));
        for k in 0..cfg.negatives_per_point {
            let near = match cfg.law {
                NegativeLaw::Mixed => k == 0,
                NegativeLaw::NearSurface => true,
                NegativeLaw::FreeSegment => false,
            };
            let r = if near {
                // (0, r_occ], strictly inside (c, p) since d > r_occ.
                cfg.r_occ * open_unit(&mut rng)
            } else {
                // (0, d).
                loop {
                    let r = d * open_unit(&mut rng);
                    if r < d {
                        break r;
                    }
                }
            };
            negatives.push(p.add_scaled(&u, -r));
        }
    }
    OccupancyQuerySet {
        positives,
        negatives,
        r_occ: cfg.r_occ,
        source_frame: cloud.frame_id.clone(),
        skipped_near: skipped,
    }
}

/// XY grid of per-cell maximum Z with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct HeightMap {
    /// Lower corner of cell (0, 0).
    pub origin_xy: (f64, f64),
    pub cell_size: f64,
    /// (H, W) = (x cells, y cells).
    pub dims: (usize, usize),
    /// Row-major H x W max-Z values; meaningful only where `valid`.
    /// Invalid cells hold the sentinel 0.0 and must be gated on the mask.
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl HeightMap {
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.dims.1 + col
    }

    fn cell_of_xy(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fx = (x - self.origin_xy.0) / self.cell_size;
        let fy = (y - self.origin_xy.1) / self.cell_size;
        if fx < 0.0 || fy < 0.0 {
            return None;
        }
        let (row, col) = (fx.floor() as usize, fy.floor() as usize);
        if row >= self.dims.0 || col >= self.dims.1 {
            return None;
        }
        Some((row, col))
    }
}

/// Bins points into XY cells and records the per-cell maximum Z. Points
/// outside the grid are ignored; the count of ignored points is returned
/// alongside.
pub fn build_height_map(
    cloud: &PointCloud,
    origin_xy: (f64, f64),
    cell_size: f64,
    dims: (usize, usize),
) -> (HeightMap, usize) {
    assert!(cell_size > 0.0, "cell_size must be positive");
    assert!(dims.0 > 0 && dims.1 > 0, "dims must be positive");
    let mut hmap = HeightMap {
        origin_xy,
        cell_size,
        dims,
        values: vec![0.0; dims.0 * dims.1],
        valid: vec![false; dims.0 * dims.1],
    };
    let mut outside = 0usize;
    for p in &cloud.points {
        match hmap.cell_of_xy(p.x, p.y) {
            Some((row, col)) => {
                let idx = hmap.index(row, col);
                if !hmap.valid[idx] || p.z > hmap.values[idx] {
                    hmap.values[idx] = p.z;
                    hmap.valid[idx] = true;
                }
            }
            None => outside += 1,
        }
    }
    (hmap, outside)
}

/// Height labels masked to cells that both contain radar points and have
/// a LiDAR height value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeightLabels {
    pub labels: Vec<f64>,
    pub mask: Vec<bool>,
    pub dims: (usize, usize),
}

/// Retrieves height labels at cells observed by the radar. The mask is
/// true exactly where a radar point fell in a LiDAR-valid cell; label
/// entries outside the mask carry the sentinel 0.0 and must never feed a
/// loss directly.
pub fn query_height_labels(hmap: &HeightMap, radar_cloud: &PointCloud) -> HeightLabels {
    let n = hmap.dims.0 * hmap.dims.1;
    let mut labels = vec![0.0; n];
    let mut mask = vec![false; n];
    for p in &radar_cloud.points {
        if let Some((row, col)) = hmap.cell_of_xy(p.x, p.y) {
            let idx = hmap.index(row, col);
            if hmap.valid[idx] {
                labels[idx] = hmap.values[idx];
                mask[idx] = true;
            }
        }
    }
    HeightLabels {
        labels,
        mask,
        dims: hmap.dims,
    }
}

pub const HMAP_MAGIC: &[u8; 4] = b"HMAP";
pub const HMAP_VERSION: u32 = 1;

impl HeightMap {
    /// Binary serialization: magic, version, origin, cell size, dims,
    /// f32 values row-major, packed validity bitmask (LSB first).
    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        let ioerr = |e: std::io::Error| IoError::Io {
            path: path.display().to_string(),
            source: e,
        };
        let file = File::create(path).map_err(ioerr)?;
        let mut w = BufWriter::new(file);
        w.write_all(HMAP_MAGIC).map_err(ioerr)?;
        w.write_all(&HMAP_VERSION.to_le_bytes()).map_err(ioerr)?;
        w.write_all(&self.origin_xy.0.to_le_bytes()).map_err(ioerr)?;
        w.write_all(&self.origin_xy.1.to_le_bytes()).map_err(ioerr)?;
        w.write_all(&self.cell_size.to_le_bytes()).map_err(ioerr)?;
        w.write_all(&(self.dims.0 as u32).to_le_bytes()).map_err(ioerr)?;
        w.write_all(&(self.dims.1 as u32).to_le_bytes()).map_err(ioerr)?;
        for v in &self.values {
            w.write_all(&(*v as f32).to_le_bytes()).map_err(ioerr)?;
        }
        let mut packed = vec![0u8; self.valid.len().div_ceil(8)];
        for (i, &b) in self.valid.iter().enumerate() {
            if b {
                packed[i / 8] |= 1 << (i % 8);
            }
        }
        w.write_all(&packed).map_err(ioerr)?;
        w.flush().map_err(ioerr)
    }

    pub fn load(path: &Path) -> Result<HeightMap, IoError> {
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
        if buf.len() < 40 {
            return Err(perr(buf.len(), "truncated height map header".into()));
        }
        if &buf[0..4] != HMAP_MAGIC {
            return Err(perr(0, "bad magic, expected HMAP".into()));
        }
        let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
        if version != HMAP_VERSION {
            return Err(perr(4, format!("unsupported version {version}")));
        }
        let ox = f64::from_le_bytes(buf[8..16].try_into().unwrap());
        let oy = f64::from_le_bytes(buf[16..24].try_into().unwrap());
        let cell = f64::from_le_bytes(buf[24..32].try_into().unwrap());
        let h = u32::from_le_bytes(buf[32..36].try_into().unwrap()) as usize;
        let w = u32::from_le_bytes(buf[36..40].try_into().unwrap()) as usize;
        let n = h * w;
        let need = 40 + n * 4 + n.div_ceil(8);
        if buf.len() < need {
            return Err(perr(buf.len(), format!("truncated payload, need {need}")));
        }
        let values = (0..n)
            .map(|i| {
                let off = 40 + i * 4;
                f32::from_le_bytes(buf[off..off + 4].try_into().unwrap()) as f64
            })
            .collect();
        let mask_off = 40 + n * 4;
        let valid = (0..n)
            .map(|i| buf[mask_off + i / 8] & (1 << (i % 8)) != 0)
            .collect();
        Ok(HeightMap {
            origin_xy: (ox, oy),
            cell_size: cell,
            dims: (h, w),
            values,
            valid,
        })
    }

    /// Visual-inspection export: values linearly mapped to gray, invalid
    /// cells black.
    pub fn save_pgm(&self, path: &Path) -> Result<(), IoError> {
        let lo = self
            .values
            .iter()
            .zip(&self.valid)
            .filter(|(_, v)| **v)
            .map(|(x, _)| *x)
            .fold(f64::INFINITY, f64::min);
        let img: Vec<f64> = self
            .values
            .iter()
            .zip(&self.valid)
            .map(|(x, v)| if *v { *x } else { lo.min(0.0) })
            .collect();
        crate::io::save_pgm(&img, self.dims.1, self.dims.0, path)
    }
}
