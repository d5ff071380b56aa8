//! Tri-perspective-view features: scatter-max voxelization of per-point
//! feature vectors and max pooling onto three perpendicular planes.
//!
//! The volume stays sparse until pooling time; only occupied voxels are
//! stored. Plane layouts, for grid dims (nx, ny, nz):
//!
//! - BEV  (XY, Z collapsed):  C x nx x ny
//! - FV   (YZ, X collapsed):  C x ny x nz
//! - SV   (XZ, Y collapsed):  C x nx x nz
//!
//! Empty cells hold the fill value 0; the point encoder ends in a ReLU,
//! so real features are non-negative and max-pool semantics stay monotone.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use crate::geometry::PointCloud;
use crate::grid::VoxelGridSpec;
use crate::io::IoError;

#[derive(Debug, Error)]
pub enum TpvError {
    #[error("feature matrix has {rows} rows for {points} points")]
    FeatureRows { rows: usize, points: usize },
    #[error("non-finite feature value at point {point}, channel {channel}")]
    NonFinite { point: usize, channel: usize },
}

/// Sparse voxel feature map: only occupied voxels are present.
#[derive(Debug, Clone)]
pub struct SparseVoxels {
    pub spec: VoxelGridSpec,
    pub channels: usize,
    /// Keyed by (ix, iy, iz); value is the elementwise max over the
    /// features of all contained points.
    pub voxels: HashMap<[usize; 3], Vec<f64>>,
    /// Points outside the volume, dropped.
    pub dropped_outside: usize,
}

/// Scatter-max of per-point feature vectors into voxels.
pub fn voxelize_max(
    cloud: &PointCloud,
    features: &[Vec<f64>],
    spec: &VoxelGridSpec,
) -> Result<SparseVoxels, TpvError> {
    if features.len() != cloud.points.len() {
        return Err(TpvError::FeatureRows {
            rows: features.len(),
            points: cloud.points.len(),
        });
    }
    let channels = features.first().map_or(0, Vec::len);
    for (i, row) in features.iter().enumerate() {
        if let Some(c) = row.iter().position(|v| !v.is_finite()) {
            return Err(TpvError::NonFinite {
                point: i,
                channel: c,
            });
        }
    }
    let mut voxels: HashMap<[usize; 3], Vec<f64>> = HashMap::new();
    let mut dropped = 0usize;
    for (p, feat) in cloud.points.iter().zip(features) {
        match spec.cell_of(p) {
            Some(cell) => {
                voxels
                    .entry(cell)
                    .and_modify(|acc| {
                        for (a, f) in acc.iter_mut().zip(feat) {
                            if *f > *a {
                                *a = *f;
                            }
                        }
                    })
                    .or_insert_with(|| feat.clone());
            }
            None => dropped += 1,
        }
    }
    Ok(SparseVoxels {
        spec: *spec,
        channels,
        voxels,
        dropped_outside: dropped,
    })
}

/// The three feature planes plus the BEV occupancy mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TpvFeatures {
    pub channels: usize,
    /// (nx, ny, nz) of the generating grid.
    pub dims: [usize; 3],
    /// C x nx x ny row-major.
    pub f_bev: Vec<f64>,
    /// C x ny x nz row-major.
    pub f_fv: Vec<f64>,
    /// C x nx x nz row-major.
    pub f_sv: Vec<f64>,
    /// nx x ny, true where the pillar contains at least one point.
    pub occupancy_mask_bev: Vec<bool>,
}

impl TpvFeatures {
    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        let [nx, ny, nz] = dims;
        TpvFeatures {
            channels,
            dims,
            f_bev: vec![0.0; channels * nx * ny],
            f_fv: vec![0.0; channels * ny * nz],
            f_sv: vec![0.0; channels * nx * nz],
            occupancy_mask_bev: vec![false; nx * ny],
        }
    }
}

/// Max-reduces sparse voxel features along each axis to form the three
/// planes. Empty projections keep the fill value 0.
pub fn spatial_group_pool(sparse: &SparseVoxels) -> TpvFeatures {
    let dims = sparse.spec.dims_unchecked();
    let [nx, ny, nz] = dims;
    let c = sparse.channels;
    let mut out = TpvFeatures::zeros(c, dims);
    let mut bev_set = vec![false; nx * ny];
    let mut fv_set = vec![false; ny * nz];
    let mut sv_set = vec![false; nx * nz];
    for (&[ix, iy, iz], feat) in &sparse.voxels {
        out.occupancy_mask_bev[ix * ny + iy] = true;
        for ch in 0..c {
            let v = feat[ch];
            let bev = ch * nx * ny + ix * ny + iy;
            if !bev_set[ix * ny + iy] || v > out.f_bev[bev] {
                out.f_bev[bev] = v;
            }
            let fv = ch * ny * nz + iy * nz + iz;
            if !fv_set[iy * nz + iz] || v > out.f_fv[fv] {
                out.f_fv[fv] = v;
            }
            let sv = ch * nx * nz + ix * nz + iz;
            if !sv_set[ix * nz + iz] || v > out.f_sv[sv] {
                out.f_sv[sv] = v;
            }
        }
        bev_set[ix * ny + iy] = true;
        fv_set[iy * nz + iz] = true;
        sv_set[ix * nz + iz] = true;
    }
    out
}

pub const TPV_DUMP_MAGIC: &[u8; 4] = b"TPVF";

impl TpvFeatures {
    /// Binary tensor dump: magic, channel count, dims, then the three
    /// planes as f32 row-major in BEV/FV/SV order.
    pub fn save_binary(&self, path: &Path) -> Result<(), IoError> {
        let ioerr = |e: std::io::Error| IoError::Io {
            path: path.display().to_string(),
            source: e,
        };
        let file = File::create(path).map_err(ioerr)?;
        let mut w = BufWriter::new(file);
        w.write_all(TPV_DUMP_MAGIC).map_err(ioerr)?;
        w.write_all(&(self.channels as u32).to_le_bytes()).map_err(ioerr)?;
        for d in self.dims {
            w.write_all(&(d as u32).to_le_bytes()).map_err(ioerr)?;
        }
        for plane in [&self.f_bev, &self.f_fv, &self.f_sv] {
            for v in plane.iter() {
                w.write_all(&(*v as f32).to_le_bytes()).map_err(ioerr)?;
            }
        }
        w.flush().map_err(ioerr)
    }

    /// One PGM per channel per plane, for eyeballing feature content.
    pub fn save_pgm_set(&self, dir: &Path, stem: &str) -> Result<(), IoError> {
        let [nx, ny, nz] = self.dims;
        let planes: [(&str, &Vec<f64>, usize, usize); 3] = [
            ("bev", &self.f_bev, nx, ny),
            ("fv", &self.f_fv, ny, nz),
            ("sv", &self.f_sv, nx, nz),
        ];
        for (name, data, h, w) in planes {
            for ch in 0..self.channels {
                let img = &data[ch * h * w..(ch + 1) * h * w];
                let path = dir.join(format!("{stem}_{name}_c{ch:02}.pgm"));
                crate::io::save_pgm(img, w, h, &path)?;
            }
        }
        Ok(())
    }
}
