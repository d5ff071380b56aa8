//! Weakly supervised occupancy estimation for sparse radar point clouds.
//!
//! The pipeline turns paired LiDAR/radar scans into a trained occupancy
//! network without manual labels:
//!
//! 1. [`pseudo_label`] derives supervision from LiDAR: occupancy query
//!    points sampled along sensor rays and a max-Z height map with a
//!    radar-validity mask.
//! 2. [`tpv`] voxelizes point features over a fixed volume and max-pools
//!    them onto three perpendicular planes (BEV / front / side).
//! 3. [`model`] runs the occupancy network (point MLP encoder, per-plane
//!    dense decoder, height heads, query-based occupancy head), trains it
//!    with the combined stage-1 loss, and fine-tunes against a ray-carved
//!    LiDAR occupancy teacher in stage 2.
//! 4. [`metrics`] evaluates predicted grids geometrically: Chamfer
//!    distance, near-field Chamfer, and ray-rendered depth errors.
//!
//! [`synth`] provides a deterministic scene simulator so the whole chain
//! can be exercised against analytic ground truth. All numerics run in
//! f64 on a minimal tape-based autodiff engine ([`nn`]).
//!
//! Coordinate convention: X forward, Y left, Z up. The default estimation
//! volume spans (0, 51.2) m in X, (-25.6, 25.6) m in Y, and (-3, 3) m in
//! Z at a 0.4 m voxel size, giving a 128x128x15 grid.

pub mod geometry;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pseudo_label;
pub mod synth;
pub mod tpv;

pub use geometry::{Point3, PointCloud, RigidTransform};
pub use grid::VoxelGridSpec;
