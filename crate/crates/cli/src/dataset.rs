//! On-disk dataset layout shared by the pipeline subcommands.
//!
//! `synth` writes `dataset.json` plus per-frame paired clouds and the
//! analytic ground-truth grid; `labelgen` adds per-frame supervision
//! under `labels/`. Cloud files carry geometry only, so the per-frame
//! sensor pose lives in the dataset manifest and is re-attached on load.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use rolls_core::geometry::{Point3, PointCloud, RigidTransform};
use rolls_core::io::{load_cloud, save_cloud, CloudFormat};
use rolls_core::pseudo_label::{HeightLabels, OccupancyQuerySet};
use rolls_core::synth::SceneSpec;

use crate::config::{RunConfig, ScanConfig};
use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameMeta {
    pub id: String,
    pub pose: RigidTransform,
    /// Paths relative to the dataset root.
    pub lidar: String,
    pub radar: String,
}

impl FrameMeta {
    pub fn sensor_origin(&self) -> Point3 {
        self.pose.apply(&Point3::ORIGIN)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub scene: SceneSpec,
    pub scan: ScanConfig,
    pub frames: Vec<FrameMeta>,
    /// Relative path of the ground-truth occupancy grid.
    pub gt_grid: String,
}

impl DatasetManifest {
    pub fn save(&self, root: &Path) -> Result<(), CliError> {
        let path = root.join("dataset.json");
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::Runtime(format!("dataset serialization failed: {e}")))?;
        std::fs::write(&path, text)
            .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
    }

    pub fn load(root: &Path) -> Result<DatasetManifest, CliError> {
        let path = root.join("dataset.json");
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::Usage(format!("--dataset: cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("--dataset: invalid {}: {e}", path.display())))
    }
}

/// Deterministic survey trajectory: forward motion with a gentle
/// serpentine yaw, starting just inside the near edge of the volume.
pub fn survey_pose(cfg: &RunConfig, frame: usize) -> RigidTransform {
    let f = frame as f64;
    let span = cfg.grid.x_range.1 - cfg.grid.x_range.0;
    let step = (span / 80.0).max(0.1);
    let mut pose = RigidTransform::yaw(0.04 * (f * 0.7).sin());
    pose.translation = [
        cfg.grid.x_range.0 + 0.3 + step * f,
        0.2 * (f * 1.3).sin(),
        -0.4,
    ];
    pose
}

pub fn save_frame_cloud(cloud: &PointCloud, path: &Path) -> Result<(), CliError> {
    save_cloud(cloud, path, CloudFormat::PcdAscii)
        .map_err(|e| CliError::Runtime(format!("cloud write failed: {e}")))
}

/// Loads a frame cloud and restores its sensor origin from the pose.
pub fn load_frame_cloud(root: &Path, rel: &str, meta: &FrameMeta) -> Result<PointCloud, CliError> {
    let path = root.join(rel);
    let format = CloudFormat::from_extension(&path).ok_or_else(|| {
        CliError::Usage(format!("unknown cloud extension: {}", path.display()))
    })?;
    let loaded = load_cloud(&path, format)
        .map_err(|e| CliError::Runtime(format!("cloud read failed: {e}")))?;
    Ok(loaded.cloud.with_origin(meta.sensor_origin()))
}

pub fn labels_dir(dataset: &Path) -> PathBuf {
    dataset.join("labels")
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FrameLabels {
    pub queries: OccupancyQuerySet,
    pub heights: HeightLabels,
}

impl FrameLabels {
    pub fn save(&self, dir: &Path, id: &str) -> Result<(), CliError> {
        let path = dir.join(format!("{id}.json"));
        let text = serde_json::to_string(self)
            .map_err(|e| CliError::Runtime(format!("label serialization failed: {e}")))?;
        std::fs::write(&path, text)
            .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
    }

    pub fn load(dir: &Path, id: &str) -> Result<FrameLabels, CliError> {
        let path = dir.join(format!("{id}.json"));
        let text = std::fs::read_to_string(&path).map_err(|e| {
            CliError::Usage(format!("--labels: cannot read {}: {e}", path.display()))
        })?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("--labels: invalid {}: {e}", path.display())))
    }
}
