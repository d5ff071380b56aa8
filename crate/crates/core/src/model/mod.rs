//! The occupancy network: point encoder onto TPV planes, per-plane
//! dense decoder, height heads for weak supervision, query-based
//! occupancy head, the two-stage training procedure, and inference over
//! voxel centers.

mod net;
mod train;

pub use net::{
    bev_feature_pool, bind_params, bind_params_with_override, dense_decode, encode_points,
    filter_queries, height_head, init_params, occupancy_head, validate_store, Bindings,
    EncodedTpv,
};
pub use train::{
    finetune_stage2, infer_occupancy, lidar_teacher_occupancy, plain_query_logits, stage1_loss,
    train_stage1, write_loss_csv, FrameData, LossRow, ModelError, Stage1Loss, Stage2Frame,
    TeacherGrid, TeacherLabel,
};

use serde::{Deserialize, Serialize};

/// Network and training hyperparameters. Everything the two stages need
/// is here so a checkpoint's embedded config fully describes the run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    pub channels: usize,
    /// Point-MLP widths, first entry 3 (xyz), last entry `channels`.
    pub point_mlp: Vec<usize>,
    pub decoder_levels: usize,
    /// Loss weights (omega1, omega2, omega3): encoder height, decoder
    /// height, occupancy queries.
    pub omega: [f64; 3],
    pub r_occ: f64,
    pub negatives_per_point: usize,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub iterations: usize,
    /// Teacher-labeled voxel centers sampled per stage-2 iteration.
    pub stage2_queries: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 16,
            point_mlp: vec![3, 16, 16],
            decoder_levels: 2,
            omega: [0.1, 0.1, 1.0],
            r_occ: 0.2,
            negatives_per_point: 2,
            lr_stage1: 4e-4,
            lr_stage2: 1e-4,
            weight_decay: 0.01,
            batch_size: 2,
            iterations: 200,
            stage2_queries: 4096,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        if self.channels == 0 {
            return bad("channels must be > 0".to_string());
        }
        if self.point_mlp.len() < 2
            || self.point_mlp.first() != Some(&3)
            || self.point_mlp.last() != Some(&self.channels)
        {
            return bad(format!(
                "point_mlp {:?} must run 3 -> ... -> channels ({})",
                self.point_mlp, self.channels
            ));
        }
        if self.point_mlp.iter().any(|w| *w == 0) {
            return bad("point_mlp widths must be > 0".to_string());
        }
        if self.decoder_levels == 0 {
            return bad("decoder_levels must be >= 1".to_string());
        }
        if self.omega.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return bad(format!("omega {:?} must be finite and >= 0", self.omega));
        }
        for (name, lr) in [("lr_stage1", self.lr_stage1), ("lr_stage2", self.lr_stage2)] {
            if !(lr > 0.0) || !lr.is_finite() {
                return bad(format!("{name} = {lr} must be > 0"));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay {} must be >= 0", self.weight_decay));
        }
        if !(self.r_occ > 0.0) {
            return bad(format!("r_occ {} must be > 0", self.r_occ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".to_string());
        }
        Ok(())
    }
}
