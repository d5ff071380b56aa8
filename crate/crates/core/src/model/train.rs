//! Two-stage training, the ray-carved LiDAR teacher, and inference over
//! voxel centers.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{Point3, PointCloud};
use crate::grid::{traverse_ray, GridProvenance, OccupancyGrid, VoxelGridSpec};
use crate::nn::{
    adamw_step, stable_sigmoid, AdamWConfig, NnError, NodeId, ParamStore, Tape, Tensor,
};
use crate::pseudo_label::{HeightLabels, OccupancyQuerySet};

use super::net::{
    bind_params, encode_points, filter_queries, height_head, init_params, occupancy_head,
    Bindings, EncodedTpv,
};
use super::{dense_decode, ModelConfig};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite loss on frame '{0}'")]
    NonFiniteLoss(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One fully labeled training frame for stage 1.
#[derive(Debug, Clone)]
pub struct FrameData {
    pub frame_id: String,
    pub radar: PointCloud,
    pub queries: OccupancyQuerySet,
    pub heights: HeightLabels,
}

/// One stage-2 frame: the radar scan plus its teacher grid.
#[derive(Debug, Clone)]
pub struct Stage2Frame {
    pub frame_id: String,
    pub radar: PointCloud,
    pub teacher: TeacherGrid,
}

/// Per-iteration loss record; columns match the emitted CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub iteration: usize,
    pub l1: f64,
    pub l2: f64,
    pub l_occ: f64,
    pub total: f64,
}

pub fn write_loss_csv(rows: &[LossRow], path: &Path) -> Result<(), ModelError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "iteration,l1,l2,l_occ,total")?;
    for r in rows {
        writeln!(f, "{},{},{},{},{}", r.iteration, r.l1, r.l2, r.l_occ, r.total)?;
    }
    Ok(())
}

/// Stage-1 loss graph for one frame: the weighted sum node plus the
/// per-component values for logging.
pub struct Stage1Loss {
    pub total: NodeId,
    pub l1: f64,
    pub l2: f64,
    pub l_occ: f64,
    pub total_value: f64,
}

fn decode_all(
    tape: &mut Tape,
    binds: &Bindings,
    enc: &EncodedTpv,
    levels: usize,
) -> Result<EncodedTpv, NnError> {
    Ok(EncodedTpv {
        bev: dense_decode(tape, binds, enc.bev, "bev", levels)?,
        fv: dense_decode(tape, binds, enc.fv, "fv", levels)?,
        sv: dense_decode(tape, binds, enc.sv, "sv", levels)?,
        points_used: enc.points_used,
        dropped_outside: enc.dropped_outside,
    })
}

/// Builds the full stage-1 loss for one frame: encoder-level height loss
/// (L1), decoder-level height loss (L2), occupancy-query BCE, combined
/// as omega1*L1 + omega2*L2 + omega3*L_occ.
pub fn stage1_loss(
    tape: &mut Tape,
    binds: &Bindings,
    frame: &FrameData,
    spec: &VoxelGridSpec,
    cfg: &ModelConfig,
) -> Result<Stage1Loss, ModelError> {
    let [nx, ny, _] = spec.dims_unchecked();
    if frame.heights.dims != (nx, ny) {
        return Err(ModelError::Shape(format!(
            "height labels {:?} vs BEV ({nx}, {ny}) on frame '{}'",
            frame.heights.dims, frame.frame_id
        )));
    }
    // Height targets are measured from the grid floor: the ReLU-gated
    // head emits nonnegative values, while raw max-Z is negative over
    // bare ground.
    let rel: Vec<f64> = frame
        .heights
        .labels
        .iter()
        .map(|h| h - spec.z_range.0)
        .collect();
    let enc = encode_points(tape, binds, &frame.radar, spec, cfg)?;
    let h1 = height_head(tape, binds, enc.bev, "height1")?;
    let l1 = tape.masked_mse(h1, &rel, &frame.heights.mask)?;
    let dec = decode_all(tape, binds, &enc, cfg.decoder_levels)?;
    let h2 = height_head(tape, binds, dec.bev, "height2")?;
    let l2 = tape.masked_mse(h2, &rel, &frame.heights.mask)?;
    let mut points = Vec::new();
    let mut labels = Vec::new();
    let (pos, _) = filter_queries(spec, &frame.queries.positives);
    let (neg, _) = filter_queries(spec, &frame.queries.negatives);
    labels.extend(std::iter::repeat(1.0).take(pos.len()));
    labels.extend(std::iter::repeat(0.0).take(neg.len()));
    points.extend(pos);
    points.extend(neg);
    let l_occ = if points.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let logits = occupancy_head(tape, binds, &dec, &points, spec)?;
        tape.bce_with_logits(logits, &labels)?
    };
    let total = tape.weighted_sum(&[
        (l1, cfg.omega[0]),
        (l2, cfg.omega[1]),
        (l_occ, cfg.omega[2]),
    ])?;
    Ok(Stage1Loss {
        total,
        l1: tape.value(l1).item(),
        l2: tape.value(l2).item(),
        l_occ: tape.value(l_occ).item(),
        total_value: tape.value(total).item(),
    })
}

fn accumulate_grads(
    sums: &mut HashMap<String, Vec<f64>>,
    binds: &Bindings,
    grads: &crate::nn::Gradients,
) {
    for (name, id) in binds.iter() {
        if let Some(g) = grads.get(id) {
            match sums.get_mut(name) {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, v)| *a += v),
                None => {
                    sums.insert(name.clone(), g.to_vec());
                }
            }
        }
    }
}

fn scale_grads(sums: &mut HashMap<String, Vec<f64>>, factor: f64) {
    for g in sums.values_mut() {
        g.iter_mut().for_each(|v| *v *= factor);
    }
}

/// Cycles frame indices in seeded shuffled order, reshuffling after each
/// pass over the dataset.
struct ShuffledCycle {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl ShuffledCycle {
    fn new(n: usize, rng: ChaCha8Rng) -> Self {
        let mut s = ShuffledCycle {
            order: (0..n).collect(),
            pos: 0,
            rng,
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let i = self.order[self.pos];
        self.pos += 1;
        i
    }
}

/// Stage-1 training loop: seeded shuffled frame order, gradients
/// averaged per batch, AdamW at lr_stage1. Deterministic per seed.
pub fn train_stage1(
    frames: &[FrameData],
    spec: &VoxelGridSpec,
    cfg: &ModelConfig,
) -> Result<(ParamStore, Vec<LossRow>), ModelError> {
    cfg.validate()?;
    if frames.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let mut store = init_params(cfg);
    let opt = AdamWConfig::new(cfg.lr_stage1, cfg.weight_decay);
    let mut cycle = ShuffledCycle::new(frames.len(), ChaCha8Rng::seed_from_u64(cfg.seed));
    let mut rows = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let mut sums = HashMap::new();
        let mut row = LossRow {
            iteration: iter,
            l1: 0.0,
            l2: 0.0,
            l_occ: 0.0,
            total: 0.0,
        };
        for _ in 0..cfg.batch_size {
            let frame = &frames[cycle.next()];
            let mut tape = Tape::new();
            let binds = bind_params(&mut tape, &store);
            let loss = stage1_loss(&mut tape, &binds, frame, spec, cfg)?;
            if !loss.total_value.is_finite() {
                return Err(ModelError::NonFiniteLoss(frame.frame_id.clone()));
            }
            let grads = tape.backward(loss.total)?;
            accumulate_grads(&mut sums, &binds, &grads);
            row.l1 += loss.l1;
            row.l2 += loss.l2;
            row.l_occ += loss.l_occ;
            row.total += loss.total_value;
        }
        let inv = 1.0 / cfg.batch_size as f64;
        scale_grads(&mut sums, inv);
        row.l1 *= inv;
        row.l2 *= inv;
        row.l_occ *= inv;
        row.total *= inv;
        adamw_step(&mut store, &sums, &opt)?;
        rows.push(row);
    }
    Ok((store, rows))
}

/// Tri-state teacher cell label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TeacherLabel {
    Unknown,
    Free,
    Occupied,
}

/// Ray-carved LiDAR occupancy: FREE along each ray, OCCUPIED at the
/// return's voxel, UNKNOWN elsewhere. OCCUPIED wins conflicts.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherGrid {
    pub spec: VoxelGridSpec,
    /// (z, x, y) linear order, matching OccupancyGrid storage.
    pub labels: Vec<TeacherLabel>,
}

impl TeacherGrid {
    pub fn unknown(spec: VoxelGridSpec) -> Self {
        let n = spec.num_cells();
        TeacherGrid {
            spec,
            labels: vec![TeacherLabel::Unknown; n],
        }
    }

    pub fn label_at(&self, cell: [usize; 3]) -> TeacherLabel {
        self.labels[self.spec.linear_index(cell)]
    }

    /// Probability view for rendering: occupied 1, free 0, unknown 0.5.
    pub fn to_prob_grid(&self) -> OccupancyGrid {
        let mut g = OccupancyGrid::zeros(self.spec.clone(), GridProvenance::TeacherRayCarved);
        for (p, l) in g.probs.iter_mut().zip(&self.labels) {
            *p = match l {
                TeacherLabel::Unknown => 0.5,
                TeacherLabel::Free => 0.0,
                TeacherLabel::Occupied => 1.0,
            };
        }
        g
    }
}

/// Carves the teacher grid from a LiDAR cloud by DDA traversal of each
/// sensor-to-return ray.
pub fn lidar_teacher_occupancy(cloud: &PointCloud, spec: &VoxelGridSpec) -> TeacherGrid {
    let mut grid = TeacherGrid::unknown(spec.clone());
    let origin = cloud.sensor_origin;
    for p in &cloud.points {
        let d = p.sub(&origin);
        let dist = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if dist <= 0.0 {
            continue;
        }
        let dir = [d[0] / dist, d[1] / dist, d[2] / dist];
        let endpoint = spec.cell_of(p);
        for step in traverse_ray(spec, &origin, &dir, dist) {
            if Some(step.cell) == endpoint {
                continue;
            }
            let idx = spec.linear_index(step.cell);
            if grid.labels[idx] != TeacherLabel::Occupied {
                grid.labels[idx] = TeacherLabel::Free;
            }
        }
        if let Some(cell) = endpoint {
            grid.labels[spec.linear_index(cell)] = TeacherLabel::Occupied;
        }
    }
    grid
}

/// Stage-2 fine-tuning: BCE between predicted probabilities at teacher
/// FREE/OCCUPIED voxel centers and the teacher labels, continuing from
/// the stage-1 parameters at lr_stage2.
pub fn finetune_stage2(
    mut store: ParamStore,
    frames: &[Stage2Frame],
    spec: &VoxelGridSpec,
    cfg: &ModelConfig,
) -> Result<(ParamStore, Vec<LossRow>), ModelError> {
    cfg.validate()?;
    if frames.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    // Labeled voxel centers per frame, fixed up front.
    let labeled: Vec<Vec<(Point3, f64)>> = frames
        .iter()
        .map(|f| {
            let mut cells = Vec::new();
            for (idx, l) in f.teacher.labels.iter().enumerate() {
                let y = match l {
                    TeacherLabel::Free => 0.0,
                    TeacherLabel::Occupied => 1.0,
                    TeacherLabel::Unknown => continue,
                };
                cells.push((spec.center(spec.cell_from_linear(idx)), y));
            }
            cells
        })
        .collect();
    let opt = AdamWConfig::new(cfg.lr_stage2, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut cycle = ShuffledCycle::new(frames.len(), ChaCha8Rng::seed_from_u64(cfg.seed));
    let mut rows = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let mut sums = HashMap::new();
        let mut total = 0.0;
        for _ in 0..cfg.batch_size {
            let fi = cycle.next();
            let frame = &frames[fi];
            let cells = &labeled[fi];
            if cells.is_empty() {
                // All-unknown teacher: nothing to supervise; weight
                // decay still applies through the optimizer step below.
                continue;
            }
            let mut picks: Vec<usize> = (0..cells.len()).collect();
            if picks.len() > cfg.stage2_queries {
                picks.shuffle(&mut rng);
                picks.truncate(cfg.stage2_queries);
                picks.sort_unstable();
            } else {
                // Keep the RNG stream aligned across frame sizes.
                let _ = rng.gen::<u64>();
            }
            let points: Vec<Point3> = picks.iter().map(|&i| cells[i].0).collect();
            let labels: Vec<f64> = picks.iter().map(|&i| cells[i].1).collect();
            let mut tape = Tape::new();
            let binds = bind_params(&mut tape, &store);
            let enc = encode_points(&mut tape, &binds, &frame.radar, spec, cfg)?;
            let dec = decode_all(&mut tape, &binds, &enc, cfg.decoder_levels)?;
            let logits = occupancy_head(&mut tape, &binds, &dec, &points, spec)?;
            let loss = tape.bce_with_logits(logits, &labels)?;
            let v = tape.value(loss).item();
            if !v.is_finite() {
                return Err(ModelError::NonFiniteLoss(frame.frame_id.clone()));
            }
            let grads = tape.backward(loss)?;
            accumulate_grads(&mut sums, &binds, &grads);
            total += v;
        }
        let inv = 1.0 / cfg.batch_size as f64;
        scale_grads(&mut sums, inv);
        total *= inv;
        adamw_step(&mut store, &sums, &opt)?;
        rows.push(LossRow {
            iteration: iter,
            l1: 0.0,
            l2: 0.0,
            l_occ: total,
            total,
        });
    }
    Ok((store, rows))
}

// ---- Plain (tape-free) forward pass for inference ----

fn matvec(w: &Tensor, b: &Tensor, x: &[f64], out: &mut Vec<f64>) {
    let (cin, cout) = (w.shape[0], w.shape[1]);
    out.clear();
    out.extend_from_slice(&b.data);
    for i in 0..cin {
        let xi = x[i];
        let row = &w.data[i * cout..(i + 1) * cout];
        for (o, wv) in out.iter_mut().zip(row) {
            *o += xi * wv;
        }
    }
}

struct PlainPlanes {
    c: usize,
    bev: Vec<f64>,
    fv: Vec<f64>,
    sv: Vec<f64>,
    dims: [usize; 3],
}

fn plain_encode_decode(
    store: &ParamStore,
    cloud: &PointCloud,
    spec: &VoxelGridSpec,
    cfg: &ModelConfig,
) -> PlainPlanes {
    let [nx, ny, nz] = spec.dims_unchecked();
    let c = cfg.channels;
    let mut bev = vec![0.0; c * nx * ny];
    let mut fv = vec![0.0; c * ny * nz];
    let mut sv = vec![0.0; c * nx * nz];
    let mut bev_set = vec![false; nx * ny];
    let mut fv_set = vec![false; ny * nz];
    let mut sv_set = vec![false; nx * nz];
    let mut x = Vec::new();
    let mut y = Vec::new();
    for p in &cloud.points {
        let Some([ix, iy, iz]) = spec.cell_of(p) else {
            continue;
        };
        x.clear();
        x.extend_from_slice(&[p.x, p.y, p.z]);
        for i in 0..cfg.point_mlp.len() - 1 {
            let w = &store.get(&format!("point_mlp.{i}.w")).unwrap().value;
            let b = &store.get(&format!("point_mlp.{i}.b")).unwrap().value;
            matvec(w, b, &x, &mut y);
            y.iter_mut().for_each(|v| *v = v.max(0.0));
            std::mem::swap(&mut x, &mut y);
        }
        let scatter = |plane: &mut [f64], set: &mut [bool], pix: usize, hw: usize| {
            for ch in 0..c {
                let slot = ch * hw + pix;
                if !set[pix] || x[ch] > plane[slot] {
                    plane[slot] = x[ch];
                }
            }
            set[pix] = true;
        };
        scatter(&mut bev, &mut bev_set, ix * ny + iy, nx * ny);
        scatter(&mut fv, &mut fv_set, iy * nz + iz, ny * nz);
        scatter(&mut sv, &mut sv_set, ix * nz + iz, nx * nz);
    }
    PlainPlanes {
        c,
        bev: plain_decode(store, "bev", bev, c, nx, ny, cfg.decoder_levels),
        fv: plain_decode(store, "fv", fv, c, ny, nz, cfg.decoder_levels),
        sv: plain_decode(store, "sv", sv, c, nx, nz, cfg.decoder_levels),
        dims: [nx, ny, nz],
    }
}

fn plain_conv_relu(w: &Tensor, b: &Tensor, x: &[f64], c: usize, hw: usize) -> Vec<f64> {
    let cout = w.shape[0];
    let mut out = vec![0.0; cout * hw];
    for o in 0..cout {
        let bias = b.data[o];
        let row = &w.data[o * c..(o + 1) * c];
        let dst = &mut out[o * hw..(o + 1) * hw];
        dst.iter_mut().for_each(|v| *v = bias);
        for (ch, wv) in row.iter().enumerate() {
            let src = &x[ch * hw..(ch + 1) * hw];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += wv * s;
            }
        }
        dst.iter_mut().for_each(|v| *v = v.max(0.0));
    }
    out
}

fn plain_decode(
    store: &ParamStore,
    plane_name: &str,
    input: Vec<f64>,
    c: usize,
    h: usize,
    w: usize,
    levels: usize,
) -> Vec<f64> {
    // Mirrors dense_decode: conv+relu per level, 2x2 ceil max-pool
    // between levels, nearest upsample + skip addition on the way back.
    let mut skips: Vec<(Vec<f64>, usize, usize)> = Vec::with_capacity(levels);
    let mut x = input;
    let (mut ch_, mut cw) = (h, w);
    for lvl in 0..levels {
        let wt = &store.get(&format!("dec.{plane_name}.conv{lvl}.w")).unwrap().value;
        let bt = &store.get(&format!("dec.{plane_name}.conv{lvl}.b")).unwrap().value;
        x = plain_conv_relu(wt, bt, &x, c, ch_ * cw);
        skips.push((x.clone(), ch_, cw));
        if lvl + 1 < levels {
            let (ph, pw) = (ch_.div_ceil(2), cw.div_ceil(2));
            let mut pooled = vec![f64::NEG_INFINITY; c * ph * pw];
            for chn in 0..c {
                for r in 0..ch_ {
                    for cc in 0..cw {
                        let v = x[(chn * ch_ + r) * cw + cc];
                        let slot = (chn * ph + r / 2) * pw + cc / 2;
                        if v > pooled[slot] {
                            pooled[slot] = v;
                        }
                    }
                }
            }
            x = pooled;
            ch_ = ph;
            cw = pw;
        }
    }
    let (mut y, mut yh, mut yw) = skips.last().cloned().expect("levels >= 1");
    for lvl in (0..levels - 1).rev() {
        let (skip, th, tw) = &skips[lvl];
        let mut up = vec![0.0; c * th * tw];
        for chn in 0..c {
            for r in 0..*th {
                let sr = r * yh / th;
                for cc in 0..*tw {
                    let sc = cc * yw / tw;
                    up[(chn * th + r) * tw + cc] = y[(chn * yh + sr) * yw + sc];
                }
            }
        }
        for (u, s) in up.iter_mut().zip(skip) {
            *u += s;
        }
        y = up;
        yh = *th;
        yw = *tw;
    }
    y
}

fn plain_sample(plane: &[f64], c: usize, h: usize, w: usize, r: f64, cc: f64, out: &mut [f64]) {
    let rc = r.clamp(0.0, (h - 1) as f64);
    let cl = cc.clamp(0.0, (w - 1) as f64);
    let (r0, c0) = (rc.floor() as usize, cl.floor() as usize);
    let (r1, c1) = ((r0 + 1).min(h - 1), (c0 + 1).min(w - 1));
    let (fr, fc) = (rc - r0 as f64, cl - c0 as f64);
    let w00 = (1.0 - fr) * (1.0 - fc);
    let w01 = (1.0 - fr) * fc;
    let w10 = fr * (1.0 - fc);
    let w11 = fr * fc;
    for ch in 0..c {
        let base = ch * h * w;
        out[ch] = plane[base + r0 * w + c0] * w00
            + plane[base + r0 * w + c1] * w01
            + plane[base + r1 * w + c0] * w10
            + plane[base + r1 * w + c1] * w11;
    }
}

/// Tape-free occupancy logit for one query against decoded planes.
fn plain_logit(store: &ParamStore, planes: &PlainPlanes, spec: &VoxelGridSpec, p: &Point3) -> f64 {
    let [nx, ny, nz] = planes.dims;
    let c = planes.c;
    let v = spec.voxel_arr();
    let lo = spec.lo();
    let fx = (p.x - lo[0]) / v[0] - 0.5;
    let fy = (p.y - lo[1]) / v[1] - 0.5;
    let fz = (p.z - lo[2]) / v[2] - 0.5;
    let mut sb = vec![0.0; c];
    let mut sf = vec![0.0; c];
    let mut ss = vec![0.0; c];
    plain_sample(&planes.bev, c, nx, ny, fx, fy, &mut sb);
    plain_sample(&planes.fv, c, ny, nz, fy, fz, &mut sf);
    plain_sample(&planes.sv, c, nx, nz, fx, fz, &mut ss);
    let mut cat = Vec::with_capacity(3 * c);
    cat.extend_from_slice(&sb);
    cat.extend_from_slice(&sf);
    cat.extend_from_slice(&ss);
    let mut h = Vec::new();
    matvec(
        &store.get("fuse.0.w").unwrap().value,
        &store.get("fuse.0.b").unwrap().value,
        &cat,
        &mut h,
    );
    h.iter_mut().for_each(|x| *x = x.max(0.0));
    let mut l3 = Vec::new();
    matvec(
        &store.get("fuse.1.w").unwrap().value,
        &store.get("fuse.1.b").unwrap().value,
        &h,
        &mut l3,
    );
    let m = l3.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = l3.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    let mut fused = vec![0.0; c];
    for ch in 0..c {
        fused[ch] =
            (exps[0] * sb[ch] + exps[1] * sf[ch] + exps[2] * ss[ch]) / z;
    }
    let mut o = Vec::new();
    matvec(
        &store.get("occ.0.w").unwrap().value,
        &store.get("occ.0.b").unwrap().value,
        &fused,
        &mut o,
    );
    o.iter_mut().for_each(|x| *x = x.max(0.0));
    let mut logit = Vec::new();
    matvec(
        &store.get("occ.1.w").unwrap().value,
        &store.get("occ.1.b").unwrap().value,
        &o,
        &mut logit,
    );
    logit[0]
}

/// Full-volume inference: every voxel center is queried through the
/// plain forward pass (identical to the tape path) and mapped through
/// the sigmoid. Output probs follow the (z, x, y) dense layout.
pub fn infer_occupancy(
    store: &ParamStore,
    cfg: &ModelConfig,
    radar: &PointCloud,
    spec: &VoxelGridSpec,
) -> Result<OccupancyGrid, ModelError> {
    cfg.validate()?;
    super::net::validate_store(store, cfg)?;
    let planes = plain_encode_decode(store, radar, spec, cfg);
    let mut grid = OccupancyGrid::zeros(spec.clone(), GridProvenance::Predicted);
    let probs: Vec<f64> = (0..spec.num_cells())
        .into_par_iter()
        .map(|idx| {
            let center = spec.center(spec.cell_from_linear(idx));
            stable_sigmoid(plain_logit(store, &planes, spec, &center))
        })
        .collect();
    grid.probs = probs;
    Ok(grid)
}

/// Tape-free logits for arbitrary queries; used by tests to pin the
/// plain path to the differentiable one.
pub fn plain_query_logits(
    store: &ParamStore,
    cfg: &ModelConfig,
    radar: &PointCloud,
    spec: &VoxelGridSpec,
    queries: &[Point3],
) -> Vec<f64> {
    let planes = plain_encode_decode(store, radar, spec, cfg);
    queries
        .iter()
        .map(|p| plain_logit(store, &planes, spec, p))
        .collect()
}
