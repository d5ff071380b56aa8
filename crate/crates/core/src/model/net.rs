//! Parameter layout and the tape-based forward passes of the network.

use std::collections::HashMap;

use crate::geometry::{Point3, PointCloud};
use crate::grid::VoxelGridSpec;
use crate::nn::{NnError, NodeId, ParamStore, Tape, Tensor};

use super::ModelConfig;

const PLANES: [&str; 3] = ["bev", "fv", "sv"];

/// Fresh parameter store for the full network, uniformly initialized
/// with bound 1/sqrt(fan_in) from the config seed.
pub fn init_params(cfg: &ModelConfig) -> ParamStore {
    use rand_chacha::ChaCha8Rng;
    fn lin(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, cin: usize, cout: usize) {
        let bound = 1.0 / (cin as f64).sqrt();
        store.init_uniform(&format!("{prefix}.w"), vec![cin, cout], bound, rng);
        store.init_uniform(&format!("{prefix}.b"), vec![cout], bound, rng);
    }
    // Conv weights are [Cout, Cin]; same fan-in bound.
    fn conv(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, cin: usize, cout: usize) {
        let bound = 1.0 / (cin as f64).sqrt();
        store.init_uniform(&format!("{prefix}.w"), vec![cout, cin], bound, rng);
        store.init_uniform(&format!("{prefix}.b"), vec![cout], bound, rng);
    }
    let mut store = ParamStore::new();
    let mut rng = ParamStore::rng(cfg.seed);
    let c = cfg.channels;
    for i in 0..cfg.point_mlp.len() - 1 {
        lin(
            &mut store,
            &mut rng,
            &format!("point_mlp.{i}"),
            cfg.point_mlp[i],
            cfg.point_mlp[i + 1],
        );
    }
    for plane in PLANES {
        for lvl in 0..cfg.decoder_levels {
            conv(&mut store, &mut rng, &format!("dec.{plane}.conv{lvl}"), c, c);
        }
    }
    conv(&mut store, &mut rng, "height1", c, 1);
    conv(&mut store, &mut rng, "height2", c, 1);
    lin(&mut store, &mut rng, "fuse.0", 3 * c, c);
    lin(&mut store, &mut rng, "fuse.1", c, 3);
    lin(&mut store, &mut rng, "occ.0", c, c);
    lin(&mut store, &mut rng, "occ.1", c, 1);
    lin(&mut store, &mut rng, "bevpool.0", c, c);
    lin(&mut store, &mut rng, "bevpool.1", c, 1);
    store
}

/// Checks that a loaded store matches the layout `cfg` would create.
pub fn validate_store(store: &ParamStore, cfg: &ModelConfig) -> Result<(), NnError> {
    let expect = init_params(cfg);
    if store.len() != expect.len() {
        return Err(NnError::Checkpoint(format!(
            "parameter count {} does not match config ({} expected)",
            store.len(),
            expect.len()
        )));
    }
    for e in expect.iter() {
        match store.get(&e.name) {
            None => {
                return Err(NnError::Checkpoint(format!("missing parameter '{}'", e.name)));
            }
            Some(p) if p.value.shape != e.value.shape => {
                return Err(NnError::Checkpoint(format!(
                    "parameter '{}' has shape {:?}, config expects {:?}",
                    e.name, p.value.shape, e.value.shape
                )));
            }
            Some(_) => {}
        }
    }
    Ok(())
}

/// Tape nodes for every parameter, keyed by name, so gradients can be
/// routed back to the store after backward.
pub struct Bindings {
    ids: HashMap<String, NodeId>,
}

impl Bindings {
    pub fn node(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter '{name}'"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, NodeId)> {
        self.ids.iter().map(|(n, id)| (n, *id))
    }
}

/// Binds every parameter as a differentiable leaf.
pub fn bind_params(tape: &mut Tape, store: &ParamStore) -> Bindings {
    bind_with(tape, store, None)
}

/// Like `bind_params`, but one named parameter is replaced by an
/// existing node (used by finite-difference checks).
pub fn bind_params_with_override(
    tape: &mut Tape,
    store: &ParamStore,
    name: &str,
    node: NodeId,
) -> Bindings {
    bind_with(tape, store, Some((name, node)))
}

fn bind_with(tape: &mut Tape, store: &ParamStore, over: Option<(&str, NodeId)>) -> Bindings {
    let mut ids = HashMap::new();
    for p in store.iter() {
        let id = match over {
            Some((name, node)) if name == p.name => node,
            _ => tape.leaf(p.value.clone(), true),
        };
        ids.insert(p.name.clone(), id);
    }
    Bindings { ids }
}

fn linear_layer(
    tape: &mut Tape,
    binds: &Bindings,
    x: NodeId,
    prefix: &str,
) -> Result<NodeId, NnError> {
    let w = binds.node(&format!("{prefix}.w"));
    let b = binds.node(&format!("{prefix}.b"));
    tape.linear(x, w, b)
}

fn conv_layer(
    tape: &mut Tape,
    binds: &Bindings,
    x: NodeId,
    prefix: &str,
) -> Result<NodeId, NnError> {
    let w = binds.node(&format!("{prefix}.w"));
    let b = binds.node(&format!("{prefix}.b"));
    tape.conv1x1(x, w, b)
}

/// The three encoder-level planes, plus bookkeeping.
pub struct EncodedTpv {
    /// [1, C, nx, ny]
    pub bev: NodeId,
    /// [1, C, ny, nz]
    pub fv: NodeId,
    /// [1, C, nx, nz]
    pub sv: NodeId,
    pub points_used: usize,
    pub dropped_outside: usize,
}

/// Point-wise MLP (final ReLU) followed by scatter-max onto the three
/// planes. Points outside the volume are dropped and counted; an empty
/// cloud yields all-zero planes.
pub fn encode_points(
    tape: &mut Tape,
    binds: &Bindings,
    cloud: &PointCloud,
    spec: &VoxelGridSpec,
    cfg: &ModelConfig,
) -> Result<EncodedTpv, NnError> {
    let [nx, ny, nz] = spec.dims_unchecked();
    let c = cfg.channels;
    let mut coords = Vec::new();
    let mut bev_pix = Vec::new();
    let mut fv_pix = Vec::new();
    let mut sv_pix = Vec::new();
    let mut dropped = 0usize;
    for p in &cloud.points {
        match spec.cell_of(p) {
            Some([ix, iy, iz]) => {
                coords.extend_from_slice(&[p.x, p.y, p.z]);
                bev_pix.push(ix * ny + iy);
                fv_pix.push(iy * nz + iz);
                sv_pix.push(ix * nz + iz);
            }
            None => dropped += 1,
        }
    }
    let n = bev_pix.len();
    if n == 0 {
        return Ok(EncodedTpv {
            bev: tape.constant(Tensor::zeros(vec![1, c, nx, ny])),
            fv: tape.constant(Tensor::zeros(vec![1, c, ny, nz])),
            sv: tape.constant(Tensor::zeros(vec![1, c, nx, nz])),
            points_used: 0,
            dropped_outside: dropped,
        });
    }
    let mut x = tape.constant(Tensor::new(vec![n, 3], coords));
    for i in 0..cfg.point_mlp.len() - 1 {
        x = linear_layer(tape, binds, x, &format!("point_mlp.{i}"))?;
        x = tape.relu(x);
    }
    Ok(EncodedTpv {
        bev: tape.scatter_max_plane(x, &bev_pix, (nx, ny))?,
        fv: tape.scatter_max_plane(x, &fv_pix, (ny, nz))?,
        sv: tape.scatter_max_plane(x, &sv_pix, (nx, nz))?,
        points_used: n,
        dropped_outside: dropped,
    })
}

/// Multi-scale per-plane decoder: per level a 1x1 conv + ReLU with a 2x2
/// max-pool between levels, then nearest upsampling with skip addition
/// back to full resolution. Output shape equals input shape.
pub fn dense_decode(
    tape: &mut Tape,
    binds: &Bindings,
    plane: NodeId,
    plane_name: &str,
    levels: usize,
) -> Result<NodeId, NnError> {
    let mut skips = Vec::with_capacity(levels);
    let mut x = plane;
    for lvl in 0..levels {
        x = conv_layer(tape, binds, x, &format!("dec.{plane_name}.conv{lvl}"))?;
        x = tape.relu(x);
        skips.push(x);
        if lvl + 1 < levels {
            x = tape.max_pool2(x)?;
        }
    }
    let mut y = *skips.last().expect("levels >= 1");
    for lvl in (0..levels - 1).rev() {
        let target = tape.value(skips[lvl]).shape.clone();
        y = tape.upsample_nearest(y, (target[2], target[3]))?;
        y = tape.add(y, skips[lvl])?;
    }
    Ok(y)
}

/// 1x1 conv + ReLU height regressor over a BEV plane. The output feeds
/// only its loss term, never the rest of the network.
pub fn height_head(
    tape: &mut Tape,
    binds: &Bindings,
    f_bev: NodeId,
    prefix: &str,
) -> Result<NodeId, NnError> {
    let y = conv_layer(tape, binds, f_bev, prefix)?;
    Ok(tape.relu(y))
}

/// Splits query points into those inside the volume (kept, in order)
/// and a count of rejected outsiders.
pub fn filter_queries(spec: &VoxelGridSpec, points: &[Point3]) -> (Vec<Point3>, usize) {
    let mut inside = Vec::with_capacity(points.len());
    let mut rejected = 0usize;
    for p in points {
        if spec.cell_of(p).is_some() {
            inside.push(*p);
        } else {
            rejected += 1;
        }
    }
    (inside, rejected)
}

fn plane_coords(spec: &VoxelGridSpec, p: &Point3) -> [[f64; 2]; 3] {
    let v = spec.voxel_arr();
    let lo = spec.lo();
    let fx = (p.x - lo[0]) / v[0] - 0.5;
    let fy = (p.y - lo[1]) / v[1] - 0.5;
    let fz = (p.z - lo[2]) / v[2] - 0.5;
    [[fx, fy], [fy, fz], [fx, fz]]
}

/// Per-query occupancy logits: bilinear sample of each plane at the
/// projected continuous coordinate, softmax-weighted fusion of the three
/// C-vectors, then a 2-layer MLP to one logit. Queries must already lie
/// inside the volume.
pub fn occupancy_head(
    tape: &mut Tape,
    binds: &Bindings,
    tpv: &EncodedTpv,
    queries: &[Point3],
    spec: &VoxelGridSpec,
) -> Result<NodeId, NnError> {
    if queries.is_empty() {
        return Ok(tape.constant(Tensor::zeros(vec![0, 1])));
    }
    let mut bev_c = Vec::with_capacity(queries.len());
    let mut fv_c = Vec::with_capacity(queries.len());
    let mut sv_c = Vec::with_capacity(queries.len());
    for p in queries {
        let [b, f, s] = plane_coords(spec, p);
        bev_c.push(b);
        fv_c.push(f);
        sv_c.push(s);
    }
    let s_bev = tape.bilinear_gather(tpv.bev, bev_c)?;
    let s_fv = tape.bilinear_gather(tpv.fv, fv_c)?;
    let s_sv = tape.bilinear_gather(tpv.sv, sv_c)?;
    let cat = tape.concat_cols(&[s_bev, s_fv, s_sv])?;
    let mut h = linear_layer(tape, binds, cat, "fuse.0")?;
    h = tape.relu(h);
    let logits3 = linear_layer(tape, binds, h, "fuse.1")?;
    let weights = tape.softmax_rows(logits3)?;
    let fused = tape.fuse_weighted(weights, &[s_bev, s_fv, s_sv])?;
    let mut o = linear_layer(tape, binds, fused, "occ.0")?;
    o = tape.relu(o);
    linear_layer(tape, binds, o, "occ.1")
}

/// Collapses a pillar of D features (one [1, C] node per depth slice)
/// into a single BEV feature: an MLP scores each slice, softmax over
/// depth, weighted sum.
pub fn bev_feature_pool(
    tape: &mut Tape,
    binds: &Bindings,
    pillar: &[NodeId],
) -> Result<NodeId, NnError> {
    if pillar.is_empty() {
        return Err(NnError::Invalid("bev_feature_pool: empty pillar".to_string()));
    }
    let mut scores = Vec::with_capacity(pillar.len());
    for &slice in pillar {
        let mut h = linear_layer(tape, binds, slice, "bevpool.0")?;
        h = tape.relu(h);
        scores.push(linear_layer(tape, binds, h, "bevpool.1")?);
    }
    let logits = tape.concat_cols(&scores)?;
    let weights = tape.softmax_rows(logits)?;
    tape.fuse_weighted(weights, pillar)
}
