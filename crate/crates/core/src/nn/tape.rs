//! Tape-based reverse-mode differentiation with exactly the op set the
//! occupancy network needs.
//!
//! Ops are recorded during the forward pass in topological order; the
//! backward pass replays them in reverse and accumulates gradients into
//! every node with `requires_grad`. A tape is single-threaded; distinct
//! tapes over shared read-only parameters may run in parallel.
//!
//! Conventions fixed here and relied on by tests:
//! - ReLU subgradient at 0 is 0.
//! - Max reductions route the gradient to the argmax winner; ties break
//!   toward the lowest linear index (lowest point index for scatter-max).
//! - Bilinear sampling clamps to the plane border; coordinates are
//!   treated as constants (no gradient w.r.t. positions).

use super::tensor::{NnError, Tensor};

pub type NodeId = usize;

#[derive(Debug)]
enum Op {
    Leaf,
    /// y = x W + b; x: [N, Cin], W: [Cin, Cout], b: [Cout].
    Linear { x: NodeId, w: NodeId, b: NodeId },
    /// Per-pixel channel contraction; x: [B, C, H, W], W: [Cout, C], b: [Cout].
    Conv1x1 { x: NodeId, w: NodeId, b: NodeId },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Scale { x: NodeId, factor: f64 },
    /// Elementwise product, same shape.
    Mul { a: NodeId, b: NodeId },
    /// 2x2 max pool with ceil semantics (edge windows truncated);
    /// argmax holds the winning input linear index per output element.
    MaxPool2 { x: NodeId, argmax: Vec<usize> },
    /// Nearest-neighbor resize to (h2, w2): src = dst * src_dim / dst_dim.
    UpsampleNearest { x: NodeId, out_hw: (usize, usize) },
    /// Clamped bilinear sampling of a [1, C, H, W] plane at continuous
    /// (row, col) coordinates; output [N, C].
    BilinearGather { plane: NodeId, coords: Vec<[f64; 2]> },
    /// Column-wise concat of [N, Ci] parts into [N, sum Ci].
    ConcatCols { parts: Vec<NodeId> },
    /// Row-wise softmax of [N, K].
    SoftmaxRows { x: NodeId },
    /// out[n, c] = sum_k weights[n, k] * part_k[n, c].
    FuseWeighted { weights: NodeId, parts: Vec<NodeId> },
    /// Scatter-max of point features [N, C] onto a plane [1, C, H, W];
    /// winners[c * H * W + pix] is the winning point row, if any.
    ScatterMaxPlane {
        feats: NodeId,
        winners: Vec<Option<usize>>,
    },
    /// sum(mask * (pred - labels)^2) / sum(mask); 0 when the mask is empty.
    MaskedMse {
        pred: NodeId,
        labels: Vec<f64>,
        mask: Vec<bool>,
    },
    /// Mean binary cross-entropy with logits, log-sum-exp stable form.
    BceWithLogits { logits: NodeId, labels: Vec<f64> },
    /// Scalar combination sum_i w_i * term_i.
    WeightedSum { terms: Vec<(NodeId, f64)> },
    Sum { x: NodeId },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }
}

fn mismatch(op: &'static str, detail: String) -> NnError {
    NnError::ShapeMismatch { op, detail }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&id| self.nodes[id].requires_grad)
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (xs, ws, bs) = (
            &self.nodes[x].value,
            &self.nodes[w].value,
            &self.nodes[b].value,
        );
        if xs.shape.len() != 2 || ws.shape.len() != 2 || bs.shape.len() != 1 {
            return Err(mismatch(
                "linear",
                format!("x {:?}, W {:?}, b {:?}", xs.shape, ws.shape, bs.shape),
            ));
        }
        let (n, cin) = (xs.shape[0], xs.shape[1]);
        let (wcin, cout) = (ws.shape[0], ws.shape[1]);
        if cin != wcin || bs.shape[0] != cout {
            return Err(mismatch(
                "linear",
                format!(
                    "x is [{n}, {cin}] but W is [{wcin}, {cout}] with b [{}]",
                    bs.shape[0]
                ),
            ));
        }
        let mut out = vec![0.0; n * cout];
        for i in 0..n {
            for o in 0..cout {
                let mut acc = bs.data[o];
                for k in 0..cin {
                    acc += xs.data[i * cin + k] * ws.data[k * cout + o];
                }
                out[i * cout + o] = acc;
            }
        }
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(Tensor::new(vec![n, cout], out), rg, Op::Linear { x, w, b }))
    }

    pub fn conv1x1(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (xs, ws, bs) = (
            &self.nodes[x].value,
            &self.nodes[w].value,
            &self.nodes[b].value,
        );
        if xs.shape.len() != 4 || ws.shape.len() != 2 || bs.shape.len() != 1 {
            return Err(mismatch(
                "conv1x1",
                format!("x {:?}, W {:?}, b {:?}", xs.shape, ws.shape, bs.shape),
            ));
        }
        let (batch, c, h, wd) = (xs.shape[0], xs.shape[1], xs.shape[2], xs.shape[3]);
        let (cout, wc) = (ws.shape[0], ws.shape[1]);
        if wc != c || bs.shape[0] != cout {
            return Err(mismatch(
                "conv1x1",
                format!("x has {c} channels but W is [{cout}, {wc}], b [{}]", bs.shape[0]),
            ));
        }
        let hw = h * wd;
        let mut out = vec![0.0; batch * cout * hw];
        for bi in 0..batch {
            for o in 0..cout {
                let bias = bs.data[o];
                for p in 0..hw {
                    let mut acc = bias;
                    for ch in 0..c {
                        acc += ws.data[o * c + ch] * xs.data[(bi * c + ch) * hw + p];
                    }
                    out[(bi * cout + o) * hw + p] = acc;
                }
            }
        }
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(
            Tensor::new(vec![batch, cout, h, wd], out),
            rg,
            Op::Conv1x1 { x, w, b },
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::new(
            self.nodes[x].value.shape.clone(),
            self.nodes[x].value.data.iter().map(|v| v.max(0.0)).collect(),
        );
        let rg = self.nodes[x].requires_grad;
        self.push(value, rg, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::new(
            self.nodes[x].value.shape.clone(),
            self.nodes[x]
                .value
                .data
                .iter()
                .map(|v| stable_sigmoid(*v))
                .collect(),
        );
        let rg = self.nodes[x].requires_grad;
        self.push(value, rg, Op::Sigmoid { x })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        if av.shape != bv.shape {
            return Err(mismatch(
                "add",
                format!("{:?} vs {:?}", av.shape, bv.shape),
            ));
        }
        let value = Tensor::new(
            av.shape.clone(),
            av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect(),
        );
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Add { a, b }))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let value = Tensor::new(
            self.nodes[x].value.shape.clone(),
            self.nodes[x].value.data.iter().map(|v| v * factor).collect(),
        );
        let rg = self.nodes[x].requires_grad;
        self.push(value, rg, Op::Scale { x, factor })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        if av.shape != bv.shape {
            return Err(mismatch(
                "mul",
                format!("{:?} vs {:?}", av.shape, bv.shape),
            ));
        }
        let value = Tensor::new(
            av.shape.clone(),
            av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect(),
        );
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Mul { a, b }))
    }

    /// 2x2 max pooling with ceil semantics: output dim = ceil(dim / 2),
    /// edge windows cover the remainder.
    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        let xs = &self.nodes[x].value;
        if xs.shape.len() != 4 {
            return Err(mismatch("max_pool2", format!("x {:?}", xs.shape)));
        }
        let (batch, c, h, w) = (xs.shape[0], xs.shape[1], xs.shape[2], xs.shape[3]);
        let (h2, w2) = (h.div_ceil(2), w.div_ceil(2));
        let mut out = vec![0.0; batch * c * h2 * w2];
        let mut argmax = vec![0usize; out.len()];
        for bi in 0..batch {
            for ch in 0..c {
                let base = (bi * c + ch) * h * w;
                for oi in 0..h2 {
                    for oj in 0..w2 {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for di in 0..2 {
                            let i = oi * 2 + di;
                            if i >= h {
                                continue;
                            }
                            for dj in 0..2 {
                                let j = oj * 2 + dj;
                                if j >= w {
                                    continue;
                                }
                                let idx = base + i * w + j;
                                // Strict > keeps the lowest linear index on ties.
                                if xs.data[idx] > best {
                                    best = xs.data[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        let oidx = ((bi * c + ch) * h2 + oi) * w2 + oj;
                        out[oidx] = best;
                        argmax[oidx] = best_idx;
                    }
                }
            }
        }
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(
            Tensor::new(vec![batch, c, h2, w2], out),
            rg,
            Op::MaxPool2 { x, argmax },
        ))
    }

    pub fn upsample_nearest(&mut self, x: NodeId, out_hw: (usize, usize)) -> Result<NodeId, NnError> {
        let xs = &self.nodes[x].value;
        if xs.shape.len() != 4 {
            return Err(mismatch("upsample_nearest", format!("x {:?}", xs.shape)));
        }
        let (batch, c, h, w) = (xs.shape[0], xs.shape[1], xs.shape[2], xs.shape[3]);
        let (h2, w2) = out_hw;
        let mut out = vec![0.0; batch * c * h2 * w2];
        for bi in 0..batch {
            for ch in 0..c {
                let base = (bi * c + ch) * h * w;
                let obase = (bi * c + ch) * h2 * w2;
                for oi in 0..h2 {
                    let i = oi * h / h2;
                    for oj in 0..w2 {
                        let j = oj * w / w2;
                        out[obase + oi * w2 + oj] = xs.data[base + i * w + j];
                    }
                }
            }
        }
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(
            Tensor::new(vec![batch, c, h2, w2], out),
            rg,
            Op::UpsampleNearest { x, out_hw },
        ))
    }

    pub fn bilinear_gather(
        &mut self,
        plane: NodeId,
        coords: Vec<[f64; 2]>,
    ) -> Result<NodeId, NnError> {
        let ps = &self.nodes[plane].value;
        if ps.shape.len() != 4 || ps.shape[0] != 1 {
            return Err(mismatch("bilinear_gather", format!("plane {:?}", ps.shape)));
        }
        let (c, h, w) = (ps.shape[1], ps.shape[2], ps.shape[3]);
        let n = coords.len();
        let mut out = vec![0.0; n * c];
        for (qi, rc) in coords.iter().enumerate() {
            let taps = bilinear_taps(rc[0], rc[1], h, w);
            for ch in 0..c {
                let base = ch * h * w;
                let mut acc = 0.0;
                for (idx, wgt) in taps {
                    acc += wgt * ps.data[base + idx];
                }
                out[qi * c + ch] = acc;
            }
        }
        let rg = self.nodes[plane].requires_grad;
        Ok(self.push(
            Tensor::new(vec![n, c], out),
            rg,
            Op::BilinearGather { plane, coords },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, NnError> {
        if parts.is_empty() {
            return Err(mismatch("concat_cols", "no parts".into()));
        }
        let n = self.nodes[parts[0]].value.shape[0];
        let mut total = 0usize;
        for &p in parts {
            let s = &self.nodes[p].value.shape;
            if s.len() != 2 || s[0] != n {
                return Err(mismatch("concat_cols", format!("part shape {s:?}, rows {n}")));
            }
            total += s[1];
        }
        let mut out = vec![0.0; n * total];
        for i in 0..n {
            let mut off = 0usize;
            for &p in parts {
                let pv = &self.nodes[p].value;
                let c = pv.shape[1];
                out[i * total + off..i * total + off + c]
                    .copy_from_slice(&pv.data[i * c..(i + 1) * c]);
                off += c;
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor::new(vec![n, total], out),
            rg,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        let xs = &self.nodes[x].value;
        if xs.shape.len() != 2 {
            return Err(mismatch("softmax_rows", format!("x {:?}", xs.shape)));
        }
        let (n, k) = (xs.shape[0], xs.shape[1]);
        let mut out = vec![0.0; n * k];
        for i in 0..n {
            let row = &xs.data[i * k..(i + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..k {
                let e = (row[j] - m).exp();
                out[i * k + j] = e;
                z += e;
            }
            for j in 0..k {
                out[i * k + j] /= z;
            }
        }
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(Tensor::new(vec![n, k], out), rg, Op::SoftmaxRows { x }))
    }

    pub fn fuse_weighted(&mut self, weights: NodeId, parts: &[NodeId]) -> Result<NodeId, NnError> {
        let ws = &self.nodes[weights].value;
        if ws.shape.len() != 2 || ws.shape[1] != parts.len() {
            return Err(mismatch(
                "fuse_weighted",
                format!("weights {:?} for {} parts", ws.shape, parts.len()),
            ));
        }
        let n = ws.shape[0];
        let c = self.nodes[parts[0]].value.shape[1];
        for &p in parts {
            let s = &self.nodes[p].value.shape;
            if s != &vec![n, c] {
                return Err(mismatch("fuse_weighted", format!("part {s:?}, want [{n}, {c}]")));
            }
        }
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            for (k, &p) in parts.iter().enumerate() {
                let wgt = ws.data[i * parts.len() + k];
                let pv = &self.nodes[p].value.data[i * c..(i + 1) * c];
                for ch in 0..c {
                    out[i * c + ch] += wgt * pv[ch];
                }
            }
        }
        let mut ids = parts.to_vec();
        ids.push(weights);
        let rg = self.any_grad(&ids);
        Ok(self.push(
            Tensor::new(vec![n, c], out),
            rg,
            Op::FuseWeighted {
                weights,
                parts: parts.to_vec(),
            },
        ))
    }

    /// Scatter-max of point features onto one plane. `pixels[i]` is the
    /// target pixel (row-major, `None`-free: callers filter beforehand)
    /// for point row i; the output is [1, C, H, W] with empty pixels at 0.
    pub fn scatter_max_plane(
        &mut self,
        feats: NodeId,
        pixels: &[usize],
        out_hw: (usize, usize),
    ) -> Result<NodeId, NnError> {
        let fs = &self.nodes[feats].value;
        if fs.shape.len() != 2 || fs.shape[0] != pixels.len() {
            return Err(mismatch(
                "scatter_max_plane",
                format!("features {:?} for {} pixels", fs.shape, pixels.len()),
            ));
        }
        let (n, c) = (fs.shape[0], fs.shape[1]);
        let (h, w) = out_hw;
        let hw = h * w;
        let mut out = vec![0.0; c * hw];
        let mut winners = vec![None; c * hw];
        for i in 0..n {
            let pix = pixels[i];
            assert!(pix < hw, "pixel index {pix} out of plane {h}x{w}");
            for ch in 0..c {
                let v = fs.data[i * c + ch];
                let slot = ch * hw + pix;
                // Strict > keeps the lowest point index on ties.
                match winners[slot] {
                    None => {
                        out[slot] = v;
                        winners[slot] = Some(i);
                    }
                    Some(_) if v > out[slot] => {
                        out[slot] = v;
                        winners[slot] = Some(i);
                    }
                    _ => {}
                }
            }
        }
        let rg = self.nodes[feats].requires_grad;
        Ok(self.push(
            Tensor::new(vec![1, c, h, w], out),
            rg,
            Op::ScatterMaxPlane { feats, winners },
        ))
    }

    pub fn masked_mse(
        &mut self,
        pred: NodeId,
        labels: &[f64],
        mask: &[bool],
    ) -> Result<NodeId, NnError> {
        let ps = &self.nodes[pred].value;
        if ps.numel() != labels.len() || labels.len() != mask.len() {
            return Err(mismatch(
                "masked_mse",
                format!(
                    "pred {} elements, {} labels, {} mask entries",
                    ps.numel(),
                    labels.len(),
                    mask.len()
                ),
            ));
        }
        let m_sum = mask.iter().filter(|m| **m).count();
        let loss = if m_sum == 0 {
            0.0
        } else {
            let mut acc = 0.0;
            for i in 0..labels.len() {
                if mask[i] {
                    let d = ps.data[i] - labels[i];
                    acc += d * d;
                }
            }
            acc / m_sum as f64
        };
        let rg = self.nodes[pred].requires_grad;
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::MaskedMse {
                pred,
                labels: labels.to_vec(),
                mask: mask.to_vec(),
            },
        ))
    }

    pub fn bce_with_logits(&mut self, logits: NodeId, labels: &[f64]) -> Result<NodeId, NnError> {
        let ls = &self.nodes[logits].value;
        if ls.numel() != labels.len() {
            return Err(mismatch(
                "bce_with_logits",
                format!("{} logits, {} labels", ls.numel(), labels.len()),
            ));
        }
        let n = labels.len();
        let loss = if n == 0 {
            0.0
        } else {
            let mut acc = 0.0;
            for i in 0..n {
                let z = ls.data[i];
                let y = labels[i];
                // max(z, 0) - z y + ln(1 + exp(-|z|))
                acc += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
            }
            acc / n as f64
        };
        let rg = self.nodes[logits].requires_grad;
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::BceWithLogits {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId, NnError> {
        let mut acc = 0.0;
        for &(id, w) in terms {
            let t = &self.nodes[id].value;
            if !t.is_scalar() {
                return Err(mismatch(
                    "weighted_sum",
                    format!("term {:?} is not scalar", t.shape),
                ));
            }
            acc += w * t.item();
        }
        let rg = self.any_grad(&terms.iter().map(|(id, _)| *id).collect::<Vec<_>>());
        Ok(self.push(
            Tensor::scalar(acc),
            rg,
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.nodes[x].value.data.iter().sum();
        let rg = self.nodes[x].requires_grad;
        self.push(Tensor::scalar(total), rg, Op::Sum { x })
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: NodeId) -> Result<Gradients, NnError> {
        if !self.nodes[root].value.is_scalar() {
            return Err(NnError::Invalid(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root].value.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root] = Some(vec![1.0]);
        for i in (0..=root).rev() {
            if grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let gy = grads[i].take().unwrap();
            self.backprop_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, add: impl FnOnce(&mut [f64])) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let buf = grads[id].get_or_insert_with(|| vec![0.0; self.nodes[id].value.numel()]);
        add(buf);
    }

    fn backprop_node(&self, i: NodeId, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let xs = &self.nodes[*x].value;
                let ws = &self.nodes[*w].value;
                let (n, cin) = (xs.shape[0], xs.shape[1]);
                let cout = ws.shape[1];
                self.accumulate(grads, *x, |gx| {
                    for r in 0..n {
                        for k in 0..cin {
                            let mut acc = 0.0;
                            for o in 0..cout {
                                acc += gy[r * cout + o] * ws.data[k * cout + o];
                            }
                            gx[r * cin + k] += acc;
                        }
                    }
                });
                self.accumulate(grads, *w, |gw| {
                    for k in 0..cin {
                        for o in 0..cout {
                            let mut acc = 0.0;
                            for r in 0..n {
                                acc += xs.data[r * cin + k] * gy[r * cout + o];
                            }
                            gw[k * cout + o] += acc;
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for o in 0..cout {
                        for r in 0..n {
                            gb[o] += gy[r * cout + o];
                        }
                    }
                });
            }
            Op::Conv1x1 { x, w, b } => {
                let xs = &self.nodes[*x].value;
                let ws = &self.nodes[*w].value;
                let (batch, c, h, wd) = (xs.shape[0], xs.shape[1], xs.shape[2], xs.shape[3]);
                let cout = ws.shape[0];
                let hw = h * wd;
                self.accumulate(grads, *x, |gx| {
                    for bi in 0..batch {
                        for ch in 0..c {
                            for p in 0..hw {
                                let mut acc = 0.0;
                                for o in 0..cout {
                                    acc += ws.data[o * c + ch] * gy[(bi * cout + o) * hw + p];
                                }
                                gx[(bi * c + ch) * hw + p] += acc;
                            }
                        }
                    }
                });
                self.accumulate(grads, *w, |gw| {
                    for o in 0..cout {
                        for ch in 0..c {
                            let mut acc = 0.0;
                            for bi in 0..batch {
                                for p in 0..hw {
                                    acc += xs.data[(bi * c + ch) * hw + p]
                                        * gy[(bi * cout + o) * hw + p];
                                }
                            }
                            gw[o * c + ch] += acc;
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for o in 0..cout {
                        let mut acc = 0.0;
                        for bi in 0..batch {
                            for p in 0..hw {
                                acc += gy[(bi * cout + o) * hw + p];
                            }
                        }
                        gb[o] += acc;
                    }
                });
            }
            Op::Relu { x } => {
                let xs = &self.nodes[*x].value;
                self.accumulate(grads, *x, |gx| {
                    for (j, g) in gx.iter_mut().enumerate() {
                        if xs.data[j] > 0.0 {
                            *g += gy[j];
                        }
                    }
                });
            }
            Op::Sigmoid { x } => {
                let ys = &self.nodes[i].value;
                self.accumulate(grads, *x, |gx| {
                    for (j, g) in gx.iter_mut().enumerate() {
                        let s = ys.data[j];
                        *g += gy[j] * s * (1.0 - s);
                    }
                });
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, |ga| {
                    for (g, y) in ga.iter_mut().zip(gy) {
                        *g += y;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for (g, y) in gb.iter_mut().zip(gy) {
                        *g += y;
                    }
                });
            }
            Op::Scale { x, factor } => {
                let f = *factor;
                self.accumulate(grads, *x, |gx| {
                    for (g, y) in gx.iter_mut().zip(gy) {
                        *g += f * y;
                    }
                });
            }
            Op::Mul { a, b } => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                self.accumulate(grads, *a, |ga| {
                    for j in 0..ga.len() {
                        ga[j] += gy[j] * bv.data[j];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for j in 0..gb.len() {
                        gb[j] += gy[j] * av.data[j];
                    }
                });
            }
            Op::MaxPool2 { x, argmax } => {
                self.accumulate(grads, *x, |gx| {
                    for (o, &src) in argmax.iter().enumerate() {
                        gx[src] += gy[o];
                    }
                });
            }
            Op::UpsampleNearest { x, out_hw } => {
                let xs = &self.nodes[*x].value;
                let (batch, c, h, w) = (xs.shape[0], xs.shape[1], xs.shape[2], xs.shape[3]);
                let (h2, w2) = *out_hw;
                self.accumulate(grads, *x, |gx| {
                    for bi in 0..batch {
                        for ch in 0..c {
                            let base = (bi * c + ch) * h * w;
                            let obase = (bi * c + ch) * h2 * w2;
                            for oi in 0..h2 {
                                let si = oi * h / h2;
                                for oj in 0..w2 {
                                    let sj = oj * w / w2;
                                    gx[base + si * w + sj] += gy[obase + oi * w2 + oj];
                                }
                            }
                        }
                    }
                });
            }
            Op::BilinearGather { plane, coords } => {
                let ps = &self.nodes[*plane].value;
                let (c, h, w) = (ps.shape[1], ps.shape[2], ps.shape[3]);
                self.accumulate(grads, *plane, |gp| {
                    for (qi, rc) in coords.iter().enumerate() {
                        let taps = bilinear_taps(rc[0], rc[1], h, w);
                        for ch in 0..c {
                            let g = gy[qi * c + ch];
                            for (idx, wgt) in taps {
                                gp[ch * h * w + idx] += wgt * g;
                            }
                        }
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let n = self.nodes[i].value.shape[0];
                let total = self.nodes[i].value.shape[1];
                let mut off = 0usize;
                for &p in parts {
                    let c = self.nodes[p].value.shape[1];
                    let start = off;
                    self.accumulate(grads, p, |gp| {
                        for r in 0..n {
                            for ch in 0..c {
                                gp[r * c + ch] += gy[r * total + start + ch];
                            }
                        }
                    });
                    off += c;
                }
            }
            Op::SoftmaxRows { x } => {
                let ys = &self.nodes[i].value;
                let (n, k) = (ys.shape[0], ys.shape[1]);
                self.accumulate(grads, *x, |gx| {
                    for r in 0..n {
                        let y = &ys.data[r * k..(r + 1) * k];
                        let g = &gy[r * k..(r + 1) * k];
                        let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                        for j in 0..k {
                            gx[r * k + j] += y[j] * (g[j] - dot);
                        }
                    }
                });
            }
            Op::FuseWeighted { weights, parts } => {
                let ws = &self.nodes[*weights].value;
                let n = ws.shape[0];
                let k = parts.len();
                let c = self.nodes[parts[0]].value.shape[1];
                self.accumulate(grads, *weights, |gw| {
                    for r in 0..n {
                        for (j, &p) in parts.iter().enumerate() {
                            let pv = &self.nodes[p].value.data[r * c..(r + 1) * c];
                            let mut acc = 0.0;
                            for ch in 0..c {
                                acc += gy[r * c + ch] * pv[ch];
                            }
                            gw[r * k + j] += acc;
                        }
                    }
                });
                for (j, &p) in parts.iter().enumerate() {
                    self.accumulate(grads, p, |gp| {
                        for r in 0..n {
                            let wgt = ws.data[r * k + j];
                            for ch in 0..c {
                                gp[r * c + ch] += wgt * gy[r * c + ch];
                            }
                        }
                    });
                }
            }
            Op::ScatterMaxPlane { feats, winners } => {
                let c = self.nodes[*feats].value.shape[1];
                let hw = winners.len() / c;
                self.accumulate(grads, *feats, |gf| {
                    for ch in 0..c {
                        for pix in 0..hw {
                            if let Some(row) = winners[ch * hw + pix] {
                                gf[row * c + ch] += gy[ch * hw + pix];
                            }
                        }
                    }
                });
            }
            Op::MaskedMse { pred, labels, mask } => {
                let ps = &self.nodes[*pred].value;
                let m_sum = mask.iter().filter(|m| **m).count();
                if m_sum == 0 {
                    return;
                }
                let scale = 2.0 * gy[0] / m_sum as f64;
                self.accumulate(grads, *pred, |gp| {
                    for j in 0..labels.len() {
                        if mask[j] {
                            gp[j] += scale * (ps.data[j] - labels[j]);
                        }
                    }
                });
            }
            Op::BceWithLogits { logits, labels } => {
                let ls = &self.nodes[*logits].value;
                let n = labels.len();
                if n == 0 {
                    return;
                }
                let scale = gy[0] / n as f64;
                self.accumulate(grads, *logits, |gl| {
                    for j in 0..n {
                        gl[j] += scale * (stable_sigmoid(ls.data[j]) - labels[j]);
                    }
                });
            }
            Op::WeightedSum { terms } => {
                for &(id, w) in terms {
                    self.accumulate(grads, id, |g| g[0] += w * gy[0]);
                }
            }
            Op::Sum { x } => {
                self.accumulate(grads, *x, |gx| {
                    for g in gx.iter_mut() {
                        *g += gy[0];
                    }
                });
            }
        }
    }
}

pub fn stable_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Clamp-to-edge bilinear taps for continuous (row, col): up to four
/// (linear index, weight) pairs over an H x W plane.
fn bilinear_taps(r: f64, c: f64, h: usize, w: usize) -> [(usize, f64); 4] {
    let rr = r.clamp(0.0, (h - 1) as f64);
    let cc = c.clamp(0.0, (w - 1) as f64);
    let i0 = (rr.floor() as usize).min(h - 1);
    let j0 = (cc.floor() as usize).min(w - 1);
    let i1 = (i0 + 1).min(h - 1);
    let j1 = (j0 + 1).min(w - 1);
    let fr = rr - i0 as f64;
    let fc = cc - j0 as f64;
    [
        (i0 * w + j0, (1.0 - fr) * (1.0 - fc)),
        (i0 * w + j1, (1.0 - fr) * fc),
        (i1 * w + j0, fr * (1.0 - fc)),
        (i1 * w + j1, fr * fc),
    ]
}
