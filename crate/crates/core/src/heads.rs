//! Detection and BEV segmentation heads, matching, and the task losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Builder, Conv2d, CrossAttention, LayerNorm, Linear, Mlp, ParamGroup, ParamId, ParamStore};
use crate::planner::{PlanOutput, Trajectory};
use crate::sim::{BevGrid, NUM_CLASSES};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Nominal box size that `exp(0)` maps to.
const NOMINAL_WIDTH: f64 = 2.0;
const NOMINAL_LENGTH: f64 = 4.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetConfig {
    pub queries: usize,
    pub heads: usize,
    /// Half-extents `(x, y)` that bound predicted centers.
    pub extent: (f64, f64),
    pub focal_gamma: f64,
    pub focal_alpha: f64,
}

impl Default for DetConfig {
    fn default() -> Self {
        Self {
            queries: 30,
            heads: 4,
            extent: (32.0, 16.0),
            focal_gamma: 2.0,
            focal_alpha: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegConfig {
    pub hidden: usize,
    pub grid: BevGrid,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            grid: BevGrid::default(),
        }
    }
}

/// BEV box with an existence score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentBox {
    pub center: [f64; 2],
    pub size: [f64; 2],
    pub yaw: f64,
    pub class_id: usize,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct DetectionHead {
    pub config: DetConfig,
    pub queries: ParamId,
    pub ln_q: LayerNorm,
    pub cross: CrossAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: Mlp,
    pub box_ffn: Mlp,
    pub cls_ffn: Linear,
}

/// Detection output on the tape.
#[derive(Debug, Clone, Copy)]
pub struct DetOutput {
    /// `[B, Q, 5]` as `(x, y, w, l, yaw)`.
    pub boxes: Var,
    /// `[B, Q]` existence logits.
    pub logits: Var,
}

impl DetectionHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: &DetConfig, dim: usize, seed: u64) -> Result<Self> {
        if config.queries == 0 {
            return Err(Error::Config("detection needs at least one query".into()));
        }
        let mut root = Builder::new(store, seed, ParamGroup::Head);
        let mut b = root.scope("det");
        Ok(Self {
            config: config.clone(),
            queries: b.gaussian("queries", &[config.queries, dim], 1.0)?,
            ln_q: LayerNorm::new(&mut b, "ln_q", dim)?,
            cross: CrossAttention::new(&mut b, "cross", dim, config.heads)?,
            ln_ffn: LayerNorm::new(&mut b, "ln_ffn", dim)?,
            ffn: Mlp::new(&mut b, "ffn", dim, 2 * dim, dim, 0.0)?,
            box_ffn: Mlp::new(&mut b, "box_ffn", dim, dim, 5, 0.0)?,
            cls_ffn: Linear::new(&mut b, "cls_ffn", dim, 1, true)?,
        })
    }

    /// `tokens [B, N, F]` from the fused map.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, tokens: Var) -> Result<DetOutput> {
        let s = g.shape(tokens).to_vec();
        let (bsz, q) = (s[0], self.config.queries);
        let qp = g.param(self.queries);
        let qp = g.reshape(qp, &[1, q, s[2]])?;
        let mut h = g.index_select(qp, 0, &vec![0; bsz])?;
        let a = self.ln_q.forward(g, h)?;
        let a = self.cross.forward(g, a, tokens)?;
        h = g.add(h, a)?;
        let a = self.ln_ffn.forward(g, h)?;
        let a = self.ffn.forward(g, a)?;
        h = g.add(h, a)?;

        let raw = self.box_ffn.forward(g, h)?;
        let t = g.narrow(raw, 2, 0, 2)?;
        let t = g.tanh(t);
        let (ex, ey) = self.config.extent;
        let k = g.constant(Tensor::from_f64(&[2], &[ex, ey])?);
        let center = g.mul_suffix(t, k)?;
        let sz = g.narrow(raw, 2, 2, 2)?;
        let sz = g.exp(sz);
        let k = g.constant(Tensor::from_f64(&[2], &[NOMINAL_WIDTH, NOMINAL_LENGTH])?);
        let size = g.mul_suffix(sz, k)?;
        let yaw = g.narrow(raw, 2, 4, 1)?;
        let yaw = g.tanh(yaw);
        let yaw = g.scale(yaw, std::f64::consts::PI);
        let boxes = g.concat(&[center, size, yaw], 2)?;
        let logits = self.cls_ffn.forward(g, h)?;
        let logits = g.reshape(logits, &[bsz, q])?;
        Ok(DetOutput { boxes, logits })
    }
}

/// Decode one batch element into boxes.
pub fn decode_boxes<T: Scalar>(g: &Graph<'_, T>, out: &DetOutput, b: usize) -> Vec<AgentBox> {
    let q = g.shape(out.logits)[1];
    let boxes = g.value(out.boxes).to_f64_vec();
    let logits = g.value(out.logits).to_f64_vec();
    (0..q)
        .map(|i| {
            let r = &boxes[(b * q + i) * 5..(b * q + i + 1) * 5];
            AgentBox {
                center: [r[0], r[1]],
                size: [r[2], r[3]],
                yaw: r[4],
                class_id: 0,
                score: 1.0 / (1.0 + (-logits[b * q + i]).exp()),
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SegmentationHead {
    pub config: SegConfig,
    pub conv: Conv2d,
    pub classifier: Conv2d,
}

impl SegmentationHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: &SegConfig, dim: usize, seed: u64) -> Result<Self> {
        let mut root = Builder::new(store, seed, ParamGroup::Head);
        let mut b = root.scope("seg");
        Ok(Self {
            config: config.clone(),
            conv: Conv2d::new(&mut b, "conv", dim, config.hidden, 3, 1, true)?,
            classifier: Conv2d::new(&mut b, "classifier", config.hidden, NUM_CLASSES, 1, 1, true)?,
        })
    }

    /// `[B, 7, rows, cols]` logits.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, fused: Var) -> Result<Var> {
        let h = self.conv.forward(g, fused)?;
        let h = g.relu(h);
        let h = self.classifier.forward(g, h)?;
        g.upsample_bilinear(h, (self.config.grid.rows, self.config.grid.cols))
    }
}

/// Minimum-cost assignment of every row to a distinct column
/// (`rows <= cols`). Returns the column of each row.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let m = cost[0].len();
    if n > m || cost.iter().any(|r| r.len() != m) {
        return Err(Error::Shape(format!("assignment needs rows <= cols, got {n}x{m}")));
    }
    // potentials method, 1-based with a virtual column 0
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub plan: f64,
    pub det: f64,
    pub cls: f64,
    pub reg: f64,
    pub sem: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            plan: 10.0,
            det: 1.0,
            cls: 10.0,
            reg: 1.0,
            sem: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.plan, self.det, self.cls, self.reg, self.sem];
        if all.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be >= 0, got {all:?}")));
        }
        Ok(())
    }
}

/// Mean over waypoints of the per-waypoint L1 norm.
pub fn loss_plan(pred: &Trajectory, gt: &Trajectory) -> Result<f64> {
    if pred.len() != gt.len() || gt.is_empty() {
        return Err(Error::Shape(format!("trajectory lengths {} and {}", pred.len(), gt.len())));
    }
    let total: f64 = pred
        .waypoints
        .iter()
        .zip(&gt.waypoints)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>())
        .sum();
    Ok(total / gt.len() as f64)
}

/// `lambda_plan L_plan + lambda_det L_det + lambda_sem L_sem` on plain numbers.
pub fn loss_total(plan: f64, det: f64, sem: f64, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    Ok(w.plan * plan + w.det * det + w.sem * sem)
}

/// Tape version of the planning loss for a batch.
///
/// Candidates `[B, K, 3T]`; the positive per sample is the candidate with the
/// smallest average displacement to `gt`. Adds a confidence cross-entropy
/// towards the positive and, when present, an end-point L1 term. Returns the
/// loss and the positive indices.
pub fn plan_loss_var<T: Scalar>(g: &mut Graph<'_, T>, out: &PlanOutput, gt: &[Trajectory]) -> Result<(Var, Vec<usize>)> {
    let s = g.shape(out.candidates).to_vec();
    let (bsz, k, td) = (s[0], s[1], s[2]);
    if gt.len() != bsz || gt.iter().any(|t| 3 * t.len() != td) {
        return Err(Error::Shape("ground truth does not match planner batch".into()));
    }
    let cand = g.value(out.candidates).to_f64_vec();
    let pos: Vec<usize> = (0..bsz)
        .map(|b| {
            let ades: Vec<f64> = (0..k)
                .map(|j| Trajectory::from_flat(&cand[(b * k + j) * td..(b * k + j + 1) * td]).ade(&gt[b]))
                .collect();
            (0..k).min_by(|&x, &y| ades[x].total_cmp(&ades[y])).unwrap()
        })
        .collect();
    let flat = g.reshape(out.candidates, &[bsz * k, td])?;
    let rows: Vec<usize> = pos.iter().enumerate().map(|(b, p)| b * k + p).collect();
    let chosen = g.index_select(flat, 0, &rows)?;
    let gt_flat: Vec<f64> = gt.iter().flat_map(Trajectory::flat).collect();
    let target = g.constant(Tensor::from_f64(&[bsz, td], &gt_flat)?);
    let d = g.sub(chosen, target)?;
    let d = g.abs(d);
    // sum over coordinates, mean over waypoints and batch
    let per = g.reshape(d, &[bsz * td / 3, 3])?;
    let per = g.sum_axis(per, 1)?;
    let mut loss = g.mean(per);
    if let Some(l) = out.logits {
        let ce = g.cross_entropy(l, &pos)?;
        loss = g.add(loss, ce)?;
    }
    if let Some(e) = out.endpoint {
        let ends: Vec<f64> = gt
            .iter()
            .flat_map(|t| {
                let w = t.waypoints.last().unwrap();
                [w[0], w[1]]
            })
            .collect();
        let te = g.constant(Tensor::from_f64(&[bsz, 2], &ends)?);
        let l1 = g.l1_loss(e, te)?;
        loss = g.add(loss, l1)?;
    }
    Ok((loss, pos))
}

/// Detection loss for a batch: Hungarian matching on center L1 plus
/// existence cost, focal classification over all queries, L1 regression
/// on matched boxes. `gt[b]` holds `[x, y, w, l, yaw]` rows.
pub fn det_loss_var<T: Scalar>(g: &mut Graph<'_, T>, out: &DetOutput, gt: &[Vec<[f64; 5]>], cfg: &DetConfig, w: &LossWeights) -> Result<Var> {
    let s = g.shape(out.logits).to_vec();
    let (bsz, q) = (s[0], s[1]);
    if gt.len() != bsz {
        return Err(Error::Shape("detection targets do not match batch".into()));
    }
    let boxes = g.value(out.boxes).to_f64_vec();
    let logits = g.value(out.logits).to_f64_vec();
    let mut labels = vec![0usize; bsz * q];
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (b, agents) in gt.iter().enumerate() {
        if agents.len() > q {
            return Err(Error::Data(format!("{} agents exceed {q} queries", agents.len())));
        }
        let cost: Vec<Vec<f64>> = agents
            .iter()
            .map(|a| {
                (0..q)
                    .map(|i| {
                        let r = &boxes[(b * q + i) * 5..];
                        let p = 1.0 / (1.0 + (-logits[b * q + i]).exp());
                        (r[0] - a[0]).abs() + (r[1] - a[1]).abs() + (1.0 - p)
                    })
                    .collect()
            })
            .collect();
        for (a, col) in agents.iter().zip(hungarian(&cost)?) {
            labels[b * q + col] = 1;
            rows.push(b * q + col);
            targets.extend_from_slice(a);
        }
    }
    let z = g.reshape(out.logits, &[bsz * q, 1])?;
    let zeros = g.constant(Tensor::zeros(&[bsz * q, 1]));
    let two = g.concat(&[zeros, z], 1)?;
    let cls = g.focal_loss(two, &labels, cfg.focal_gamma, cfg.focal_alpha)?;
    let mut loss = g.scale(cls, w.cls);
    if !rows.is_empty() {
        let flat = g.reshape(out.boxes, &[bsz * q, 5])?;
        let m = g.index_select(flat, 0, &rows)?;
        let t = g.constant(Tensor::from_f64(&[rows.len(), 5], &targets)?);
        let reg = g.l1_loss(m, t)?;
        let reg = g.scale(reg, w.reg);
        loss = g.add(loss, reg)?;
    }
    Ok(loss)
}

/// Mean pixel cross-entropy of `[B, C, H, W]` logits against class indices.
pub fn sem_loss_var<T: Scalar>(g: &mut Graph<'_, T>, logits: Var, gt: &[usize]) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if gt.len() != b * h * w {
        return Err(Error::Shape(format!("{} labels for a {b}x{h}x{w} grid", gt.len())));
    }
    if let Some(bad) = gt.iter().find(|&&k| k >= c) {
        return Err(Error::Domain(format!("semantic class {bad} >= {c}")));
    }
    let x = g.permute(logits, &[0, 2, 3, 1])?;
    let x = g.reshape(x, &[b * h * w, c])?;
    g.cross_entropy(x, gt)
}
