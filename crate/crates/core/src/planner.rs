//! Truncated conditional diffusion planner and the single-shot regression
//! heads it is compared against.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{mix_seed, Builder, CrossAttention, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamGroup, ParamStore};
use crate::tensor::{seeded_rng, Graph, Scalar, Tensor, Var};

/// Waypoints `(x, y, yaw)` in the ego frame at a fixed time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Trajectory {
    pub waypoints: Vec<[f64; 3]>,
}

impl Trajectory {
    pub fn new(waypoints: Vec<[f64; 3]>) -> Result<Self> {
        if waypoints.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("trajectory waypoint".into()));
        }
        Ok(Self { waypoints })
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        Self {
            waypoints: flat.chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.waypoints.iter().flatten().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    /// Mean Euclidean distance over `(x, y)`.
    pub fn ade(&self, other: &Trajectory) -> f64 {
        let n = self.len().min(other.len()).max(1);
        self.waypoints
            .iter()
            .zip(&other.waypoints)
            .map(|(a, b)| (a[0] - b[0]).hypot(a[1] - b[1]))
            .sum::<f64>()
            / n as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Command {
    Left,
    Straight,
    Right,
}

impl TryFrom<u8> for Command {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(Command::Left),
            1 => Ok(Command::Straight),
            2 => Ok(Command::Right),
            _ => Err(format!("driving command {v} not in 0..=2")),
        }
    }
}

impl From<Command> for u8 {
    fn from(c: Command) -> u8 {
        c as u8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EgoState {
    pub v: f64,
    pub a: f64,
    pub command: Command,
}

impl EgoState {
    pub const DIM: usize = 5;

    /// Scaled speed and acceleration followed by the command one-hot.
    pub fn features(&self) -> [f64; 5] {
        let mut f = [self.v / 10.0, self.a / 2.0, 0.0, 0.0, 0.0];
        f[2 + self.command as usize] = 1.0;
        f
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaSpec {
    Linear(f64, f64),
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
    /// Noise level the anchors are diffused to before denoising.
    pub truncation: usize,
}

impl NoiseSchedule {
    pub fn n(&self) -> usize {
        self.betas.len()
    }

    /// Signal retention at level `i`; level 0 is the clean sample.
    pub fn alpha_bar(&self, i: usize) -> f64 {
        if i == 0 {
            1.0
        } else {
            self.alpha_bars[i - 1]
        }
    }

    /// Descending levels visited by an inference run of `steps` updates,
    /// ending at 0.
    pub fn levels(&self, steps: usize) -> Result<Vec<usize>> {
        if steps == 0 {
            return Err(Error::Config("denoising needs at least one step".into()));
        }
        let start = self.truncation.max(steps).min(self.n());
        let steps = steps.min(start);
        Ok((0..=steps)
            .map(|k| ((start * (steps - k)) as f64 / steps as f64).round() as usize)
            .collect())
    }
}

pub fn make_schedule(n: usize, beta: BetaSpec) -> Result<NoiseSchedule> {
    if n == 0 {
        return Err(Error::Config("schedule needs n >= 1".into()));
    }
    let betas: Vec<f64> = match beta {
        BetaSpec::Constant(b) => vec![b; n],
        BetaSpec::Linear(lo, hi) if n == 1 => vec![lo.max(hi); 1],
        BetaSpec::Linear(lo, hi) => (0..n)
            .map(|s| lo + (hi - lo) * s as f64 / (n - 1) as f64)
            .collect(),
    };
    if let Some(b) = betas.iter().find(|b| !(0.0..1.0).contains(*b)) {
        return Err(Error::Domain(format!("beta {b} outside [0, 1)")));
    }
    let alpha_bars = betas
        .iter()
        .scan(1.0, |acc, b| {
            *acc *= 1.0 - b;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        betas,
        alpha_bars,
        truncation: n.div_ceil(2),
    })
}

/// `sqrt(ab_i) * tau0 + sqrt(1 - ab_i) * eps`.
pub fn forward_diffuse(tau0: &[f64], i: usize, sched: &NoiseSchedule, eps: &[f64]) -> Result<Vec<f64>> {
    if i == 0 || i > sched.n() {
        return Err(Error::Domain(format!("level {i} outside 1..={}", sched.n())));
    }
    if eps.len() != tau0.len() {
        return Err(Error::Shape(format!("noise length {} vs {}", eps.len(), tau0.len())));
    }
    let ab = sched.alpha_bar(i);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(tau0.iter().zip(eps).map(|(t, e)| a * t + b * e).collect())
}

/// Deterministic update from level `i` to level `j < i`.
pub fn denoise_step(tau: &[f64], eps_hat: &[f64], i: usize, j: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    if j >= i || i > sched.n() {
        return Err(Error::Domain(format!("invalid denoise step {i} -> {j}")));
    }
    let (ai, aj) = (sched.alpha_bar(i), sched.alpha_bar(j));
    if ai <= 0.0 {
        return Err(Error::Domain(format!("alpha_bar at level {i} is zero")));
    }
    let (si, sj) = ((1.0 - ai).sqrt(), (1.0 - aj).sqrt());
    Ok(tau
        .iter()
        .zip(eps_hat)
        .map(|(t, e)| {
            let x0 = (t - si * e) / ai.sqrt();
            aj.sqrt() * x0 + sj * e
        })
        .collect())
}

/// Standardisation of every flattened waypoint coordinate.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajNorm {
    /// Length `3 T`; empty means identity.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl TrajNorm {
    /// Per-coordinate mean and std; std floored at `1e-2`.
    pub fn fit(trajs: &[Trajectory]) -> Self {
        let Some(first) = trajs.first() else {
            return Self::default();
        };
        let d = 3 * first.len();
        let mut sum = vec![0.0; d];
        let mut sq = vec![0.0; d];
        let mut n = 0.0;
        for t in trajs.iter().filter(|t| 3 * t.len() == d) {
            for (i, v) in t.flat().into_iter().enumerate() {
                sum[i] += v;
                sq[i] += v * v;
            }
            n += 1.0;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-2))
            .collect();
        Self { mean, std }
    }

    fn at(&self, i: usize) -> (f64, f64) {
        match (self.mean.get(i), self.std.get(i)) {
            (Some(m), Some(s)) => (*m, *s),
            _ => (0.0, 1.0),
        }
    }

    pub fn normalize(&self, flat: &[f64]) -> Vec<f64> {
        flat.iter()
            .enumerate()
            .map(|(i, v)| {
                let (m, s) = self.at(i);
                (v - m) / s
            })
            .collect()
    }

    pub fn denormalize(&self, flat: &[f64]) -> Vec<f64> {
        flat.iter()
            .enumerate()
            .map(|(i, v)| {
                let (m, s) = self.at(i);
                v * s + m
            })
            .collect()
    }

    /// `(scale, shift)` tensors of length `3 * horizon`.
    fn tiled<T: Scalar>(&self, horizon: usize) -> (Tensor<T>, Tensor<T>) {
        let (std, mean): (Vec<f64>, Vec<f64>) = (0..3 * horizon).map(|i| {
            let (m, s) = self.at(i);
            (s, m)
        }).unzip();
        (
            Tensor::from_f64(&[3 * horizon], &std).unwrap(),
            Tensor::from_f64(&[3 * horizon], &mean).unwrap(),
        )
    }
}

/// Lloyd's k-means on flattened trajectories with k-means++ seeding.
pub fn make_anchors(trajs: &[Trajectory], k: usize, seed: u64) -> Result<Vec<Trajectory>> {
    if k == 0 || trajs.is_empty() {
        return Err(Error::Config("anchors need k >= 1 and a nonempty dataset".into()));
    }
    if k > trajs.len() {
        return Err(Error::Config(format!("{k} anchors from {} trajectories", trajs.len())));
    }
    let pts: Vec<Vec<f64>> = trajs.iter().map(Trajectory::flat).collect();
    let d2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut rng = seeded_rng(seed);
    let mut centers = vec![pts[rng.gen_range(0..pts.len())].clone()];
    while centers.len() < k {
        let dist: Vec<f64> = pts
            .iter()
            .map(|p| centers.iter().map(|c| d2(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = dist.iter().sum();
        let next = if total <= 0.0 {
            // remaining points coincide with centers; take any unused index
            let mut idx: Vec<usize> = (0..pts.len()).collect();
            idx.shuffle(&mut rng);
            idx[0]
        } else {
            let mut r = rng.gen::<f64>() * total;
            let mut pick = pts.len() - 1;
            for (i, d) in dist.iter().enumerate() {
                if r < *d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        };
        centers.push(pts[next].clone());
    }
    let mut assign = vec![usize::MAX; pts.len()];
    for _ in 0..200 {
        let mut changed = false;
        for (i, p) in pts.iter().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| d2(p, &centers[a]).total_cmp(&d2(p, &centers[b])))
                .unwrap();
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        let dim = pts[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in pts.iter().zip(&assign) {
            counts[a] += 1;
            sums[a].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        for c in 0..k {
            if counts[c] == 0 {
                // reseed an empty cluster with the point farthest from its center
                let far = (0..pts.len())
                    .max_by(|&a, &b| {
                        d2(&pts[a], &centers[assign[a]]).total_cmp(&d2(&pts[b], &centers[assign[b]]))
                    })
                    .unwrap();
                centers[c] = pts[far].clone();
                assign[far] = c;
                changed = true;
            } else {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        if !changed {
            break;
        }
    }
    Ok(centers.iter().map(|c| Trajectory::from_flat(c)).collect())
}

/// `[sin(i w_k), cos(i w_k)]` with geometric frequencies.
pub fn timestep_embedding(level: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let w = (-(10000f64).ln() * k as f64 / half as f64).exp();
        out.push((level as f64 * w).sin());
        out.push((level as f64 * w).cos());
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlannerHead {
    Diffusion,
    Mlp,
    Transformer,
    Lstm,
    EgoMlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    pub head: PlannerHead,
    pub horizon: usize,
    pub dt: f64,
    pub hidden: usize,
    pub blocks: usize,
    pub time_dim: usize,
    /// Total diffusion levels `n`.
    pub diffusion_steps: usize,
    pub beta: BetaSpec,
    /// Level the anchors are noised to; `None` means `n / 2`.
    pub truncation: Option<usize>,
    /// Denoising updates at inference and in the unrolled training pass.
    pub steps: usize,
    pub num_anchors: usize,
    /// Start from anchors; otherwise from the dataset mean.
    pub use_anchors: bool,
    /// Condition on a predicted end point.
    pub endpoint: bool,
    /// LSTM variant only: feed the previous hidden state forward.
    pub recurrent: bool,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            head: PlannerHead::Diffusion,
            horizon: 8,
            dt: 0.5,
            hidden: 128,
            blocks: 3,
            time_dim: 32,
            diffusion_steps: 50,
            beta: BetaSpec::Linear(1e-4, 2e-2),
            truncation: None,
            steps: 2,
            num_anchors: 20,
            use_anchors: true,
            endpoint: false,
            recurrent: true,
        }
    }
}

impl PlannerConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let mut s = make_schedule(self.diffusion_steps, self.beta)?;
        if let Some(t) = self.truncation {
            if t == 0 || t > s.n() {
                return Err(Error::Config(format!("truncation {t} outside 1..={}", s.n())));
            }
            s.truncation = t;
        }
        Ok(s)
    }

    fn traj_dim(&self) -> usize {
        3 * self.horizon
    }
}

/// Residual MLP block `x + fc2(gelu(fc1(ln(x))))`.
#[derive(Debug, Clone)]
pub struct ResMlp {
    pub ln: LayerNorm,
    pub mlp: Mlp,
}

impl ResMlp {
    fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, dim: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Self {
            ln: LayerNorm::new(&mut s, "ln", dim)?,
            mlp: Mlp::new(&mut s, "mlp", dim, 2 * dim, dim, 0.0)?,
        })
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.ln.forward(g, x)?;
        let h = self.mlp.forward(g, h)?;
        g.add(x, h)
    }
}

/// The noise predictor and its conditioning network.
#[derive(Debug, Clone)]
pub struct DiffusionNet {
    pub anchor_embed: Linear,
    pub combine: Mlp,
    pub traj_in: Linear,
    pub time_proj: Linear,
    pub blocks: Vec<ResMlp>,
    pub ln_out: LayerNorm,
    pub eps_out: Linear,
    pub conf_out: Linear,
    pub endpoint: Option<Mlp>,
}

#[derive(Debug, Clone)]
pub struct LstmHead {
    pub input: Linear,
    pub step_embed: Linear,
    pub gates_x: Linear,
    pub gates_h: Linear,
    pub out: Linear,
}

#[derive(Debug, Clone)]
pub struct TransformerHead {
    pub queries: crate::nn::ParamId,
    pub cond: Linear,
    pub ctx: Linear,
    pub ln1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub cross: CrossAttention,
    pub ln3: LayerNorm,
    pub mlp: Mlp,
    pub out: Linear,
}

#[derive(Debug, Clone)]
pub enum HeadNet {
    Diffusion(DiffusionNet),
    Mlp(Mlp),
    Transformer(TransformerHead),
    Lstm(LstmHead),
    EgoMlp(Mlp),
}

/// Inputs every planner head draws from.
#[derive(Debug, Clone, Copy)]
pub struct PlanContext {
    /// `[B, F]`
    pub c_visual: Var,
    /// `[B, 5]` ego features.
    pub ego: Var,
    /// `[B, N, F]` fused-map tokens.
    pub tokens: Var,
}

/// Output of one planner forward pass, in physical units.
#[derive(Debug, Clone)]
pub struct PlanOutput {
    /// `[B, K, 3 T]`
    pub candidates: Var,
    /// `[B, K]`; absent for single-shot heads (`K = 1`).
    pub logits: Option<Var>,
    /// `[B, 2]` predicted end point when end-point conditioning is on.
    pub endpoint: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct Planner {
    pub config: PlannerConfig,
    pub schedule: NoiseSchedule,
    pub net: HeadNet,
    /// Physical-unit anchors.
    pub anchors: Vec<Trajectory>,
    pub norm: TrajNorm,
}

impl Planner {
    /// Registers parameters under `planner.*`. `feat_dim` is the visual width.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: &PlannerConfig, feat_dim: usize, seed: u64) -> Result<Self> {
        let schedule = config.schedule()?;
        if config.horizon == 0 || config.hidden == 0 {
            return Err(Error::Config("planner horizon and width must be >= 1".into()));
        }
        let mut root = Builder::new(store, seed, ParamGroup::Head);
        let mut b = root.scope("planner");
        let (h, td) = (config.hidden, config.traj_dim());
        let ego = EgoState::DIM;
        let net = match config.head {
            PlannerHead::Diffusion => {
                if config.num_anchors == 0 {
                    return Err(Error::Config("diffusion planner needs anchors".into()));
                }
                let endpoint = if config.endpoint {
                    Some(Mlp::new(&mut b, "endpoint", feat_dim + ego, h, 2, 0.0)?)
                } else {
                    None
                };
                let cin = feat_dim + ego + h + if config.endpoint { 2 } else { 0 };
                DiffusionNet {
                    anchor_embed: Linear::new(&mut b, "anchor_embed", td, h, true)?,
                    combine: Mlp::new(&mut b, "combine", cin, h, h, 0.0)?,
                    traj_in: Linear::new(&mut b, "traj_in", td, h, true)?,
                    time_proj: Linear::new(&mut b, "time_proj", config.time_dim, h, true)?,
                    blocks: (0..config.blocks)
                        .map(|i| ResMlp::new(&mut b, &format!("block{}", i + 1), h))
                        .collect::<Result<_>>()?,
                    ln_out: LayerNorm::new(&mut b, "ln_out", h)?,
                    eps_out: Linear::zeroed(&mut b, "eps_out", h, td)?,
                    conf_out: Linear::zeroed(&mut b, "conf_out", h, 1)?,
                    endpoint,
                }
                .into()
            }
            PlannerHead::Mlp => HeadNet::Mlp(Mlp::new(&mut b, "mlp", feat_dim + ego, h, td, 0.0)?),
            PlannerHead::EgoMlp => HeadNet::EgoMlp(Mlp::new(&mut b, "ego_mlp", ego, h, td, 0.0)?),
            PlannerHead::Lstm => HeadNet::Lstm(LstmHead {
                input: Linear::new(&mut b, "input", feat_dim + ego, h, true)?,
                step_embed: Linear::new(&mut b, "step_embed", config.time_dim, h, false)?,
                gates_x: Linear::new(&mut b, "gates_x", h, 4 * h, true)?,
                gates_h: Linear::new(&mut b, "gates_h", h, 4 * h, false)?,
                out: Linear::new(&mut b, "out", h, 3, true)?,
            }),
            PlannerHead::Transformer => {
                let d = feat_dim;
                let heads = if d % 4 == 0 { 4 } else { 1 };
                HeadNet::Transformer(TransformerHead {
                    queries: b.gaussian("queries", &[config.horizon, d], 0.02)?,
                    cond: Linear::new(&mut b, "cond", feat_dim + ego, d, true)?,
                    ctx: Linear::new(&mut b, "ctx", feat_dim, d, true)?,
                    ln1: LayerNorm::new(&mut b, "ln1", d)?,
                    self_attn: MultiHeadAttention::new(&mut b, "self_attn", d, heads)?,
                    ln2: LayerNorm::new(&mut b, "ln2", d)?,
                    cross: CrossAttention::new(&mut b, "cross", d, heads)?,
                    ln3: LayerNorm::new(&mut b, "ln3", d)?,
                    mlp: Mlp::new(&mut b, "mlp", d, 2 * d, d, 0.0)?,
                    out: Linear::new(&mut b, "out", d, 3, true)?,
                })
            }
        };
        Ok(Self {
            config: config.clone(),
            schedule,
            net,
            anchors: Vec::new(),
            norm: TrajNorm::default(),
        })
    }

    /// Installs anchors and normalisation fitted on `trajs`.
    pub fn fit_data(&mut self, trajs: &[Trajectory], seed: u64) -> Result<()> {
        self.norm = TrajNorm::fit(trajs);
        if self.config.head == PlannerHead::Diffusion {
            self.anchors = if self.config.use_anchors {
                make_anchors(trajs, self.config.num_anchors, seed)?
            } else {
                let mean = make_anchors(trajs, 1, seed)?;
                vec![mean[0].clone(); self.config.num_anchors]
            };
        }
        Ok(())
    }

    fn denormalize<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (std, mean) = self.norm.tiled::<T>(self.config.horizon);
        let s = g.constant(std);
        let m = g.constant(mean);
        let y = g.mul_suffix(x, s)?;
        g.add_suffix(y, m)
    }

    /// Normalised trajectory `[B, 3T]` from a physical one.
    pub fn normalize_var<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (std, mean) = self.norm.tiled::<T>(self.config.horizon);
        let inv = std.map(|v| T::one() / v);
        let m = g.constant(mean.map(|v| -v));
        let y = g.add_suffix(x, m)?;
        let s = g.constant(inv);
        g.mul_suffix(y, s)
    }

    fn broadcast_rows<T: Scalar>(g: &mut Graph<'_, T>, x: Var, k: usize) -> Result<Var> {
        // [B, D] -> [B, K, D]
        let s = g.shape(x).to_vec();
        let x = g.reshape(x, &[s[0], 1, s[1]])?;
        g.index_select(x, 1, &vec![0; k])
    }

    /// Fused condition per candidate `[B, K, h]` and the end-point prediction.
    pub fn build_condition<T: Scalar>(&self, g: &mut Graph<'_, T>, ctx: &PlanContext) -> Result<(Var, Option<Var>)> {
        let HeadNet::Diffusion(net) = &self.net else {
            return Err(Error::Config("condition is defined for the diffusion head".into()));
        };
        let k = self.anchors.len();
        if k == 0 {
            return Err(Error::Config("planner has no anchors".into()));
        }
        let bsz = g.shape(ctx.c_visual)[0];
        let flat: Vec<f64> = self.anchors.iter().flat_map(|a| self.norm.normalize(&a.flat())).collect();
        let anch = g.constant(Tensor::from_f64(&[1, k, self.config.traj_dim()], &flat)?);
        let anch = g.index_select(anch, 0, &vec![0; bsz])?;
        let anch = net.anchor_embed.forward(g, anch)?;
        let vis_ego = g.concat(&[ctx.c_visual, ctx.ego], 1)?;
        let mut parts = vec![Self::broadcast_rows(g, vis_ego, k)?, anch];
        let mut endpoint = None;
        if let Some(ep) = &net.endpoint {
            let e = ep.forward(g, vis_ego)?;
            // end point in the units of the last waypoint
            let td = self.config.traj_dim();
            let (mx, sx) = self.norm.at(td - 3);
            let (my, sy) = self.norm.at(td - 2);
            let shift = g.constant(Tensor::from_f64(&[2], &[-mx, -my])?);
            let en = g.add_suffix(e, shift)?;
            let inv = g.constant(Tensor::from_f64(&[2], &[1.0 / sx, 1.0 / sy])?);
            let en = g.mul_suffix(en, inv)?;
            parts.push(Self::broadcast_rows(g, en, k)?);
            endpoint = Some(e);
        }
        let cat = g.concat(&parts, 2)?;
        Ok((net.combine.forward(g, cat)?, endpoint))
    }

    /// `(eps_hat [B, K, 3T], logits [B, K])` for noisy candidates at `level`.
    pub fn predict_noise<T: Scalar>(&self, g: &mut Graph<'_, T>, tau: Var, level: usize, cond: Var) -> Result<(Var, Var)> {
        let HeadNet::Diffusion(net) = &self.net else {
            return Err(Error::Config("noise prediction needs the diffusion head".into()));
        };
        let s = g.shape(tau).to_vec();
        let temb = timestep_embedding(level, self.config.time_dim);
        let temb = g.constant(Tensor::from_f64(&[1, self.config.time_dim], &temb)?);
        let temb = net.time_proj.forward(g, temb)?;
        let temb = g.reshape(temb, &[self.config.hidden])?;
        let h = net.traj_in.forward(g, tau)?;
        let h = g.add(h, cond)?;
        let mut h = g.add_suffix(h, temb)?;
        for blk in &net.blocks {
            h = blk.forward(g, h)?;
        }
        let h = net.ln_out.forward(g, h)?;
        let eps = net.eps_out.forward(g, h)?;
        let logit = net.conf_out.forward(g, h)?;
        let logit = g.reshape(logit, &[s[0], s[1]])?;
        Ok((eps, logit))
    }

    fn denoise_var<T: Scalar>(&self, g: &mut Graph<'_, T>, tau: Var, eps: Var, i: usize, j: usize) -> Result<Var> {
        let (ai, aj) = (self.schedule.alpha_bar(i), self.schedule.alpha_bar(j));
        let se = g.scale(eps, (1.0 - ai).sqrt());
        let x0 = g.sub(tau, se)?;
        let x0 = g.scale(x0, 1.0 / ai.sqrt());
        if j == 0 {
            return Ok(x0);
        }
        let a = g.scale(x0, aj.sqrt());
        let b = g.scale(eps, (1.0 - aj).sqrt());
        g.add(a, b)
    }

    /// Normalised anchors diffused to the start level with seeded noise.
    pub fn initial_candidates(&self, batch: usize, seed: u64) -> Result<(Vec<f64>, usize)> {
        let levels = self.schedule.levels(self.config.steps)?;
        let start = levels[0];
        let td = self.config.traj_dim();
        let mut rng = seeded_rng(seed);
        let mut out = Vec::with_capacity(batch * self.anchors.len() * td);
        for _ in 0..batch {
            for a in &self.anchors {
                let eps: Vec<f64> = (0..td).map(|_| rng.sample(StandardNormal)).collect();
                out.extend(forward_diffuse(&self.norm.normalize(&a.flat()), start, &self.schedule, &eps)?);
            }
        }
        Ok((out, start))
    }

    /// One planner pass. Diffusion runs the full truncated sampler on the
    /// tape so training sees the same computation as inference.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, ctx: &PlanContext, seed: u64) -> Result<PlanOutput> {
        let bsz = g.shape(ctx.c_visual)[0];
        let td = self.config.traj_dim();
        match &self.net {
            HeadNet::Diffusion(_) => {
                let (cond, endpoint) = self.build_condition(g, ctx)?;
                let k = self.anchors.len();
                let levels = self.schedule.levels(self.config.steps)?;
                let (init, _) = self.initial_candidates(bsz, seed)?;
                let mut tau = g.constant(Tensor::from_f64(&[bsz, k, td], &init)?);
                let mut logits = None;
                for w in levels.windows(2) {
                    let (eps, logit) = self.predict_noise(g, tau, w[0], cond)?;
                    tau = self.denoise_var(g, tau, eps, w[0], w[1])?;
                    logits = Some(logit);
                }
                Ok(PlanOutput {
                    candidates: self.denormalize(g, tau)?,
                    logits,
                    endpoint,
                })
            }
            HeadNet::Mlp(m) => {
                let x = g.concat(&[ctx.c_visual, ctx.ego], 1)?;
                let y = m.forward(g, x)?;
                self.single(g, y, bsz)
            }
            HeadNet::EgoMlp(m) => {
                let y = m.forward(g, ctx.ego)?;
                self.single(g, y, bsz)
            }
            HeadNet::Lstm(l) => {
                let x = g.concat(&[ctx.c_visual, ctx.ego], 1)?;
                let x = l.input.forward(g, x)?;
                let hd = self.config.hidden;
                let mut h: Option<Var> = None;
                let mut c: Option<Var> = None;
                let mut outs = Vec::new();
                for t in 0..self.config.horizon {
                    let te = timestep_embedding(t, self.config.time_dim);
                    let te = g.constant(Tensor::from_f64(&[1, self.config.time_dim], &te)?);
                    let te = l.step_embed.forward(g, te)?;
                    let te = g.reshape(te, &[hd])?;
                    let xt = g.add_suffix(x, te)?;
                    let mut gates = l.gates_x.forward(g, xt)?;
                    if let (Some(hp), true) = (h, self.config.recurrent) {
                        let gh = l.gates_h.forward(g, hp)?;
                        gates = g.add(gates, gh)?;
                    }
                    let i = g.narrow(gates, 1, 0, hd)?;
                    let f = g.narrow(gates, 1, hd, hd)?;
                    let gg = g.narrow(gates, 1, 2 * hd, hd)?;
                    let o = g.narrow(gates, 1, 3 * hd, hd)?;
                    let (i, f, gg, o) = (g.sigmoid(i), g.sigmoid(f), g.tanh(gg), g.sigmoid(o));
                    let ig = g.mul(i, gg)?;
                    let cn = match (c, self.config.recurrent) {
                        (Some(cp), true) => {
                            let fc = g.mul(f, cp)?;
                            g.add(fc, ig)?
                        }
                        _ => ig,
                    };
                    let tc = g.tanh(cn);
                    let hn = g.mul(o, tc)?;
                    outs.push(l.out.forward(g, hn)?);
                    h = Some(hn);
                    c = Some(cn);
                }
                let y = g.concat(&outs, 1)?;
                self.single(g, y, bsz)
            }
            HeadNet::Transformer(t) => {
                let d = g.shape(ctx.c_visual)[1];
                let tf = self.config.horizon;
                let q = g.param(t.queries);
                let q = g.reshape(q, &[1, tf, d])?;
                let q = g.index_select(q, 0, &vec![0; bsz])?;
                let x = g.concat(&[ctx.c_visual, ctx.ego], 1)?;
                let cnd = t.cond.forward(g, x)?;
                let cnd = Self::broadcast_rows(g, cnd, tf)?;
                let mut h = g.add(q, cnd)?;
                let a = t.ln1.forward(g, h)?;
                let a = t.self_attn.forward(g, a)?;
                h = g.add(h, a)?;
                let ctxt = t.ctx.forward(g, ctx.tokens)?;
                let a = t.ln2.forward(g, h)?;
                let a = t.cross.forward(g, a, ctxt)?;
                h = g.add(h, a)?;
                let a = t.ln3.forward(g, h)?;
                let a = t.mlp.forward(g, a)?;
                h = g.add(h, a)?;
                let y = t.out.forward(g, h)?;
                let y = g.reshape(y, &[bsz, tf * 3])?;
                self.single(g, y, bsz)
            }
        }
    }

    fn single<T: Scalar>(&self, g: &mut Graph<'_, T>, y: Var, bsz: usize) -> Result<PlanOutput> {
        let y = g.reshape(y, &[bsz, 1, self.config.traj_dim()])?;
        Ok(PlanOutput {
            candidates: self.denormalize(g, y)?,
            logits: None,
            endpoint: None,
        })
    }
}

impl From<DiffusionNet> for HeadNet {
    fn from(n: DiffusionNet) -> Self {
        HeadNet::Diffusion(n)
    }
}

/// Index of the largest value; ties resolve to the first.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-sample planning result in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub candidates: Vec<Trajectory>,
    pub confidences: Vec<f64>,
    pub selected: usize,
}

impl Plan {
    pub fn trajectory(&self) -> &Trajectory {
        &self.candidates[self.selected]
    }
}

/// Split a forward pass into per-sample plans with softmax confidences.
pub fn collect_plans<T: Scalar>(g: &Graph<'_, T>, out: &PlanOutput) -> Vec<Plan> {
    let s = g.shape(out.candidates).to_vec();
    let (bsz, k, td) = (s[0], s[1], s[2]);
    let cand = g.value(out.candidates).to_f64_vec();
    let logits = out.logits.map(|l| g.value(l).to_f64_vec());
    (0..bsz)
        .map(|b| {
            let candidates = (0..k)
                .map(|j| Trajectory::from_flat(&cand[(b * k + j) * td..(b * k + j + 1) * td]))
                .collect();
            let confidences = match &logits {
                Some(l) => {
                    let row = &l[b * k..(b + 1) * k];
                    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    e.iter().map(|v| v / z).collect()
                }
                None => vec![1.0],
            };
            let selected = argmax(&confidences);
            Plan {
                candidates,
                confidences,
                selected,
            }
        })
        .collect()
}

/// Seed for the candidate noise of a given batch.
pub fn noise_seed(seed: u64, step: u64) -> u64 {
    mix_seed(seed, step ^ 0x6e6f_6973_65)
}
