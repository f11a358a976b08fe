//! Residual CNN backbone with CaRT recalibration between stages and an
//! FPN-style top-down fusion.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Builder, Conv2d, ParamGroup, ParamStore, TransformerBlock};
use crate::tensor::{Graph, Scalar, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSharing {
    Shared,
    Separate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    ConcatProject,
    Add,
}

/// What sits between backbone stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CartMode {
    /// Full recalibration with self-attention.
    Attention,
    /// Pool, project, upsample and merge, no attention.
    PoolOnly,
    /// Plain backbone.
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CartConfig {
    pub mode: CartMode,
    /// Width of the shared attention space.
    pub dim: usize,
    pub pooled_hw: (usize, usize),
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub dropout: f64,
    pub sharing: WeightSharing,
    pub merge: MergeMode,
}

impl Default for CartConfig {
    fn default() -> Self {
        Self {
            mode: CartMode::Attention,
            dim: 64,
            pooled_hw: (4, 8),
            layers: 2,
            heads: 4,
            mlp_ratio: 2,
            dropout: 0.1,
            sharing: WeightSharing::Shared,
            merge: MergeMode::ConcatProject,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub cameras: usize,
    /// Per-camera image size.
    pub image_hw: (usize, usize),
    pub stem_channels: usize,
    /// Output channels of each stage; every stage halves the resolution.
    pub channels: Vec<usize>,
    pub blocks_per_stage: usize,
    /// Width of the fused map.
    pub fpn_dim: usize,
    pub cart: CartConfig,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            cameras: 3,
            image_hw: (32, 32),
            stem_channels: 16,
            channels: vec![16, 32, 64, 128],
            blocks_per_stage: 2,
            fpn_dim: 64,
            cart: CartConfig::default(),
        }
    }
}

impl BackboneConfig {
    /// Width of the horizontally concatenated camera canvas.
    pub fn canvas_hw(&self) -> (usize, usize) {
        (self.image_hw.0, self.image_hw.1 * self.cameras)
    }

    /// Spatial size after the stem and each stage.
    pub fn stage_hw(&self) -> Vec<(usize, usize)> {
        let (mut h, mut w) = self.canvas_hw();
        let mut out = Vec::new();
        h = h.div_ceil(2);
        w = w.div_ceil(2);
        for _ in &self.channels {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
            out.push((h, w));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.cart;
        if self.channels.is_empty() || self.cameras == 0 || self.blocks_per_stage == 0 {
            return Err(Error::Config("backbone needs cameras, stages and blocks".into()));
        }
        if c.mode != CartMode::Off {
            if c.dim == 0 || c.heads == 0 || c.dim % c.heads != 0 {
                return Err(Error::Config(format!(
                    "cart dim {} not divisible by {} heads",
                    c.dim, c.heads
                )));
            }
            if c.pooled_hw.0 == 0 || c.pooled_hw.1 == 0 || c.layers == 0 {
                return Err(Error::Config("cart pooled size and layer count must be >= 1".into()));
            }
        }
        let div = 1usize << (self.channels.len() + 1);
        let (h, w) = self.canvas_hw();
        if h % div != 0 || w % div != 0 {
            return Err(Error::Config(format!(
                "canvas {h}x{w} must be divisible by {div} for {} stages",
                self.channels.len()
            )));
        }
        Ok(())
    }
}

/// Pre-activation residual block: `shortcut(x) + conv(relu(conv(relu(x))))`.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub shortcut: Option<Conv2d>,
}

impl ResBlock {
    fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        let mut s = b.scope(name);
        let shortcut = if stride != 1 || cin != cout {
            Some(Conv2d::new(&mut s, "shortcut", cin, cout, 1, stride, false)?)
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2d::new(&mut s, "conv1", cin, cout, 3, stride, true)?,
            conv2: Conv2d::new(&mut s, "conv2", cout, cout, 3, 1, true)?,
            shortcut,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = g.relu(x);
        let h = self.conv1.forward(g, h)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, h)?;
        let s = match &self.shortcut {
            Some(c) => c.forward(g, x)?,
            None => x,
        };
        g.add(s, h)
    }
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub blocks: Vec<ResBlock>,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl Stage {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let c = g.shape(x)[1];
        if c != self.in_ch {
            return Err(Error::Shape(format!("stage expects {} channels, got {c}", self.in_ch)));
        }
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(g, h)?;
        }
        Ok(h)
    }
}

/// Per-level projections of one recalibration site.
#[derive(Debug, Clone)]
pub struct CartLevel {
    pub down: Conv2d,
    pub up: Conv2d,
    pub merge: Option<Conv2d>,
    /// Index into [`Backbone::sa`].
    pub sa: usize,
}

#[derive(Debug, Clone)]
pub struct Fpn {
    pub lateral: Vec<Conv2d>,
    pub smooth: Vec<Conv2d>,
}

impl Fpn {
    /// Top-down fusion; `maps` ordered shallow to deep. Output has the
    /// resolution of `maps[0]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, maps: &[Var]) -> Result<Var> {
        let n = maps.len();
        if n == 0 || n > self.lateral.len() {
            return Err(Error::Shape(format!("fpn built for {} levels, got {n}", self.lateral.len())));
        }
        let mut top = self.lateral[n - 1].forward(g, maps[n - 1])?;
        top = self.smooth[n - 1].forward(g, top)?;
        for i in (0..n - 1).rev() {
            let s = g.shape(maps[i]).to_vec();
            let up = g.upsample_nearest(top, (s[2], s[3]))?;
            let lat = self.lateral[i].forward(g, maps[i])?;
            let sum = g.add(up, lat)?;
            top = self.smooth[i].forward(g, sum)?;
        }
        Ok(top)
    }
}

#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub stages: Vec<Var>,
    pub recalibrated: Vec<Var>,
    /// Attended token maps `[B, d, ph, pw]`, one per level when attention is on.
    pub attention_out: Vec<Var>,
    /// `[B, F, H/4, W/4]`
    pub fused: Var,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub stem: Conv2d,
    pub stages: Vec<Stage>,
    pub sa: Vec<Vec<TransformerBlock>>,
    pub cart: Vec<CartLevel>,
    pub fpn: Fpn,
}

impl Backbone {
    /// Registers parameters under `backbone.*`, all in the encoder group.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: &BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut root = Builder::new(store, seed, ParamGroup::Encoder);
        let mut b = root.scope("backbone");
        let stem = Conv2d::new(&mut b, "stem", 3, config.stem_channels, 3, 2, true)?;
        let mut stages = Vec::new();
        let mut cin = config.stem_channels;
        for (i, &cout) in config.channels.iter().enumerate() {
            let mut s = b.scope(&format!("stage{}", i + 1));
            let mut blocks = Vec::new();
            for k in 0..config.blocks_per_stage {
                let (ci, stride) = if k == 0 { (cin, 2) } else { (cout, 1) };
                blocks.push(ResBlock::new(&mut s, &format!("block{}", k + 1), ci, cout, stride)?);
            }
            stages.push(Stage {
                blocks,
                in_ch: cin,
                out_ch: cout,
            });
            cin = cout;
        }

        let c = &config.cart;
        let levels = config.channels.len();
        let mut sa = Vec::new();
        if c.mode == CartMode::Attention {
            let copies = match c.sharing {
                WeightSharing::Shared => 1,
                WeightSharing::Separate => levels,
            };
            for k in 0..copies {
                let name = match c.sharing {
                    WeightSharing::Shared => "cart.sa".to_string(),
                    WeightSharing::Separate => format!("cart.sa{}", k + 1),
                };
                let mut s = b.scope(&name);
                let blocks = (0..c.layers)
                    .map(|l| {
                        TransformerBlock::new(&mut s, &format!("layer{}", l + 1), c.dim, c.heads, c.mlp_ratio * c.dim, c.dropout)
                    })
                    .collect::<Result<Vec<_>>>()?;
                sa.push(blocks);
            }
        }
        let mut cart = Vec::new();
        if c.mode != CartMode::Off {
            for (i, &ch) in config.channels.iter().enumerate() {
                let mut s = b.scope(&format!("cart.level{}", i + 1));
                let merge = match c.merge {
                    MergeMode::ConcatProject => Some(Conv2d::new(&mut s, "merge", 2 * ch, ch, 1, 1, true)?),
                    MergeMode::Add => None,
                };
                cart.push(CartLevel {
                    down: Conv2d::new(&mut s, "down", ch, c.dim, 1, 1, true)?,
                    up: Conv2d::new(&mut s, "up", c.dim, ch, 1, 1, true)?,
                    merge,
                    sa: if c.sharing == WeightSharing::Shared { 0 } else { i },
                });
            }
        }
        let mut f = b.scope("fpn");
        let mut lateral = Vec::new();
        let mut smooth = Vec::new();
        for (i, &ch) in config.channels.iter().enumerate() {
            lateral.push(Conv2d::new(&mut f, &format!("lateral{}", i + 1), ch, config.fpn_dim, 1, 1, true)?);
            smooth.push(Conv2d::new(&mut f, &format!("smooth{}", i + 1), config.fpn_dim, config.fpn_dim, 3, 1, true)?);
        }
        Ok(Self {
            config: config.clone(),
            stem,
            stages,
            sa,
            cart,
            fpn: Fpn { lateral, smooth },
        })
    }

    /// Shared self-attention stack on `[B, N, d]` tokens.
    pub fn shared_attention<T: Scalar>(&self, g: &mut Graph<'_, T>, tokens: Var, level: usize) -> Result<Var> {
        let idx = self.cart.get(level).map_or(0, |c| c.sa);
        let mut h = tokens;
        for blk in &self.sa[idx] {
            h = blk.forward(g, h)?;
        }
        Ok(h)
    }

    /// Recalibrate `x` (stage `level`, 0-based). Returns the merged map and
    /// the attended token map when attention runs.
    pub fn recalibrate<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, level: usize) -> Result<(Var, Option<Var>)> {
        let c = &self.config.cart;
        let Some(lv) = self.cart.get(level) else {
            return Ok((x, None));
        };
        let s = g.shape(x).to_vec();
        let (b, h, w) = (s[0], s[2], s[3]);
        let (ph, pw) = c.pooled_hw;
        let p = g.adaptive_avg_pool(x, c.pooled_hw)?;
        let mut t = lv.down.forward(g, p)?;
        let mut attended = None;
        if c.mode == CartMode::Attention {
            let tok = g.reshape(t, &[b, c.dim, ph * pw])?;
            let tok = g.permute(tok, &[0, 2, 1])?;
            let tok = self.shared_attention(g, tok, level)?;
            let tok = g.permute(tok, &[0, 2, 1])?;
            t = g.reshape(tok, &[b, c.dim, ph, pw])?;
            attended = Some(t);
        }
        let up = g.upsample_bilinear(t, (h, w))?;
        let y = lv.up.forward(g, up)?;
        let out = match &lv.merge {
            Some(m) => {
                let cat = g.concat(&[x, y], 1)?;
                m.forward(g, cat)?
            }
            None => g.add(x, y)?,
        };
        Ok((out, attended))
    }

    /// `[B, Ncam, 3, H, W]` images to a `[B, 3, H, Ncam*W]` canvas.
    pub fn canvas<T: Scalar>(&self, g: &mut Graph<'_, T>, images: Var) -> Result<Var> {
        let s = g.shape(images).to_vec();
        let (h, w) = self.config.image_hw;
        if s.len() != 5 || s[1] != self.config.cameras {
            return Err(Error::Config(format!(
                "expected {} cameras in [B, Ncam, 3, H, W], got {s:?}",
                self.config.cameras
            )));
        }
        if s[2] != 3 || s[3] != h || s[4] != w {
            return Err(Error::Shape(format!("expected {h}x{w} RGB views, got {s:?}")));
        }
        let x = g.permute(images, &[0, 2, 3, 1, 4])?;
        g.reshape(x, &[s[0], 3, h, s[1] * w])
    }

    /// Stages with interleaved recalibration, then top-down fusion.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, images: Var) -> Result<FeaturePyramid> {
        let x = self.canvas(g, images)?;
        let mut h = self.stem.forward(g, x)?;
        let mut stages = Vec::new();
        let mut recalibrated = Vec::new();
        let mut attention_out = Vec::new();
        for (i, st) in self.stages.iter().enumerate() {
            let xi = st.forward(g, h)?;
            let (xc, a) = self.recalibrate(g, xi, i)?;
            stages.push(xi);
            recalibrated.push(xc);
            attention_out.extend(a);
            h = xc;
        }
        let fused = self.fpn.forward(g, &recalibrated)?;
        Ok(FeaturePyramid {
            stages,
            recalibrated,
            attention_out,
            fused,
        })
    }

    /// Pyramid plus the globally pooled condition vector `[B, F]`.
    pub fn extract_features<T: Scalar>(&self, g: &mut Graph<'_, T>, images: Var) -> Result<(FeaturePyramid, Var)> {
        let fp = self.forward(g, images)?;
        let s = g.shape(fp.fused).to_vec();
        let flat = g.reshape(fp.fused, &[s[0], s[1], s[2] * s[3]])?;
        let c = g.mean_axis(flat, 2)?;
        Ok((fp, c))
    }
}

/// Parameter counts per submodule for a backbone built from `config`.
pub fn count_params(config: &BackboneConfig) -> Result<BTreeMap<String, usize>> {
    let mut store = ParamStore::<f32>::new();
    Backbone::new(&mut store, config, 0)?;
    let mut out = BTreeMap::new();
    out.insert("stem".into(), store.count_prefix("backbone.stem."));
    let stages = (1..=config.channels.len())
        .map(|i| store.count_prefix(&format!("backbone.stage{i}.")))
        .sum();
    out.insert("stages".into(), stages);
    out.insert("cart.sa".into(), store.count_prefix("backbone.cart.sa"));
    out.insert("cart.proj".into(), store.count_prefix("backbone.cart.level"));
    out.insert("fpn".into(), store.count_prefix("backbone.fpn."));
    out.insert("total".into(), store.total());
    Ok(out)
}
