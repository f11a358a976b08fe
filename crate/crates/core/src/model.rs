//! The full network: backbone, planner and auxiliary heads, plus the
//! per-scene training samples it consumes.

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::heads::{det_loss_var, plan_loss_var, sem_loss_var, DetConfig, DetOutput, DetectionHead, LossWeights, SegConfig, SegmentationHead};
use crate::nn::ParamStore;
use crate::planner::{collect_plans, Plan, PlanContext, PlanOutput, Planner, PlannerConfig, Trajectory};
use crate::sim::{bev_semantics, detection_targets, render_views, CameraRig, Scene};
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub planner: PlannerConfig,
    pub det: DetConfig,
    pub seg: SegConfig,
    pub camera: CameraRig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.planner.schedule()?;
        if self.camera.image_hw != self.backbone.image_hw {
            return Err(Error::Config(format!(
                "camera renders {:?} but the backbone expects {:?}",
                self.camera.image_hw, self.backbone.image_hw
            )));
        }
        if self.backbone.cameras != self.camera.yaws.len() {
            return Err(Error::Config(format!("backbone expects {} cameras, rig has 3", self.backbone.cameras)));
        }
        Ok(())
    }
}

/// Everything one scene contributes to training and evaluation.
#[derive(Debug, Clone)]
pub struct Sample {
    /// `[Ncam, 3, H, W]`
    pub images: Tensor<f32>,
    pub ego: [f64; 5],
    pub semantics: Vec<usize>,
    pub boxes: Vec<[f64; 5]>,
    pub gt: Trajectory,
}

impl Sample {
    pub fn from_scene(scene: &Scene, config: &ModelConfig) -> Self {
        Self {
            images: render_views(scene, &config.camera),
            ego: scene.ego_state.features(),
            semantics: bev_semantics(scene, &config.seg.grid),
            boxes: detection_targets(scene, &config.seg.grid),
            gt: scene.ego_gt.clone(),
        }
    }
}

pub fn prepare_samples(scenes: &[Scene], config: &ModelConfig) -> Vec<Sample> {
    scenes.iter().map(|s| Sample::from_scene(s, config)).collect()
}

/// Network outputs for a batch.
#[derive(Debug, Clone)]
pub struct Outputs {
    pub c_visual: Var,
    pub fused: Var,
    pub plan: PlanOutput,
    pub det: Option<DetOutput>,
    pub sem: Option<Var>,
}

/// Loss values of one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub plan: f64,
    pub det: f64,
    pub sem: f64,
}

#[derive(Debug, Clone)]
pub struct Prix<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub backbone: Backbone,
    pub planner: Planner,
    pub det: DetectionHead,
    pub seg: SegmentationHead,
}

impl<T: Scalar> Prix<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, &config.backbone, seed)?;
        let f = config.backbone.fpn_dim;
        let planner = Planner::new(&mut store, &config.planner, f, seed)?;
        let det = DetectionHead::new(&mut store, &config.det, f, seed)?;
        let seg = SegmentationHead::new(&mut store, &config.seg, f, seed)?;
        Ok(Self {
            config: config.clone(),
            store,
            backbone,
            planner,
            det,
            seg,
        })
    }

    /// Fits anchors and trajectory statistics on training ground truth.
    pub fn fit_data(&mut self, trajs: &[Trajectory], seed: u64) -> Result<()> {
        self.planner.fit_data(trajs, seed)
    }

    /// Batched image and ego inputs as tape constants.
    pub fn inputs(&self, g: &mut Graph<'_, T>, batch: &[&Sample]) -> Result<(Var, Var)> {
        let first = batch.first().ok_or_else(|| Error::Data("empty batch".into()))?;
        let mut shape = vec![batch.len()];
        shape.extend_from_slice(first.images.shape());
        let mut data = Vec::with_capacity(batch.len() * first.images.numel());
        for s in batch {
            if s.images.shape() != first.images.shape() {
                return Err(Error::Shape("batch images differ in shape".into()));
            }
            data.extend(s.images.data().iter().map(|&v| T::cast(v as f64)));
        }
        let images = g.constant(Tensor::new(&shape, data)?);
        let ego: Vec<f64> = batch.iter().flat_map(|s| s.ego).collect();
        let ego = g.constant(Tensor::from_f64(&[batch.len(), 5], &ego)?);
        Ok((images, ego))
    }

    /// Full forward pass. Auxiliary heads are skipped when `heads` is false.
    pub fn forward(&self, g: &mut Graph<'_, T>, batch: &[&Sample], seed: u64, heads: (bool, bool)) -> Result<Outputs> {
        let (images, ego) = self.inputs(g, batch)?;
        let (fp, c_visual) = self.backbone.extract_features(g, images)?;
        let s = g.shape(fp.fused).to_vec();
        let tokens = g.reshape(fp.fused, &[s[0], s[1], s[2] * s[3]])?;
        let tokens = g.permute(tokens, &[0, 2, 1])?;
        let ctx = PlanContext { c_visual, ego, tokens };
        let plan = self.planner.forward(g, &ctx, seed)?;
        let det = if heads.0 { Some(self.det.forward(g, tokens)?) } else { None };
        let sem = if heads.1 { Some(self.seg.forward(g, fp.fused)?) } else { None };
        Ok(Outputs {
            c_visual,
            fused: fp.fused,
            plan,
            det,
            sem,
        })
    }

    /// Weighted total loss on the tape and its parts.
    pub fn loss(&self, g: &mut Graph<'_, T>, batch: &[&Sample], seed: u64, w: &LossWeights) -> Result<(Var, LossParts)> {
        w.validate()?;
        let out = self.forward(g, batch, seed, (w.det > 0.0, w.sem > 0.0))?;
        let gt: Vec<Trajectory> = batch.iter().map(|s| s.gt.clone()).collect();
        let (plan, _) = plan_loss_var(g, &out.plan, &gt)?;
        let mut parts = LossParts {
            plan: scalar(g, plan),
            ..Default::default()
        };
        let mut total = g.scale(plan, w.plan);
        if let Some(d) = &out.det {
            let boxes: Vec<Vec<[f64; 5]>> = batch.iter().map(|s| s.boxes.clone()).collect();
            let l = det_loss_var(g, d, &boxes, &self.config.det, w)?;
            parts.det = scalar(g, l);
            let l = g.scale(l, w.det);
            total = g.add(total, l)?;
        }
        if let Some(sm) = out.sem {
            let labels: Vec<usize> = batch.iter().flat_map(|s| s.semantics.iter().copied()).collect();
            let l = sem_loss_var(g, sm, &labels)?;
            parts.sem = scalar(g, l);
            let l = g.scale(l, w.sem);
            total = g.add(total, l)?;
        }
        parts.total = scalar(g, total);
        Ok((total, parts))
    }

    /// Inference plans for a batch of samples.
    pub fn plan(&self, batch: &[&Sample], seed: u64) -> Result<Vec<Plan>> {
        let mut g = Graph::with_params(&self.store, false);
        let out = self.forward(&mut g, batch, seed, (false, false))?;
        Ok(collect_plans(&g, &out.plan))
    }
}

fn scalar<T: Scalar>(g: &Graph<'_, T>, v: Var) -> f64 {
    g.value(v).to_f64_vec()[0]
}
