//! Training, evaluation and ablation drivers.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::backbone::{count_params, CartMode, WeightSharing};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::heads::LossWeights;
use crate::model::{prepare_samples, LossParts, Prix, Sample};
use crate::nn::mix_seed;
use crate::planner::{noise_seed, PlannerHead, Trajectory};
use crate::score::{evaluate, Metric, ScoreReport};
use crate::sim::Scene;
use crate::tensor::{seeded_rng, AdamW, Graph};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub plan: f64,
    pub det: f64,
    pub sem: f64,
}

pub const LOG_HEADER: &str = "epoch,lr,total,plan,det,sem";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:.6},{:.6},{:.6},{:.6}",
            self.epoch, self.lr, self.total, self.plan, self.det, self.sem
        )
    }
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for e in log {
        s.push_str(&e.csv_row());
        s.push('\n');
    }
    s
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters after the last successful update.
    pub model: Prix<f32>,
    pub log: Vec<EpochLog>,
    pub step: u64,
    /// Set when a non-finite loss or gradient stopped training early.
    pub aborted: Option<String>,
}

/// Trains on `scenes` for the configured budget.
pub fn train(cfg: &RunConfig, scenes: &[Scene]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Data("no training scenes".into()));
    }
    let mut model = Prix::<f32>::new(&cfg.model, cfg.seed)?;
    let gts: Vec<Trajectory> = scenes.iter().map(|s| s.ego_gt.clone()).collect();
    model.fit_data(&gts, cfg.seed)?;
    let samples = prepare_samples(scenes, &cfg.model);
    train_samples(cfg, model, &samples)
}

/// Training loop over prepared samples with an initialised model.
pub fn train_samples(cfg: &RunConfig, mut model: Prix<f32>, samples: &[Sample]) -> Result<TrainOutcome> {
    let w = cfg.loss;
    let frozen = [w.plan, w.det, w.sem].iter().all(|v| *v == 0.0);
    let mut opt = AdamW::new(cfg.train.optimizer.clone(), cfg.train.schedule.clone());
    let mut rng = seeded_rng(mix_seed(cfg.seed, 0x5u64 << 40));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::new();
    let mut step = 0u64;
    for epoch in 0..cfg.train.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossParts::default();
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.train.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let mut g = Graph::with_params(&model.store, true);
            g.set_seed(mix_seed(cfg.seed, step));
            let (loss, parts) = model.loss(&mut g, &batch, noise_seed(cfg.seed, step), &w)?;
            if !parts.total.is_finite() {
                let msg = format!("non-finite loss at epoch {} step {step}: {parts:?}", epoch + 1);
                return Ok(TrainOutcome {
                    model,
                    log,
                    step,
                    aborted: Some(msg),
                });
            }
            g.backward(loss)?;
            let grads = g.param_grads();
            drop(g);
            if !frozen {
                model.store.zero_grad();
                model.store.accumulate(&grads);
                let backup = model.store.clone();
                if let Err(e) = opt.step(&mut model.store, epoch) {
                    model.store = backup;
                    return Ok(TrainOutcome {
                        model,
                        log,
                        step,
                        aborted: Some(e.to_string()),
                    });
                }
            }
            step += 1;
            batches += 1;
            sum.total += parts.total;
            sum.plan += parts.plan;
            sum.det += parts.det;
            sum.sem += parts.sem;
        }
        let n = batches.max(1) as f64;
        log.push(EpochLog {
            epoch: epoch + 1,
            lr: opt.lr(crate::nn::ParamGroup::Head, epoch),
            total: sum.total / n,
            plan: sum.plan / n,
            det: sum.det / n,
            sem: sum.sem / n,
        });
    }
    Ok(TrainOutcome {
        model,
        log,
        step,
        aborted: None,
    })
}

/// One scored scene.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SceneResult {
    pub index: usize,
    pub kind: String,
    pub seed: u64,
    pub report: ScoreReport,
    pub ade: f64,
}

/// Means over scored scenes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub scenes: Vec<SceneResult>,
    pub means: Vec<(Metric, f64)>,
    pub pdms: f64,
    pub epdms: f64,
    pub ade: f64,
    /// Scenes that could not be scored, with the reason.
    pub errors: Vec<(usize, String)>,
}

/// The Table-1 metric columns and their order.
pub const TABLE_COLUMNS: [Metric; 5] = [Metric::Nc, Metric::Dac, Metric::Ttc, Metric::Comfort, Metric::Ep];

impl EvalSummary {
    pub fn from_results(scenes: Vec<SceneResult>, errors: Vec<(usize, String)>) -> Self {
        let n = scenes.len().max(1) as f64;
        let means = Metric::ALL
            .iter()
            .map(|&m| (m, scenes.iter().map(|s| s.report.scores.get(m).unwrap_or(0.0)).sum::<f64>() / n))
            .collect();
        Self {
            pdms: scenes.iter().map(|s| s.report.pdms).sum::<f64>() / n,
            epdms: scenes.iter().map(|s| s.report.epdms.value).sum::<f64>() / n,
            ade: scenes.iter().map(|s| s.ade).sum::<f64>() / n,
            means,
            scenes,
            errors,
        }
    }

    pub fn mean(&self, m: Metric) -> f64 {
        self.means.iter().find(|(k, _)| *k == m).map_or(0.0, |(_, v)| *v)
    }

    /// JSON object with exactly the Table-1 keys.
    pub fn metrics_json(&self) -> String {
        let mut map = serde_json::Map::new();
        for m in TABLE_COLUMNS {
            map.insert(m.label().into(), self.mean(m).into());
        }
        map.insert("PDMS".into(), self.pdms.into());
        serde_json::to_string_pretty(&serde_json::Value::Object(map)).expect("plain map") + "\n"
    }

    pub fn per_scene_csv(&self) -> String {
        let mut s = String::from("scene,kind,seed");
        for m in Metric::ALL {
            s.push(',');
            s.push_str(m.label());
        }
        s.push_str(",PDMS,EPDMS,ADE\n");
        for r in &self.scenes {
            let _ = write!(s, "{},{},{}", r.index, r.kind, r.seed);
            for m in Metric::ALL {
                let _ = write!(s, ",{}", r.report.scores.get(m).unwrap_or(f64::NAN));
            }
            let _ = writeln!(s, ",{:.6},{:.6},{:.6}", r.report.pdms, r.report.epdms.value, r.ade);
        }
        for (i, e) in &self.errors {
            let _ = writeln!(s, "{i},error,\"{}\"", e.replace('"', "'"));
        }
        s
    }
}

/// Score given trajectories against their scenes. Scenes that fail to
/// score are listed in `errors` and left out of the means.
pub fn score_trajectories(scenes: &[Scene], trajs: &[Trajectory], cfg: &crate::score::MetricConfig) -> Result<EvalSummary> {
    if scenes.len() != trajs.len() {
        return Err(Error::Data(format!("{} scenes but {} trajectories", scenes.len(), trajs.len())));
    }
    cfg.validate()?;
    let mut out = Vec::with_capacity(scenes.len());
    let mut errors = Vec::new();
    for (i, (s, t)) in scenes.iter().zip(trajs).enumerate() {
        match evaluate(t, s, cfg) {
            Ok(report) => out.push(SceneResult {
                index: i,
                kind: s.kind.name().into(),
                seed: s.seed,
                ade: if t.len() == s.ego_gt.len() { t.ade(&s.ego_gt) } else { f64::NAN },
                report,
            }),
            Err(e) => errors.push((i, e.to_string())),
        }
    }
    Ok(EvalSummary::from_results(out, errors))
}

/// Plans every scene and scores the selected trajectory. Candidate noise
/// is seeded per scene so results do not depend on batching.
pub fn plan_scenes(model: &Prix<f32>, samples: &[Sample], seed: u64) -> Result<Vec<Trajectory>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let plans = model.plan(&[s], mix_seed(seed, 0xE7A1 + i as u64))?;
            Ok(plans[0].trajectory().clone())
        })
        .collect()
}

pub fn evaluate_model(model: &Prix<f32>, scenes: &[Scene], cfg: &RunConfig) -> Result<EvalSummary> {
    let samples = prepare_samples(scenes, &model.config);
    let trajs = plan_scenes(model, &samples, cfg.seed)?;
    score_trajectories(scenes, &trajs, &cfg.eval)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Study {
    SharedSa,
    CartPresence,
    Steps,
    Losses,
    AnchorsEndpoints,
    Planners,
}

impl Study {
    pub const ALL: [Study; 6] = [
        Study::SharedSa,
        Study::CartPresence,
        Study::Steps,
        Study::Losses,
        Study::AnchorsEndpoints,
        Study::Planners,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Study::SharedSa => "shared_sa",
            Study::CartPresence => "cart_presence",
            Study::Steps => "steps",
            Study::Losses => "losses",
            Study::AnchorsEndpoints => "anchors_endpoints",
            Study::Planners => "planners",
        }
    }
}

impl std::str::FromStr for Study {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown study `{s}`")))
    }
}

/// Named variants of `base` for a study.
pub fn study_variants(study: Study, base: &RunConfig) -> Vec<(String, RunConfig)> {
    let with = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match study {
        Study::SharedSa => {
            let d = base.model.backbone.cart.dim;
            let mut v = vec![(
                "separate".to_string(),
                with(&|c| c.model.backbone.cart.sharing = WeightSharing::Separate),
            )];
            for dim in [d / 2, d, d * 3 / 2] {
                v.push((
                    format!("shared-{dim}"),
                    with(&|c| {
                        c.model.backbone.cart.sharing = WeightSharing::Shared;
                        c.model.backbone.cart.dim = dim;
                    }),
                ));
            }
            v
        }
        Study::CartPresence => vec![
            ("with_cart".into(), with(&|c| c.model.backbone.cart.mode = CartMode::Attention)),
            ("no_cart".into(), with(&|c| c.model.backbone.cart.mode = CartMode::Off)),
        ],
        Study::Steps => [2usize, 5, 10, 20, 50]
            .into_iter()
            .map(|s| (format!("steps-{s}"), with(&|c| c.model.planner.steps = s)))
            .collect(),
        Study::Losses => {
            let rows: [(&str, bool, bool, bool); 5] = [
                ("plan", false, false, false),
                ("plan+box", true, false, false),
                ("plan+sem", false, true, false),
                ("plan+box+sem", true, true, false),
                ("full", true, true, true),
            ];
            rows.into_iter()
                .map(|(name, reg, sem, cls)| {
                    let l = base.loss;
                    let loss = LossWeights {
                        plan: l.plan,
                        det: if reg || cls { l.det } else { 0.0 },
                        cls: if cls { l.cls } else { 0.0 },
                        reg: if reg { l.reg } else { 0.0 },
                        sem: if sem { l.sem } else { 0.0 },
                    };
                    (name.to_string(), with(&|c| c.loss = loss))
                })
                .collect()
        }
        Study::AnchorsEndpoints => [("anchors", true, false), ("endpoints", false, true), ("anchors+endpoints", true, true)]
            .into_iter()
            .map(|(name, a, e)| {
                (
                    name.to_string(),
                    with(&|c| {
                        c.model.planner.head = PlannerHead::Diffusion;
                        c.model.planner.use_anchors = a;
                        c.model.planner.endpoint = e;
                    }),
                )
            })
            .collect(),
        Study::Planners => [
            ("diffusion", PlannerHead::Diffusion),
            ("mlp", PlannerHead::Mlp),
            ("transformer", PlannerHead::Transformer),
            ("lstm", PlannerHead::Lstm),
            ("ego_mlp", PlannerHead::EgoMlp),
        ]
        .into_iter()
        .map(|(name, h)| (name.to_string(), with(&|c| c.model.planner.head = h)))
        .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub params: usize,
    pub sa_params: usize,
    pub pdms: f64,
    pub epdms: f64,
    pub ade: f64,
    pub final_loss: f64,
    /// Median milliseconds per scene.
    pub planner_ms: f64,
    pub e2e_ms: f64,
}

pub const ABLATION_HEADER: &str = "variant,params,sa_params,pdms,epdms,ade,final_loss,planner_ms,e2e_ms";

impl AblationRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.3},{:.3}",
            self.variant,
            self.params,
            self.sa_params,
            self.pdms,
            self.epdms,
            self.ade,
            self.final_loss,
            self.planner_ms,
            self.e2e_ms
        )
    }
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Median wall-clock milliseconds per scene for planner-only and full passes.
pub fn throughput(model: &Prix<f32>, sample: &Sample, runs: usize) -> Result<(f64, f64)> {
    let mut e2e = Vec::with_capacity(runs);
    let mut plan = Vec::with_capacity(runs);
    for i in 0..runs {
        let t = Instant::now();
        let mut g = Graph::with_params(&model.store, false);
        let (images, ego) = model.inputs(&mut g, &[sample])?;
        let (fp, c_visual) = model.backbone.extract_features(&mut g, images)?;
        let s = g.shape(fp.fused).to_vec();
        let tokens = g.reshape(fp.fused, &[s[0], s[1], s[2] * s[3]])?;
        let tokens = g.permute(tokens, &[0, 2, 1])?;
        let ctx = crate::planner::PlanContext { c_visual, ego, tokens };
        let tp = Instant::now();
        model.planner.forward(&mut g, &ctx, i as u64)?;
        plan.push(tp.elapsed().as_secs_f64() * 1e3);
        e2e.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok((median(&mut plan), median(&mut e2e)))
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Train and evaluate one variant.
pub fn run_variant(name: &str, cfg: &RunConfig, train_scenes: &[Scene], eval_scenes: &[Scene], timing_runs: usize) -> Result<AblationRow> {
    let out = train(cfg, train_scenes)?;
    if let Some(msg) = out.aborted {
        return Err(Error::NonFinite(format!("variant {name}: {msg}")));
    }
    let summary = evaluate_model(&out.model, eval_scenes, cfg)?;
    let counts = count_params(&cfg.model.backbone)?;
    let (planner_ms, e2e_ms) = if timing_runs > 0 {
        let s = Sample::from_scene(&eval_scenes[0], &cfg.model);
        throughput(&out.model, &s, timing_runs)?
    } else {
        (0.0, 0.0)
    };
    Ok(AblationRow {
        variant: name.to_string(),
        params: out.model.store.total(),
        sa_params: counts.get("cart.sa").copied().unwrap_or(0),
        pdms: summary.pdms,
        epdms: summary.epdms,
        ade: summary.ade,
        final_loss: out.log.last().map_or(f64::NAN, |e| e.total),
        planner_ms,
        e2e_ms,
    })
}

/// Every variant of a study, in declaration order.
pub fn ablate(study: Study, base: &RunConfig, timing_runs: usize) -> Result<Vec<AblationRow>> {
    let train_scenes = base.data.train_split()?;
    let eval_scenes = base.data.eval_split()?;
    study_variants(study, base)
        .iter()
        .map(|(name, cfg)| {
            cfg.validate()?;
            run_variant(name, cfg, &train_scenes, &eval_scenes, timing_runs)
        })
        .collect()
}
