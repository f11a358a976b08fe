//! Run configuration shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::LossWeights;
use crate::model::ModelConfig;
use crate::score::MetricConfig;
use crate::sim::{generate_dataset, read_scenes, Scene, SceneKind};
use crate::tensor::{AdamWConfig, MultiStepLr};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// JSON-lines training scenes; generated when absent.
    pub train_scenes: Option<PathBuf>,
    /// JSON-lines evaluation scenes; the training split when absent.
    pub eval_scenes: Option<PathBuf>,
    pub kinds: Vec<SceneKind>,
    pub train_count: usize,
    pub eval_count: usize,
    pub train_seed: u64,
    pub eval_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_scenes: None,
            eval_scenes: None,
            kinds: SceneKind::ALL.to_vec(),
            train_count: 200,
            eval_count: 200,
            train_seed: 1000,
            eval_seed: 2000,
        }
    }
}

impl DataConfig {
    pub fn train_split(&self) -> Result<Vec<Scene>> {
        self.split(self.train_scenes.as_deref(), self.train_count, self.train_seed)
    }

    pub fn eval_split(&self) -> Result<Vec<Scene>> {
        match &self.eval_scenes {
            Some(p) => read_scenes(p),
            None => self.split(None, self.eval_count, self.eval_seed),
        }
    }

    fn split(&self, path: Option<&Path>, count: usize, seed: u64) -> Result<Vec<Scene>> {
        let scenes = match path {
            Some(p) => read_scenes(p)?,
            None => generate_dataset(&self.kinds, count, seed),
        };
        if scenes.is_empty() {
            return Err(Error::Data("scene split is empty".into()));
        }
        Ok(scenes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub schedule: MultiStepLr,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            optimizer: AdamWConfig::default(),
            schedule: MultiStepLr::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: MetricConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            eval: MetricConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.eval.validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.data.kinds.is_empty() {
            return Err(Error::Config("data.kinds is empty".into()));
        }
        let o = &self.train.optimizer;
        if !(o.lr > 0.0) || !(o.weight_decay >= 0.0) || !(o.encoder_lr_mult >= 0.0) {
            return Err(Error::Config("optimizer lr must be > 0, decay and multiplier >= 0".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; `PRIX_SEED` overrides the seed.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        cfg.apply_env()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(s) = std::env::var("PRIX_SEED") {
            self.seed = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("PRIX_SEED `{s}` is not an unsigned integer")))?;
        }
        Ok(())
    }
}
