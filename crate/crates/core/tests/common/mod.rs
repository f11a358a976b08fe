#![allow(dead_code)]

use prix::config::RunConfig;

/// A model small enough to train in a second or two.
pub const TINY: &str = r#"{
  "seed": 3,
  "model": {
    "backbone": {
      "image_hw": [16, 16],
      "stem_channels": 4,
      "channels": [8, 8],
      "blocks_per_stage": 1,
      "fpn_dim": 8,
      "cart": { "dim": 8, "heads": 2, "pooled_hw": [2, 2], "layers": 1 }
    },
    "camera": { "image_hw": [16, 16] },
    "planner": { "hidden": 16, "blocks": 1, "num_anchors": 4 },
    "det": { "heads": 2 },
    "seg": { "hidden": 8 }
  },
  "train": { "epochs": 2, "batch_size": 4 },
  "data": { "train_count": 8, "eval_count": 4 }
}"#;

pub fn tiny() -> RunConfig {
    RunConfig::from_json(TINY).unwrap()
}
