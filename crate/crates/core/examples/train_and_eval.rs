//! Train a small model, checkpoint it, reload it and evaluate.
//!
//! cargo run --release --example train_and_eval

use prix::checkpoint::Checkpoint;
use prix::config::RunConfig;
use prix::train::{evaluate_model, log_csv, train};

fn main() -> prix::Result<()> {
    let mut cfg = RunConfig::default();
    let bb = &mut cfg.model.backbone;
    bb.image_hw = (16, 16);
    bb.channels = vec![16, 32];
    bb.blocks_per_stage = 1;
    bb.fpn_dim = 32;
    cfg.model.camera.image_hw = (16, 16);
    cfg.model.planner.hidden = 64;
    cfg.model.planner.num_anchors = 8;
    cfg.train.epochs = 6;
    cfg.train.batch_size = 4;
    cfg.train.optimizer.lr = 1e-3;
    cfg.train.schedule.milestones = vec![4, 5];
    cfg.data.train_count = 32;
    cfg.data.eval_count = 16;
    cfg.validate()?;

    let scenes = cfg.data.train_split()?;
    let out = train(&cfg, &scenes)?;
    print!("{}", log_csv(&out.log));

    let path = std::env::temp_dir().join("prix_example.ckpt");
    Checkpoint::from_model(&out.model, &cfg, out.step).save(&path)?;
    let model = Checkpoint::load(&path)?.to_model()?;

    let eval = cfg.data.eval_split()?;
    let summary = evaluate_model(&model, &eval, &cfg)?;
    print!("{}", summary.metrics_json());
    println!("EPDMS {:.3}  ADE {:.2} m", summary.epdms, summary.ade);
    Ok(())
}
