//! Run one ablation study on a small configuration and print the CSV.
//!
//! cargo run --release --example ablation -- steps

use prix::config::RunConfig;
use prix::train::{ablate, ablation_csv, study_variants, Study};

fn main() -> prix::Result<()> {
    let study: Study = std::env::args().nth(1).unwrap_or_else(|| "cart_presence".into()).parse()?;
    let mut base = RunConfig::default();
    let bb = &mut base.model.backbone;
    bb.image_hw = (16, 16);
    bb.channels = vec![8, 16];
    bb.blocks_per_stage = 1;
    bb.fpn_dim = 16;
    bb.cart.dim = 16;
    base.model.camera.image_hw = (16, 16);
    base.model.planner.hidden = 32;
    base.model.planner.num_anchors = 6;
    base.train.epochs = 3;
    base.train.batch_size = 4;
    base.data.train_count = 16;
    base.data.eval_count = 8;

    for (name, _) in study_variants(study, &base) {
        println!("variant {name}");
    }
    print!("{}", ablation_csv(&ablate(study, &base, 5)?));
    Ok(())
}
