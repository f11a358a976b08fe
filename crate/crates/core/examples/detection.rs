//! Auxiliary heads: Hungarian matching, detection and segmentation losses.
//!
//! cargo run --example detection

use prix::heads::{det_loss_var, hungarian, sem_loss_var, DetConfig, DetectionHead, LossWeights, SegConfig, SegmentationHead};
use prix::nn::ParamStore;
use prix::sim::{bev_semantics, detection_targets, generate_scene, SceneKind};
use prix::tensor::{Graph, Init, Tensor};

fn main() -> prix::Result<()> {
    let cost = vec![vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]];
    println!("assignment {:?}", hungarian(&cost)?);

    let scene = generate_scene(SceneKind::Jam, 2);
    let seg_cfg = SegConfig::default();
    let boxes = detection_targets(&scene, &seg_cfg.grid);
    let labels = bev_semantics(&scene, &seg_cfg.grid);

    let dim = 64;
    let mut store = ParamStore::<f32>::new();
    let det = DetectionHead::new(&mut store, &DetConfig::default(), dim, 0)?;
    let seg = SegmentationHead::new(&mut store, &seg_cfg, dim, 0)?;
    let mut g = Graph::with_params(&store, false);
    let fused = g.constant(Tensor::create(&[1, dim, 4, 12], Init::Gaussian { std: 1.0, seed: 4 })?);
    let tokens = g.reshape(fused, &[1, dim, 48])?;
    let tokens = g.permute(tokens, &[0, 2, 1])?;

    let out = det.forward(&mut g, tokens)?;
    let l = det_loss_var(&mut g, &out, &[boxes.clone()], &det.config, &LossWeights::default())?;
    println!("{} agent boxes, untrained detection loss {:.3}", boxes.len(), g.value(l).data()[0]);

    let logits = seg.forward(&mut g, fused)?;
    let l = sem_loss_var(&mut g, logits, &labels)?;
    println!("semantic logits {:?}, loss {:.3} (ln 7 = {:.3})", g.shape(logits), g.value(l).data()[0], 7f64.ln());
    Ok(())
}
