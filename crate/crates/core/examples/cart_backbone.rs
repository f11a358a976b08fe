//! Camera images through the ResNet stages, CaRT recalibration and the FPN.
//!
//! cargo run --release --example cart_backbone

use prix::backbone::{count_params, Backbone, BackboneConfig, CartMode, WeightSharing};
use prix::nn::ParamStore;
use prix::sim::{generate_scene, render_views, CameraRig, SceneKind};
use prix::tensor::Graph;

fn main() -> prix::Result<()> {
    let cfg = BackboneConfig::default();
    let mut store = ParamStore::<f32>::new();
    let backbone = Backbone::new(&mut store, &cfg, 0)?;

    let scene = generate_scene(SceneKind::Intersection, 3);
    let views = render_views(&scene, &CameraRig::default());
    let mut shape = vec![1];
    shape.extend_from_slice(views.shape());
    let images = views.reshape(&shape)?;

    let mut g = Graph::with_params(&store, false);
    let x = g.constant(images);
    let (fp, c) = backbone.extract_features(&mut g, x)?;
    for (i, (s, r)) in fp.stages.iter().zip(&fp.recalibrated).enumerate() {
        println!("stage {}: {:?} -> recalibrated {:?}", i + 1, g.shape(*s), g.shape(*r));
    }
    println!("fused map {:?}, condition vector {:?}", g.shape(fp.fused), g.shape(c));

    for (name, sharing, mode) in [
        ("shared", WeightSharing::Shared, CartMode::Attention),
        ("separate", WeightSharing::Separate, CartMode::Attention),
        ("no CaRT", WeightSharing::Shared, CartMode::Off),
    ] {
        let mut c = cfg.clone();
        c.cart.sharing = sharing;
        c.cart.mode = mode;
        let n = count_params(&c)?;
        println!("{name:>9}: total {:>8}  self-attention {:>7}", n["total"], n["cart.sa"]);
    }
    Ok(())
}
