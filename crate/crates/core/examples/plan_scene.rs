//! Plan on one scene: candidates, confidences and the selected trajectory.
//!
//! cargo run --release --example plan_scene

use prix::model::{Prix, Sample};
use prix::score::{evaluate, MetricConfig};
use prix::sim::{generate_dataset, SceneKind};

fn main() -> prix::Result<()> {
    let scenes = generate_dataset(&SceneKind::ALL, 40, 0);
    let cfg = prix::model::ModelConfig::default();
    let mut model = Prix::<f32>::new(&cfg, 1)?;
    let trajs: Vec<_> = scenes.iter().map(|s| s.ego_gt.clone()).collect();
    model.fit_data(&trajs, 1)?;

    let scene = &scenes[2];
    let sample = Sample::from_scene(scene, &cfg);
    let plan = &model.plan(&[&sample], 9)?[0];
    for (i, (c, p)) in plan.candidates.iter().zip(&plan.confidences).enumerate() {
        let w = c.waypoints.last().unwrap();
        let mark = if i == plan.selected { "*" } else { " " };
        println!("{mark} candidate {i:>2}  conf {p:.3}  end ({:6.2}, {:6.2})  ADE {:.2}", w[0], w[1], c.ade(&scene.ego_gt));
    }
    let r = evaluate(plan.trajectory(), scene, &MetricConfig::default())?;
    println!("untrained selection: PDMS {:.3}, EPDMS {:.3}", r.pdms, r.epdms.value);
    Ok(())
}
