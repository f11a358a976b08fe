//! Noise schedule, forward diffusion and the deterministic denoising update.
//!
//! cargo run --example diffusion

use prix::planner::{denoise_step, forward_diffuse, make_anchors, BetaSpec, PlannerConfig};
use prix::sim::{generate_dataset, SceneKind};

fn main() -> prix::Result<()> {
    let cfg = PlannerConfig::default();
    let sched = cfg.schedule()?;
    println!("n = {}, truncation = {}", sched.n(), sched.truncation);
    for steps in [1, 2, 5, 10] {
        println!("{steps:>2} steps visit levels {:?}", sched.levels(steps)?);
    }
    let s = prix::planner::make_schedule(10, BetaSpec::Constant(0.1))?;
    println!("constant beta 0.1: alpha_bar(3) = {:.4}", s.alpha_bar(3));

    let scenes = generate_dataset(&SceneKind::ALL, 40, 1);
    let trajs: Vec<_> = scenes.iter().map(|s| s.ego_gt.clone()).collect();
    let anchors = make_anchors(&trajs, 8, 0)?;
    println!("anchor end points:");
    for a in &anchors {
        let w = a.waypoints.last().unwrap();
        println!("  ({:6.2}, {:6.2})", w[0], w[1]);
    }

    // with the true noise the update lands exactly on the clean trajectory
    let tau0 = trajs[0].flat();
    let eps: Vec<f64> = (0..tau0.len()).map(|i| ((i * 7919) % 13) as f64 / 6.5 - 1.0).collect();
    let start = sched.truncation;
    let noisy = forward_diffuse(&tau0, start, &sched, &eps)?;
    let back = denoise_step(&noisy, &eps, start, 0, &sched)?;
    let err = tau0.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("oracle denoise from level {start}: max error {err:.2e}");
    Ok(())
}
