//! PDMS and EPDMS for the ground truth and for a few broken plans.
//!
//! cargo run --example scoring

use prix::planner::Trajectory;
use prix::score::{evaluate, Metric, MetricConfig};
use prix::sim::{generate_scene, SceneKind};

fn main() -> prix::Result<()> {
    let cfg = MetricConfig::default();
    let scene = generate_scene(SceneKind::Jam, 5);
    let gt = scene.ego_gt.clone();
    let stop = Trajectory::new(vec![[0.0; 3]; gt.len()])?;
    let fast = Trajectory::new(gt.waypoints.iter().map(|w| [w[0] * 1.8, w[1], w[2]]).collect())?;
    let swerve = Trajectory::new(gt.waypoints.iter().enumerate().map(|(i, w)| [w[0], w[1] + 1.5 * i as f64, w[2]]).collect())?;

    let labels: Vec<&str> = Metric::ALL.iter().map(|m| m.label()).collect();
    println!("{:<8} {:>6} {:>6}  {}", "plan", "PDMS", "EPDMS", labels.join(" "));
    for (name, t) in [("gt", &gt), ("stop", &stop), ("fast", &fast), ("swerve", &swerve)] {
        let r = evaluate(t, &scene, &cfg)?;
        let subs: Vec<String> = Metric::ALL.iter().map(|m| format!("{:.0}", r.scores.get(*m).unwrap_or(f64::NAN))).collect();
        println!("{name:<8} {:>6.3} {:>6.3}  {}", r.pdms, r.epdms.value, subs.join("  "));
    }
    Ok(())
}
