//! Synthetic scenes: generation, camera rendering, BEV labels, JSON lines.
//!
//! cargo run --example scenes -- /tmp/scenes.jsonl

use prix::sim::{bev_semantics, detection_targets, generate_scene, read_scenes, render_views, write_scenes, BevGrid, CameraRig, SceneKind, NUM_CLASSES};

fn main() -> prix::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "scenes.jsonl".into());
    let grid = BevGrid::default();
    let rig = CameraRig::default();
    let mut scenes = Vec::new();
    for (i, kind) in SceneKind::ALL.into_iter().enumerate() {
        let s = generate_scene(kind, 100 + i as u64);
        let views = render_views(&s, &rig);
        let sem = bev_semantics(&s, &grid);
        let mut hist = [0usize; NUM_CLASSES];
        sem.iter().for_each(|c| hist[*c] += 1);
        let end = s.ego_gt.waypoints.last().unwrap();
        println!(
            "{:<12} agents {:>2}  boxes {:>2}  views {:?}  end ({:5.1}, {:5.1})  classes {:?}",
            kind.name(),
            s.agents.len(),
            detection_targets(&s, &grid).len(),
            views.shape(),
            end[0],
            end[1],
            hist
        );
        scenes.push(s);
    }
    write_scenes(out.as_ref(), &scenes)?;
    assert_eq!(read_scenes(out.as_ref())?, scenes);
    println!("wrote {} scenes to {out}", scenes.len());
    Ok(())
}
