use prix::planner::Trajectory;
use prix::score::*;
use prix::sim::geometry::{box_overlap, time_to_contact, OrientedBox};
use prix::sim::*;
use prix::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn subs(v: &[(Metric, f64)]) -> SubScores {
    v.iter().copied().collect()
}

fn all(v: f64) -> SubScores {
    Metric::ALL.iter().map(|m| (*m, v)).collect()
}

#[test]
fn pdms_hand_cases() {
    use Metric::*;
    let cfg = MetricConfig::default();
    assert_eq!(pdms_aggregate(&all(1.0), &cfg).unwrap(), 1.0);
    let mut s = all(1.0);
    s.set(Nc, 0.0);
    assert_eq!(pdms_aggregate(&s, &cfg).unwrap(), 0.0);
    let mut s = all(1.0);
    s.set(Dac, 0.0);
    assert_eq!(pdms_aggregate(&s, &cfg).unwrap(), 0.0);
    // (5 * 0.8 + 5 + 2) / 12
    let mut s = all(1.0);
    s.set(Ep, 0.8);
    assert!((pdms_aggregate(&s, &cfg).unwrap() - 11.0 / 12.0).abs() < 1e-9);
    // TTC and comfort failing leave 5 * EP / 12
    let s = subs(&[(Nc, 1.0), (Dac, 1.0), (Ttc, 0.0), (Ep, 0.6), (Comfort, 0.0)]);
    assert!((pdms_aggregate(&s, &cfg).unwrap() - 3.0 / 12.0).abs() < 1e-12);
    // a partial penalty scales the average
    let mut s = all(1.0);
    s.set(Nc, 0.5);
    assert_eq!(pdms_aggregate(&s, &cfg).unwrap(), 0.5);
    let missing = subs(&[(Nc, 1.0), (Dac, 1.0), (Ep, 1.0), (Ttc, 1.0)]);
    assert!(matches!(pdms_aggregate(&missing, &cfg), Err(Error::Contract(_))));
}

#[test]
fn epdms_filters_metrics_the_reference_fails() {
    use Metric::*;
    let cfg = MetricConfig::default();
    let mut agent = all(1.0);
    agent.set(Lk, 0.0);
    agent.set(Ep, 0.5);
    let human = all(1.0);
    // (5 + 2.5 + 0 + 2 + 2) / 16
    let a = epdms_aggregate(&agent, &human, &cfg).unwrap();
    assert!((a.value - 11.5 / 16.0).abs() < 1e-12);
    assert!(a.filtered.is_empty());

    let mut human = all(1.0);
    human.set(Lk, 0.0);
    let a = epdms_aggregate(&agent, &human, &cfg).unwrap();
    assert_eq!(a.filtered, vec![Lk]);
    assert!(!a.weights.contains_key(&Lk));
    assert!((a.value - 11.5 / 14.0).abs() < 1e-12);

    // a penalty the human also fails is neutral
    let mut agent = all(1.0);
    agent.set(Tl, 0.0);
    let mut human = all(1.0);
    human.set(Tl, 0.0);
    assert_eq!(epdms_aggregate(&agent, &human, &cfg).unwrap().value, 1.0);
    assert_eq!(epdms_aggregate(&agent, &all(1.0), &cfg).unwrap().value, 0.0);

    let a = epdms_aggregate(&all(0.0), &all(0.0), &cfg).unwrap();
    assert_eq!(a.value, 0.0);
    assert!(a.diagnostic.is_some());
}

fn random_report(rng: &mut ChaCha8Rng) -> SubScores {
    Metric::ALL
        .iter()
        .map(|m| {
            let v = match rng.gen_range(0..3) {
                0 => 0.0,
                1 => 1.0,
                _ => rng.gen(),
            };
            (*m, v)
        })
        .collect()
}

#[test]
fn epdms_self_consistency() {
    let cfg = MetricConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..1000 {
        let r = random_report(&mut rng);
        let a = epdms_aggregate(&r, &r, &cfg).unwrap();
        if a.weights.is_empty() {
            assert_eq!(a.value, 0.0);
            assert!(a.diagnostic.is_some());
        } else {
            assert_eq!(a.value, 1.0, "report {i}: {r:?}");
        }
    }
}

proptest! {
    #[test]
    fn aggregates_stay_in_unit_interval(seed in 0u64..10_000) {
        let cfg = MetricConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, h) = (random_report(&mut rng), random_report(&mut rng));
        let p = pdms_aggregate(&a, &cfg).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        let e = epdms_aggregate(&a, &h, &cfg).unwrap().value;
        prop_assert!((0.0..=1.0).contains(&e));
        // raising any sub-score never lowers the aggregate
        let mut up = a.clone();
        let m = Metric::ALL[rng.gen_range(0..10)];
        up.set(m, 1.0);
        prop_assert!(pdms_aggregate(&up, &cfg).unwrap() >= p - 1e-12);
        prop_assert!(epdms_aggregate(&up, &h, &cfg).unwrap().value >= e - 1e-12);
    }
}

fn random_box(rng: &mut ChaCha8Rng) -> OrientedBox {
    OrientedBox::new(
        [rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)],
        rng.gen_range(0.3..3.0),
        rng.gen_range(0.3..6.0),
        rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
    )
}

/// Signed separation along the best separating axis; negative means overlap depth.
fn separation(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let proj = |o: &OrientedBox, ax: [f64; 2]| {
        o.corners()
            .iter()
            .map(|c| c[0] * ax[0] + c[1] * ax[1])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    };
    a.axes()
        .into_iter()
        .chain(b.axes())
        .map(|ax| {
            let (a0, a1) = proj(a, ax);
            let (b0, b1) = proj(b, ax);
            (b0 - a1).max(a0 - b1)
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Dense samples on the boundary and interior of `a`, tested against `b`.
fn sampled_overlap(a: &OrientedBox, b: &OrientedBox) -> bool {
    let c = a.corners();
    let n = 400;
    let edge = (0..4).flat_map(|e| {
        let (p, q) = (c[e], c[(e + 1) % 4]);
        (0..n).map(move |i| {
            let t = i as f64 / n as f64;
            [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
        })
    });
    let [f, l] = a.axes();
    let interior = (0..40).flat_map(|i| {
        (0..40).map(move |j| {
            let u = (i as f64 / 39.0 - 0.5) * a.length;
            let v = (j as f64 / 39.0 - 0.5) * a.width;
            [a.center[0] + u * f[0] + v * l[0], a.center[1] + u * f[1] + v * l[1]]
        })
    });
    edge.chain(interior).any(|p| b.contains(p))
}

#[test]
fn box_overlap_matches_point_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (mut checked, mut disagree, mut hits) = (0, 0, 0);
    for _ in 0..1000 {
        let (a, b) = (random_box(&mut rng), random_box(&mut rng));
        if separation(&a, &b).abs() < 1e-3 {
            continue;
        }
        let oracle = sampled_overlap(&a, &b) || sampled_overlap(&b, &a);
        checked += 1;
        hits += oracle as usize;
        if box_overlap(&a, &b) != oracle {
            disagree += 1;
        }
    }
    assert_eq!(disagree, 0);
    assert!(checked > 950);
    assert!(hits > 100 && hits < checked - 100);
}

#[test]
fn time_to_contact_matches_stepping() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..300 {
        let a = random_box(&mut rng);
        let b = random_box(&mut rng);
        let b = OrientedBox::new([b.center[0] + 12.0, b.center[1]], b.width, b.length, b.yaw);
        let va = [rng.gen_range(0.0..8.0), rng.gen_range(-1.0..1.0)];
        let vb = [rng.gen_range(-8.0..0.0), rng.gen_range(-1.0..1.0)];
        let got = time_to_contact(&a, va, &b, vb, 3.0);
        let at = |t: f64| {
            let m = |o: &OrientedBox, v: [f64; 2]| OrientedBox::new([o.center[0] + v[0] * t, o.center[1] + v[1] * t], o.width, o.length, o.yaw);
            box_overlap(&m(&a, va), &m(&b, vb))
        };
        let stepped = (0..=3000).map(|k| k as f64 * 1e-3).find(|t| at(*t));
        match (got, stepped) {
            (Some(g), Some(s)) => assert!((g - s).abs() <= 1.1e-3, "{g} vs {s}"),
            (None, None) => {}
            (Some(g), None) => assert!(at(g), "contact at {g} not confirmed"),
            (None, Some(s)) => panic!("missed contact at {s}"),
        }
    }
}

#[test]
fn ground_truth_is_clean_for_every_kind() {
    let cfg = MetricConfig::default();
    for kind in SceneKind::ALL {
        let mut total = 0.0;
        for seed in 0..25 {
            let scene = generate_scene(kind, 500 + seed);
            let r = evaluate(&scene.ego_gt, &scene, &cfg).unwrap();
            assert!(r.scores.all_pass(), "{kind:?} seed {seed}: {:?}", r.scores);
            assert_eq!(r.scores.values.len(), 10);
            assert_eq!(r.epdms.value, 1.0);
            total += r.pdms;
        }
        assert!(total / 25.0 >= 0.99);
    }
}

fn straight_scene() -> Scene {
    generate_scene(SceneKind::Straight, 1)
}

#[test]
fn collisions_zero_the_score() {
    let cfg = MetricConfig::default();
    let mut scene = straight_scene().without_agents();
    let gt = scene.ego_gt.clone();
    let end = gt.waypoints[3];
    scene.agents.push(Agent {
        pose: [end[0], end[1], 2.0, 4.5, end[2]],
        class: AgentClass::Vehicle,
        script: vec![[end[0], end[1], end[2]]; gt.len()],
    });
    let r = evaluate(&gt, &scene, &cfg).unwrap();
    assert_eq!(r.scores.get(Metric::Nc).unwrap(), 0.0);
    assert_eq!(r.pdms, 0.0);
}

#[test]
fn standing_still_earns_no_progress() {
    let cfg = MetricConfig::default();
    let scene = straight_scene().without_agents();
    let stop = Trajectory::new(vec![[0.0; 3]; scene.ego_gt.len()]).unwrap();
    let s = score_scene(&stop, &scene, &cfg).unwrap();
    assert_eq!(s.get(Metric::Ep).unwrap(), 0.0);
    assert_eq!(s.get(Metric::Nc).unwrap(), 1.0);
}

#[test]
fn leaving_the_road_fails_drivable_area() {
    let cfg = MetricConfig::default();
    let scene = straight_scene().without_agents();
    let off = Trajectory::new((1..=scene.ego_gt.len()).map(|t| [t as f64, 60.0, 0.0]).collect()).unwrap();
    let s = score_scene(&off, &scene, &cfg).unwrap();
    assert_eq!(s.get(Metric::Dac).unwrap(), 0.0);
    assert_eq!(pdms_aggregate(&s, &cfg).unwrap(), 0.0);
}

#[test]
fn horizon_mismatch_is_a_contract_error() {
    let cfg = MetricConfig::default();
    let scene = straight_scene();
    let short = Trajectory::new(vec![[1.0, 0.0, 0.0]; 3]).unwrap();
    assert!(matches!(score_scene(&short, &scene, &cfg), Err(Error::Contract(_))));
}

#[test]
fn comfort_bounds() {
    let line: Vec<[f64; 2]> = (0..9).map(|t| [t as f64 * 5.0, 0.0]).collect();
    assert_eq!(comfort(&line, 0.5, 4.0, 8.0), 1.0);
    // 0.5 a t^2 with a = 3 stays under 4 m/s^2
    let acc: Vec<[f64; 2]> = (0..9).map(|t| [1.5 * (t as f64 * 0.5).powi(2), 0.0]).collect();
    assert_eq!(comfort(&acc, 0.5, 4.0, 8.0), 1.0);
    assert_eq!(comfort(&acc, 0.5, 2.0, 8.0), 0.0);
    let zig: Vec<[f64; 2]> = (0..9).map(|t| [t as f64, if t % 2 == 0 { 0.0 } else { 1.0 }]).collect();
    assert_eq!(comfort(&zig, 0.5, 4.0, 8.0), 0.0);
}

#[test]
fn metric_config_validation() {
    assert!(MetricConfig::default().validate().is_ok());
    let mut c = MetricConfig::default();
    c.pdms_weights.insert(Metric::Nc, 1.0);
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let mut c = MetricConfig::default();
    c.epdms_weights.insert(Metric::Lk, 0.0);
    assert!(c.validate().is_err());
    let mut c = MetricConfig::default();
    c.dt = 0.0;
    assert!(c.validate().is_err());
}

#[test]
fn scenes_are_deterministic_and_round_trip() {
    let a = generate_dataset(&SceneKind::ALL, 8, 42);
    let b = generate_dataset(&SceneKind::ALL, 8, 42);
    assert_eq!(a, b);
    assert_ne!(a, generate_dataset(&SceneKind::ALL, 8, 43));
    assert_eq!(a.iter().map(|s| s.kind).collect::<Vec<_>>()[..4], SceneKind::ALL);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.jsonl");
    write_scenes(&p, &a).unwrap();
    assert_eq!(read_scenes(&p).unwrap(), a);

    let mut text = std::fs::read_to_string(&p).unwrap();
    text.push_str("{\"kind\": \"straight\"}\n");
    std::fs::write(&p, text).unwrap();
    match read_scenes(&p) {
        Err(Error::Data(m)) => assert!(m.contains(":9:"), "{m}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn scene_validation() {
    let mut s = straight_scene();
    s.drivable.truncate(2);
    assert!(s.validate().is_err());
    let mut s = generate_scene(SceneKind::Jam, 3);
    assert!(!s.agents.is_empty());
    s.agents[0].script.pop();
    assert!(s.validate().is_err());
    let mut s = straight_scene();
    s.ego_gt.waypoints[0][0] = f64::INFINITY;
    assert!(s.validate().is_err());
}

#[test]
fn rendering_contracts() {
    let scene = generate_scene(SceneKind::Intersection, 8);
    let rig = CameraRig::default();
    let views = render_views(&scene, &rig);
    let (h, w) = rig.image_hw;
    assert_eq!(views.shape(), &[3, 3, h, w]);
    assert!(views.data().iter().all(|v| (0.0..=1.0).contains(v)));
    let grid = BevGrid::default();
    let sem = bev_semantics(&scene, &grid);
    assert_eq!(sem.len(), grid.rows * grid.cols);
    assert!(sem.iter().all(|c| *c < NUM_CLASSES));
    assert_eq!(render_views(&scene, &rig), views);
}
