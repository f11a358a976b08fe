use prix::heads::*;
use prix::nn::ParamStore;
use prix::planner::{PlanOutput, Trajectory};
use prix::sim::{BevGrid, NUM_CLASSES};
use prix::tensor::gradcheck::{check_inputs, check_params, CheckOptions};
use prix::tensor::{Graph, Init, Tensor};
use prix::Error;
use proptest::prelude::*;

fn brute_force(cost: &[Vec<f64>]) -> f64 {
    fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
        if row == cost.len() {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                best = best.min(cost[row][j] + go(cost, row + 1, used));
                used[j] = false;
            }
        }
        best
    }
    go(cost, 0, &mut vec![false; cost[0].len()])
}

proptest! {
    #[test]
    fn hungarian_is_optimal(
        (n, m, vals) in (1usize..=5, 0usize..=3)
            .prop_flat_map(|(n, extra)| (Just(n), Just(n + extra), prop::collection::vec(0.0f64..10.0, n * (n + extra))))
    ) {
        let cost: Vec<Vec<f64>> = vals.chunks(m).map(|r| r.to_vec()).collect();
        let a = hungarian(&cost).unwrap();
        prop_assert_eq!(a.len(), n);
        let mut cols = a.clone();
        cols.sort();
        cols.dedup();
        prop_assert_eq!(cols.len(), n);
        let total: f64 = a.iter().enumerate().map(|(i, j)| cost[i][*j]).sum();
        prop_assert!((total - brute_force(&cost)).abs() < 1e-9);
    }
}

#[test]
fn hungarian_edges() {
    assert!(hungarian(&[]).unwrap().is_empty());
    assert_eq!(hungarian(&[vec![3.0, 1.0, 2.0]]).unwrap(), vec![1]);
    assert!(matches!(hungarian(&[vec![1.0], vec![2.0]]), Err(Error::Shape(_))));
    assert!(hungarian(&[vec![1.0, 2.0], vec![2.0]]).is_err());
}

const DIM: usize = 8;

fn det_cfg() -> DetConfig {
    DetConfig {
        queries: 4,
        heads: 2,
        ..DetConfig::default()
    }
}

fn tokens(bsz: usize, seed: u64) -> Tensor<f64> {
    Tensor::create(&[bsz, 6, DIM], Init::Gaussian { std: 1.0, seed }).unwrap()
}

#[test]
fn detection_outputs_are_bounded() {
    let cfg = det_cfg();
    let mut store = ParamStore::<f64>::new();
    let head = DetectionHead::new(&mut store, &cfg, DIM, 1).unwrap();
    let mut g = Graph::with_params(&store, false);
    let t = g.constant(tokens(3, 2));
    let out = head.forward(&mut g, t).unwrap();
    assert_eq!(g.shape(out.boxes), &[3, 4, 5]);
    assert_eq!(g.shape(out.logits), &[3, 4]);
    for b in 0..3 {
        let boxes = decode_boxes(&g, &out, b);
        assert_eq!(boxes.len(), 4);
        for bx in boxes {
            assert!(bx.center[0].abs() <= 32.0 && bx.center[1].abs() <= 16.0);
            assert!(bx.size[0] > 0.0 && bx.size[1] > 0.0);
            assert!(bx.yaw.abs() <= std::f64::consts::PI);
            assert!(bx.score > 0.0 && bx.score < 1.0);
        }
    }
}

fn det_loss(store: &ParamStore<f64>, head: &DetectionHead, gt: &[Vec<[f64; 5]>], w: &LossWeights) -> prix::Result<f64> {
    let mut g = Graph::with_params(store, false);
    let t = g.constant(tokens(gt.len(), 5));
    let out = head.forward(&mut g, t)?;
    let l = det_loss_var(&mut g, &out, gt, &head.config, w)?;
    Ok(g.value(l).data()[0])
}

#[test]
fn detection_loss_cases() {
    let cfg = det_cfg();
    let mut store = ParamStore::<f64>::new();
    let head = DetectionHead::new(&mut store, &cfg, DIM, 3).unwrap();
    let w = LossWeights::default();
    let one = vec![[1.0, 2.0, 2.0, 4.5, 0.1]];
    let too_many = vec![vec![[0.0; 5]; 5]];
    assert!(matches!(det_loss(&store, &head, &too_many, &w), Err(Error::Data(_))));
    assert!(det_loss(&store, &head, &[one.clone()], &w).unwrap() > 0.0);
    assert!(det_loss(&store, &head, &[vec![], one.clone()], &w).is_ok());
    // regression weight only moves the loss when agents exist
    let no_reg = LossWeights { reg: 0.0, ..w };
    assert_eq!(
        det_loss(&store, &head, &[vec![]], &w).unwrap(),
        det_loss(&store, &head, &[vec![]], &no_reg).unwrap()
    );
    assert!(det_loss(&store, &head, &[one.clone()], &w).unwrap() > det_loss(&store, &head, &[one], &no_reg).unwrap());
    let none = LossWeights { cls: 0.0, reg: 0.0, ..w };
    assert_eq!(det_loss(&store, &head, &[vec![[3.0; 5]]], &none).unwrap(), 0.0);
}

#[test]
fn matched_regression_is_plain_l1() {
    // with the classification term off, an exact box on the matched query gives zero
    let cfg = det_cfg();
    let mut store = ParamStore::<f64>::new();
    let head = DetectionHead::new(&mut store, &cfg, DIM, 4).unwrap();
    let mut g = Graph::with_params(&store, false);
    let t = g.constant(tokens(1, 5));
    let out = head.forward(&mut g, t).unwrap();
    let boxes = decode_boxes(&g, &out, 0);
    let b = boxes[2];
    let exact = vec![vec![[b.center[0], b.center[1], b.size[0], b.size[1], b.yaw]]];
    let w = LossWeights { cls: 0.0, ..LossWeights::default() };
    let l = det_loss_var(&mut g, &out, &exact, &cfg, &w).unwrap();
    assert!(g.value(l).data()[0].abs() < 1e-12);
    let shifted = vec![vec![[b.center[0] + 1.0, b.center[1], b.size[0], b.size[1], b.yaw]]];
    let l = det_loss_var(&mut g, &out, &shifted, &cfg, &w).unwrap();
    // one of five coordinates is off by a metre, unless another query is closer
    assert!(g.value(l).data()[0] <= 0.2 + 1e-12);
}

#[test]
fn detection_gradcheck() {
    let cfg = det_cfg();
    let gt = vec![vec![[1.0, -2.0, 2.0, 4.5, 0.3], [-5.0, 3.0, 1.8, 4.0, -1.0]], vec![[8.0, 1.0, 2.0, 5.0, 0.0]]];
    for seed in 0..20 {
        let mut store = ParamStore::<f64>::new();
        let head = DetectionHead::new(&mut store, &cfg, DIM, seed).unwrap();
        let err = check_params(&store, CheckOptions { max_entries: 8, ..CheckOptions::default() }, |g| {
            let t = g.constant(tokens(2, seed + 9));
            let out = head.forward(g, t)?;
            det_loss_var(g, &out, &gt, &cfg, &LossWeights::default())
        })
        .unwrap();
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

fn seg_head(store: &mut ParamStore<f64>) -> SegmentationHead {
    let cfg = SegConfig {
        hidden: 4,
        grid: BevGrid {
            rows: 6,
            cols: 4,
            ..BevGrid::default()
        },
    };
    SegmentationHead::new(store, &cfg, DIM, 0).unwrap()
}

#[test]
fn segmentation_shapes_and_uniform_loss() {
    let mut store = ParamStore::<f64>::new();
    let head = seg_head(&mut store);
    let mut g = Graph::with_params(&store, false);
    let x = g.constant(Tensor::create(&[2, DIM, 3, 2], Init::Gaussian { std: 1.0, seed: 1 }).unwrap());
    let y = head.forward(&mut g, x).unwrap();
    assert_eq!(g.shape(y), &[2, NUM_CLASSES, 6, 4]);

    // equal logits give ln C for any labels
    let z = g.constant(Tensor::zeros(&[2, NUM_CLASSES, 3, 3]));
    let labels: Vec<usize> = (0..18).map(|i| i % NUM_CLASSES).collect();
    let l = sem_loss_var(&mut g, z, &labels).unwrap();
    assert!((g.value(l).data()[0] - (NUM_CLASSES as f64).ln()).abs() < 1e-12);

    let bad = vec![NUM_CLASSES; 18];
    assert!(matches!(sem_loss_var(&mut g, z, &bad), Err(Error::Domain(_))));
    assert!(matches!(sem_loss_var(&mut g, z, &labels[..5]), Err(Error::Shape(_))));
}

#[test]
fn segmentation_loss_matches_hand_softmax() {
    let mut rng_vals = Vec::new();
    for i in 0..(NUM_CLASSES * 4) {
        rng_vals.push(((i * 37 % 11) as f64 - 5.0) / 3.0);
    }
    let labels = vec![0, 3, 6, 2];
    let mut g = Graph::<f64>::new();
    let z = g.constant(Tensor::from_f64(&[1, NUM_CLASSES, 2, 2], &rng_vals).unwrap());
    let l = sem_loss_var(&mut g, z, &labels).unwrap();
    let mut want = 0.0;
    for (p, &k) in labels.iter().enumerate() {
        let col: Vec<f64> = (0..NUM_CLASSES).map(|c| rng_vals[c * 4 + p]).collect();
        let lse = col.iter().map(|v| v.exp()).sum::<f64>().ln();
        want += lse - col[k];
    }
    assert!((g.value(l).data()[0] - want / 4.0).abs() < 1e-12);

    for seed in 0..20 {
        let x = Tensor::<f64>::create(&[1, NUM_CLASSES, 2, 2], Init::Gaussian { std: 1.0, seed }).unwrap();
        let err = check_inputs(&[x], CheckOptions::default(), |g, v| sem_loss_var(g, v[0], &labels)).unwrap();
        assert!(err < 1e-4);
    }
}

fn traj(pts: &[[f64; 3]]) -> Trajectory {
    Trajectory::new(pts.to_vec()).unwrap()
}

#[test]
fn plan_loss_picks_the_closest_candidate() {
    let gt = traj(&[[1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
    let near = [1.0, 0.5, 0.0, 2.0, 0.0, 0.1];
    let far = [5.0, 5.0, 0.0, 9.0, 9.0, 0.0];
    let mut g = Graph::<f64>::new();
    let flat: Vec<f64> = far.iter().chain(&near).copied().collect();
    let cand = g.constant(Tensor::from_f64(&[1, 2, 6], &flat).unwrap());
    let logits = g.constant(Tensor::from_f64(&[1, 2], &[0.0, 0.0]).unwrap());
    let out = PlanOutput {
        candidates: cand,
        logits: Some(logits),
        endpoint: None,
    };
    let (l, pos) = plan_loss_var(&mut g, &out, &[gt.clone()]).unwrap();
    assert_eq!(pos, vec![1]);
    // per-waypoint L1 (0.5, 0.1) averaged, plus ln 2 for the uniform logits
    let want = 0.3 + 2f64.ln();
    assert!((g.value(l).data()[0] - want).abs() < 1e-12);
    let pred = Trajectory::from_flat(&near);
    assert!((loss_plan(&pred, &gt).unwrap() - 0.3).abs() < 1e-12);

    let wrong = traj(&[[1.0, 0.0, 0.0]]);
    assert!(matches!(plan_loss_var(&mut g, &out, &[wrong]), Err(Error::Shape(_))));

    let end = g.constant(Tensor::from_f64(&[1, 2], &[2.0, 1.0]).unwrap());
    let out = PlanOutput {
        candidates: cand,
        logits: None,
        endpoint: Some(end),
    };
    let (l, _) = plan_loss_var(&mut g, &out, &[gt]).unwrap();
    assert!((g.value(l).data()[0] - (0.3 + 0.5)).abs() < 1e-12);
}

#[test]
fn loss_weights_reject_bad_values() {
    assert!(LossWeights::default().validate().is_ok());
    let nan = LossWeights { sem: f64::NAN, ..LossWeights::default() };
    assert!(matches!(nan.validate(), Err(Error::Config(_))));
    let neg = LossWeights { reg: -1.0, ..LossWeights::default() };
    assert!(neg.validate().is_err());
}
