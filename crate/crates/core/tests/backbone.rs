use prix::backbone::{count_params, Backbone, BackboneConfig, CartConfig, CartMode, MergeMode, WeightSharing};
use prix::nn::{Builder, MultiHeadAttention, ParamGroup, ParamStore};
use prix::tensor::gradcheck::{check_params, CheckOptions};
use prix::tensor::{Graph, Init, Tensor, Var};

fn tiny(mode: CartMode, merge: MergeMode) -> BackboneConfig {
    BackboneConfig {
        cameras: 1,
        image_hw: (8, 8),
        stem_channels: 2,
        channels: vec![3, 4],
        blocks_per_stage: 1,
        fpn_dim: 4,
        cart: CartConfig {
            mode,
            dim: 8,
            pooled_hw: (2, 2),
            layers: 1,
            heads: 2,
            mlp_ratio: 2,
            dropout: 0.0,
            sharing: WeightSharing::Shared,
            merge,
        },
    }
}

fn images(b: usize, cfg: &BackboneConfig, seed: u64) -> Tensor<f64> {
    let (h, w) = cfg.image_hw;
    Tensor::create(&[b, cfg.cameras, 3, h, w], Init::Uniform { lo: 0.0, hi: 1.0, seed }).unwrap()
}

fn fused(bb: &Backbone, store: &ParamStore<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::with_params(store, false);
    let x = g.constant(x.clone());
    let fp = bb.forward(&mut g, x).unwrap();
    g.value(fp.fused).clone()
}

#[test]
fn stage_halves_resolution_and_zero_residual_is_shortcut() {
    let cfg = BackboneConfig::default();
    let mut store = ParamStore::<f64>::new();
    let bb = Backbone::new(&mut store, &cfg, 3).unwrap();
    store.fill_prefix("backbone.stage2.block1.conv2", 0.0);
    store.fill_prefix("backbone.stage2.block2.conv2", 0.0);
    let mut g = Graph::with_params(&store, false);
    let x = g.constant(Tensor::full(&[1, 16, 8, 24], 0.7));
    let y = bb.stages[1].forward(&mut g, x).unwrap();
    assert_eq!(g.shape(y), &[1, 32, 4, 12]);
    let s = bb.stages[1].blocks[0].shortcut.as_ref().unwrap().forward(&mut g, x).unwrap();
    assert_eq!(g.value(y), g.value(s));

    let bad = g.constant(Tensor::zeros(&[1, 8, 8, 24]));
    assert!(matches!(bb.stages[1].forward(&mut g, bad), Err(prix::Error::Shape(_))));
}

#[test]
fn stage_gradcheck() {
    let cfg = tiny(CartMode::Off, MergeMode::Add);
    for seed in 0..20 {
        let mut store = ParamStore::<f64>::new();
        let bb = Backbone::new(&mut store, &cfg, seed).unwrap();
        let x = Tensor::create(&[2, 2, 4, 4], Init::Gaussian { std: 1.0, seed }).unwrap();
        let err = check_params(&store, CheckOptions::default(), |g| {
            let x = g.constant(x.clone());
            let y = bb.stages[0].forward(g, x)?;
            let y = g.square(y);
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

fn mha(seed: u64) -> (ParamStore<f64>, MultiHeadAttention) {
    let mut store = ParamStore::new();
    let m = {
        let mut b = Builder::new(&mut store, seed, ParamGroup::Encoder);
        MultiHeadAttention::new(&mut b, "attn", 8, 2).unwrap()
    };
    (store, m)
}

#[test]
fn single_token_attention_is_value_projection() {
    let (store, m) = mha(1);
    let mut g = Graph::with_params(&store, false);
    let x = g.constant(Tensor::create(&[2, 1, 8], Init::Gaussian { std: 1.0, seed: 4 }).unwrap());
    let y = m.forward(&mut g, x).unwrap();
    let qkv = m.qkv.forward(&mut g, x).unwrap();
    let v = g.narrow(qkv, 2, 16, 8).unwrap();
    let expect = m.out.forward(&mut g, v).unwrap();
    assert!(g.value(y).max_abs_diff(g.value(expect)) < 1e-12);
}

#[test]
fn zero_queries_average_the_values() {
    let (mut store, m) = mha(2);
    // zero the Q block of the fused projection
    let (w, b) = (m.qkv.w, m.qkv.b.unwrap());
    let mut wv = store.value(w).to_vec();
    for r in 0..8 {
        wv[r * 24..r * 24 + 8].iter_mut().for_each(|v| *v = 0.0);
    }
    store.set_value(w, Tensor::new(&[8, 24], wv).unwrap()).unwrap();
    store.fill(b, 0.0);
    let mut g = Graph::with_params(&store, false);
    let x = g.constant(Tensor::create(&[1, 5, 8], Init::Gaussian { std: 1.0, seed: 9 }).unwrap());
    let qkv = m.qkv.forward(&mut g, x).unwrap();
    let q = g.narrow(qkv, 2, 0, 8).unwrap();
    let k = g.narrow(qkv, 2, 8, 8).unwrap();
    let v = g.narrow(qkv, 2, 16, 8).unwrap();
    let a = prix::nn::attention(&mut g, q, k, v, 2).unwrap();
    let vm = g.mean_axis(v, 1).unwrap();
    let (av, mv) = (g.value(a).to_vec(), g.value(vm).to_vec());
    for row in av.chunks(8) {
        for (x, y) in row.iter().zip(&mv) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn fused_qkv_matches_split_projections() {
    let (store, m) = mha(5);
    let mut g = Graph::with_params(&store, false);
    let x = g.constant(Tensor::create(&[2, 6, 8], Init::Gaussian { std: 1.0, seed: 3 }).unwrap());
    let a = m.forward_with(&mut g, x, prix::nn::QkvMode::Fused).unwrap();
    let b = m.forward_with(&mut g, x, prix::nn::QkvMode::Split).unwrap();
    assert!(g.value(a).max_abs_diff(g.value(b)) < 1e-6);
}

#[test]
fn shared_attention_is_permutation_equivariant() {
    let cfg = BackboneConfig::default();
    let mut store = ParamStore::<f64>::new();
    let bb = Backbone::new(&mut store, &cfg, 11).unwrap();
    let x = Tensor::create(&[2, 7, 64], Init::Gaussian { std: 1.0, seed: 2 }).unwrap();
    let perm = [3usize, 0, 6, 1, 5, 2, 4];
    let mut g = Graph::with_params(&store, false);
    let xv = g.constant(x);
    let y = bb.shared_attention(&mut g, xv, 0).unwrap();
    let xp = g.index_select(xv, 1, &perm).unwrap();
    let yp = bb.shared_attention(&mut g, xp, 0).unwrap();
    let y_then_p = g.index_select(y, 1, &perm).unwrap();
    assert!(g.value(yp).max_abs_diff(g.value(y_then_p)) < 1e-6);
}

#[test]
fn dead_branch_reproduces_plain_backbone() {
    let mut add = BackboneConfig::default();
    add.cart.merge = MergeMode::Add;
    let mut plain = add.clone();
    plain.cart.mode = CartMode::Off;
    let mut s1 = ParamStore::<f64>::new();
    let b1 = Backbone::new(&mut s1, &add, 4).unwrap();
    let mut s2 = ParamStore::<f64>::new();
    let b2 = Backbone::new(&mut s2, &plain, 4).unwrap();
    for i in 1..=4 {
        s1.fill_prefix(&format!("backbone.cart.level{i}.up."), 0.0);
    }
    let x = images(2, &add, 8);
    assert_eq!(fused(&b1, &s1, &x), fused(&b2, &s2, &x));

    let mut g = Graph::with_params(&s1, false);
    let m = g.constant(Tensor::create(&[1, 32, 4, 12], Init::Gaussian { std: 1.0, seed: 1 }).unwrap());
    let (r, _) = b1.recalibrate(&mut g, m, 1).unwrap();
    assert_eq!(g.value(r), g.value(m));
}

#[test]
fn recalibration_preserves_shape() {
    for pooled in [(1, 1), (2, 3), (4, 8), (5, 7)] {
        for merge in [MergeMode::ConcatProject, MergeMode::Add] {
            let mut cfg = BackboneConfig::default();
            cfg.cart.pooled_hw = pooled;
            cfg.cart.merge = merge;
            let mut store = ParamStore::<f64>::new();
            let bb = Backbone::new(&mut store, &cfg, 1).unwrap();
            let mut g = Graph::with_params(&store, false);
            let x = g.constant(images(1, &cfg, 2));
            let fp = bb.forward(&mut g, x).unwrap();
            for (s, r) in fp.stages.iter().zip(&fp.recalibrated) {
                assert_eq!(g.shape(*s), g.shape(*r));
            }
            assert_eq!(fp.attention_out.len(), 4);
            assert_eq!(g.shape(fp.fused), &[1, 64, 8, 24]);
        }
    }
}

#[test]
fn fpn_degenerate_and_dead_laterals() {
    let cfg = BackboneConfig::default();
    let mut store = ParamStore::<f64>::new();
    let bb = Backbone::new(&mut store, &cfg, 6).unwrap();
    let deep = Tensor::create(&[1, 16, 4, 4], Init::Gaussian { std: 1.0, seed: 1 }).unwrap();
    let mut g = Graph::with_params(&store, false);
    let d = g.constant(deep);
    let single = bb.fpn.forward(&mut g, &[d]).unwrap();
    let lat = bb.fpn.lateral[0].forward(&mut g, d).unwrap();
    let expect = bb.fpn.smooth[0].forward(&mut g, lat).unwrap();
    assert_eq!(g.value(single), g.value(expect));
    drop(g);

    // zero the shallow lateral: output depends on the shallow map only through nothing
    store.fill_prefix("backbone.fpn.lateral1.", 0.0);
    let mut g = Graph::with_params(&store, false);
    let a = g.constant(Tensor::create(&[1, 16, 8, 24], Init::Gaussian { std: 1.0, seed: 2 }).unwrap());
    let b = g.constant(Tensor::create(&[1, 16, 8, 24], Init::Gaussian { std: 1.0, seed: 3 }).unwrap());
    let top = g.constant(Tensor::create(&[1, 32, 4, 12], Init::Gaussian { std: 1.0, seed: 4 }).unwrap());
    let ya = bb.fpn.forward(&mut g, &[a, top]).unwrap();
    let yb = bb.fpn.forward(&mut g, &[b, top]).unwrap();
    assert_eq!(g.value(ya), g.value(yb));
}

#[test]
fn gradients_reach_every_stage() {
    let cfg = BackboneConfig::default();
    let mut store = ParamStore::<f32>::new();
    let bb = Backbone::new(&mut store, &cfg, 2).unwrap();
    let mut g = Graph::with_params(&store, true);
    let x = g.constant(Tensor::create(&[1, 3, 3, 32, 32], Init::Uniform { lo: 0.0, hi: 1.0, seed: 1 }).unwrap());
    let (_, c) = bb.extract_features(&mut g, x).unwrap();
    let s = g.square(c);
    let l = g.sum(s);
    g.backward(l).unwrap();
    let grads = g.param_grads();
    for i in 1..=4 {
        let prefix = format!("backbone.stage{i}.");
        let nz = grads
            .iter()
            .filter(|(id, _)| store.param(*id).name.starts_with(&prefix))
            .any(|(_, gr)| gr.iter().any(|v| *v != 0.0));
        assert!(nz, "no gradient reached {prefix}");
    }
}

#[test]
fn extract_features_contract() {
    let cfg = BackboneConfig::default();
    let mut store = ParamStore::<f64>::new();
    let bb = Backbone::new(&mut store, &cfg, 9).unwrap();
    let x = images(2, &cfg, 3);
    let run = |x: &Tensor<f64>| {
        let mut g = Graph::with_params(&store, false);
        let xv = g.constant(x.clone());
        let (fp, c) = bb.extract_features(&mut g, xv).unwrap();
        assert_eq!(g.shape(fp.fused), &[2, 64, 8, 24]);
        assert_eq!(g.shape(c), &[2, 64]);
        g.value(c).clone()
    };
    assert_eq!(run(&x), run(&x));
    let bright = x.map(|v| 2.0 * v);
    assert!(run(&bright).max_abs_diff(&run(&x)) > 1e-6);

    let mut g = Graph::with_params(&store, false);
    let two_cams = g.constant(Tensor::zeros(&[1, 2, 3, 32, 32]));
    assert!(matches!(bb.extract_features(&mut g, two_cams), Err(prix::Error::Config(_))));
}

#[test]
fn shared_parameters_drive_every_level() {
    let cfg = BackboneConfig::default();
    let mut store = ParamStore::<f64>::new();
    let bb = Backbone::new(&mut store, &cfg, 5).unwrap();
    assert_eq!(bb.sa.len(), 1);
    let x = images(1, &cfg, 1);
    let attn = |store: &ParamStore<f64>| -> Vec<Tensor<f64>> {
        let mut g = Graph::with_params(store, false);
        let xv = g.constant(x.clone());
        let fp = bb.forward(&mut g, xv).unwrap();
        fp.attention_out.iter().map(|v: &Var| g.value(*v).clone()).collect()
    };
    let before = attn(&store);
    let id = store.id("backbone.cart.sa.layer1.attn.out.bias").unwrap();
    let mut bumped = store.clone();
    bumped.fill(id, 0.5);
    let after = attn(&bumped);
    assert_eq!(before.len(), 4);
    for (a, b) in before.iter().zip(&after) {
        assert!(a.max_abs_diff(b) > 1e-6);
    }
}

/// Moves zero biases and zero-init weights off relu kinks.
fn jitter(store: &mut ParamStore<f64>, seed: u64) {
    for (i, p) in store.iter_mut().enumerate() {
        let n = Tensor::<f64>::create(p.value.shape(), Init::Gaussian { std: 0.1, seed: seed * 1000 + i as u64 }).unwrap();
        for (v, d) in p.value.data_mut().iter_mut().zip(n.data()) {
            *v += d;
        }
    }
}

#[test]
fn cart_gradcheck_tiny() {
    for merge in [MergeMode::ConcatProject, MergeMode::Add] {
        let cfg = tiny(CartMode::Attention, merge);
        for seed in 0..20 {
            let mut store = ParamStore::<f64>::new();
            let bb = Backbone::new(&mut store, &cfg, seed).unwrap();
            jitter(&mut store, seed);
            let x = images(1, &cfg, seed + 100);
            let opts = CheckOptions {
                max_entries: 12,
                ..CheckOptions::default()
            };
            let err = check_params(&store, opts, |g| {
                let xv = g.constant(x.clone());
                let (_, c) = bb.extract_features(g, xv)?;
                let r = g.constant(Tensor::create(&[1, 4], Init::Gaussian { std: 1.0, seed }).unwrap());
                let y = g.mul(c, r)?;
                Ok(g.sum(y))
            })
            .unwrap();
            assert!(err < 1e-4, "{merge:?} seed {seed}: {err}");
        }
    }
}

#[test]
fn parameter_counts() {
    let mut shared = BackboneConfig::default();
    shared.cart.sharing = WeightSharing::Shared;
    let mut separate = shared.clone();
    separate.cart.sharing = WeightSharing::Separate;
    let cs = count_params(&shared).unwrap();
    let cp = count_params(&separate).unwrap();
    assert_eq!(cp["cart.sa"], 4 * cs["cart.sa"]);
    assert!(cs["total"] < cp["total"]);
    assert_eq!(cp["total"] - cs["total"], 3 * cs["cart.sa"]);

    let totals: Vec<usize> = [32, 64, 96]
        .iter()
        .map(|&d| {
            let mut c = shared.clone();
            c.cart.dim = d;
            count_params(&c).unwrap()["total"]
        })
        .collect();
    assert!(totals[0] < totals[1] && totals[1] < totals[2]);

    let mut off = shared.clone();
    off.cart.mode = CartMode::Off;
    assert!(count_params(&off).unwrap()["total"] < cs["total"]);
    let sum: usize = ["stem", "stages", "cart.sa", "cart.proj", "fpn"].iter().map(|k| cs[*k]).sum();
    assert_eq!(sum, cs["total"]);
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = BackboneConfig::default();
    c.cart.heads = 3;
    assert!(matches!(c.validate(), Err(prix::Error::Config(_))));
    let mut c = BackboneConfig::default();
    c.image_hw = (30, 30);
    assert!(c.validate().is_err());
}
