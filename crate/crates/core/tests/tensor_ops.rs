use prix::tensor::gradcheck::{check_inputs, CheckOptions};
use prix::tensor::{Graph, Init, Tensor, Var};
use prix::Result;

const SEEDS: u64 = 20;

fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::create(shape, Init::Gaussian { std: 1.0, seed }).unwrap()
}

/// Weighted sum with a fixed random projection so no gradient cancels by symmetry.
fn project(g: &mut Graph<'static, f64>, y: Var, seed: u64) -> Result<Var> {
    let r = rand(g.shape(y), seed ^ 0xABCD);
    let r = g.constant(r);
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

fn assert_grad(
    name: &str,
    shapes: &[&[usize]],
    f: impl Fn(&mut Graph<'static, f64>, &[Var]) -> Result<Var> + Copy,
) {
    for seed in 0..SEEDS {
        let inputs: Vec<_> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| rand(s, seed * 31 + i as u64))
            .collect();
        let err = check_inputs(&inputs, CheckOptions::default(), |g, v| {
            let y = f(g, v)?;
            project(g, y, seed)
        })
        .unwrap();
        assert!(err < 1e-4, "{name} seed {seed}: rel err {err}");
    }
}

#[test]
fn matmul_values_and_grad() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::from_f64(&[2, 2], &[1., 2., 3., 4.]).unwrap());
    let b = g.constant(Tensor::from_f64(&[2, 2], &[5., 6., 7., 8.]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[19., 22., 43., 50.]);

    let eye = g.constant(Tensor::from_f64(&[2, 2], &[1., 0., 0., 1.]).unwrap());
    let x = g.matmul(eye, b).unwrap();
    assert_eq!(g.value(x).data(), g.value(b).data());

    // d sum(A B) / dA = ones B^T
    let mut g = Graph::<f64>::new();
    let a = g.leaf(rand(&[3, 4], 1), true);
    let bt = rand(&[4, 2], 2);
    let b = g.constant(bt.clone());
    let c = g.matmul(a, b).unwrap();
    let s = g.sum(c);
    g.backward(s).unwrap();
    let grad = g.grad(a).unwrap();
    for i in 0..3 {
        for k in 0..4 {
            let expect = bt.at(&[k, 0]) + bt.at(&[k, 1]);
            assert!((grad[i * 4 + k] - expect).abs() < 1e-12);
        }
    }
    assert!(g.matmul(a, a).is_err());

    assert_grad("matmul", &[&[2, 3, 4], &[4, 5]], |g, v| g.matmul(v[0], v[1]));
    assert_grad("bmm", &[&[2, 3, 4], &[2, 4, 5]], |g, v| g.bmm(v[0], v[1], false));
    assert_grad("bmm_t", &[&[2, 3, 4], &[2, 5, 4]], |g, v| g.bmm(v[0], v[1], true));
}

#[test]
fn conv2d_values_and_grad() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(rand(&[1, 2, 4, 5], 3));
    let mut w = vec![0.0; 4];
    w[0] = 1.0;
    w[3] = 1.0;
    let k = g.constant(Tensor::from_f64(&[2, 2, 1, 1], &w).unwrap());
    let y = g.conv2d(x, k, None, 1, 0).unwrap();
    assert_eq!(g.value(y), g.value(x));

    let ones = g.constant(Tensor::full(&[1, 1, 5, 5], 1.0));
    let k = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = g.conv2d(ones, k, None, 1, 1).unwrap();
    assert_eq!(g.value(y).at(&[0, 0, 2, 2]), 9.0);
    assert_eq!(g.value(y).at(&[0, 0, 0, 0]), 4.0);

    let big = g.constant(Tensor::full(&[1, 1, 5, 5], 1.0));
    let small = g.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
    assert!(g.conv2d(small, big, None, 1, 1).is_err());
    assert!(g.conv2d(small, k, None, 1, 0).is_err());

    let s = g.constant(Tensor::full(&[1, 1, 7, 6], 1.0));
    let y = g.conv2d(s, k, None, 2, 1).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 4, 3]);

    assert_grad("conv3x3s2", &[&[2, 3, 6, 5], &[4, 3, 3, 3], &[4]], |g, v| {
        g.conv2d(v[0], v[1], Some(v[2]), 2, 1)
    });
    assert_grad("conv1x1", &[&[2, 3, 4, 4], &[2, 3, 1, 1]], |g, v| {
        g.conv2d(v[0], v[1], None, 1, 0)
    });
}

#[test]
fn conv2d_f32_gradcheck() {
    for seed in 0..SEEDS {
        let inputs: Vec<Tensor<f32>> = [&[1usize, 2, 5, 5][..], &[3, 2, 3, 3]]
            .iter()
            .enumerate()
            .map(|(i, s)| rand(s, seed * 7 + i as u64).cast())
            .collect();
        let opts = CheckOptions {
            step: 1e-2,
            ..Default::default()
        };
        let err = check_inputs(&inputs, opts, |g, v| {
            let y = g.conv2d(v[0], v[1], None, 1, 1)?;
            let r = g.constant(rand(g.shape(y), seed).cast());
            let p = g.mul(y, r)?;
            Ok(g.sum(p))
        })
        .unwrap();
        assert!(err < 1e-2, "seed {seed}: {err}");
    }
}

#[test]
fn pooling_and_upsampling() {
    let mut g = Graph::<f64>::new();
    let row = g.constant(Tensor::from_f64(&[1, 1, 1, 4], &[1., 2., 3., 4.]).unwrap());
    let p = g.adaptive_avg_pool(row, (1, 2)).unwrap();
    assert_eq!(g.value(p).data(), &[1.5, 3.5]);

    let c = g.constant(Tensor::full(&[2, 3, 5, 7], 2.5));
    for hw in [(1, 1), (3, 4), (8, 9)] {
        let p = g.adaptive_avg_pool(c, hw).unwrap();
        assert!(g.value(p).data().iter().all(|&v: &f64| (v - 2.5).abs() < 1e-12));
    }
    let up = g.upsample_bilinear(c, (10, 14)).unwrap();
    let back = g.adaptive_avg_pool(up, (5, 7)).unwrap();
    assert!(g.value(back).max_abs_diff(g.value(c)) < 1e-12);

    assert_grad("adaptive_avg", &[&[2, 2, 5, 7]], |g, v| g.adaptive_avg_pool(v[0], (3, 2)));
    assert_grad("adaptive_avg_up", &[&[1, 2, 2, 3]], |g, v| g.adaptive_avg_pool(v[0], (4, 8)));
    assert_grad("bilinear", &[&[2, 2, 3, 4]], |g, v| g.upsample_bilinear(v[0], (7, 9)));
    assert_grad("nearest", &[&[2, 2, 3, 4]], |g, v| g.upsample_nearest(v[0], (6, 8)));
}

#[test]
fn primitives() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(&[1, 2], &[0.0, 0.0]).unwrap());
    let s = g.softmax(x, 1).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    let x = g.constant(Tensor::from_f64(&[2], &[2f64.ln(), 0.0]).unwrap());
    let s = g.softmax(x, 0).unwrap();
    assert!((g.value(s).data()[0] - 2.0 / 3.0).abs() < 1e-15);
    assert!((g.value(s).data()[1] - 1.0 / 3.0).abs() < 1e-15);
    assert!(g.softmax(x, 1).is_err());

    let x = g.constant(rand(&[3, 4], 5));
    let d = g.dropout(x, 0.1, 9).unwrap();
    assert_eq!(g.value(d), g.value(x));
    assert!(g.dropout(x, 1.0, 9).is_err());

    let ln = g.layer_norm(x, None, None, 0.0).unwrap();
    for row in g.value(ln).data().chunks(4) {
        let mean: f64 = row.iter().sum::<f64>() / 4.0;
        let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
    }

    assert_grad("softmax0", &[&[3, 4, 2]], |g, v| g.softmax(v[0], 1));
    assert_grad("softmax_last", &[&[3, 5]], |g, v| g.softmax(v[0], 1));
    assert_grad("log_softmax", &[&[3, 5]], |g, v| g.log_softmax(v[0], 1));
    assert_grad("layer_norm", &[&[3, 6], &[6], &[6]], |g, v| {
        g.layer_norm(v[0], Some(v[1]), Some(v[2]), 1e-5)
    });
    assert_grad("relu", &[&[4, 5]], |g, v| Ok(g.relu(v[0])));
    assert_grad("gelu", &[&[4, 5]], |g, v| Ok(g.gelu(v[0])));
    assert_grad("tanh", &[&[4, 5]], |g, v| Ok(g.tanh(v[0])));
    assert_grad("sigmoid", &[&[4, 5]], |g, v| Ok(g.sigmoid(v[0])));
    assert_grad("exp", &[&[4, 5]], |g, v| Ok(g.exp(v[0])));
    assert_grad("square", &[&[4, 5]], |g, v| Ok(g.square(v[0])));
    assert_grad("abs", &[&[4, 5]], |g, v| Ok(g.abs(v[0])));
    assert_grad("log", &[&[4, 5]], |g, v| {
        let e = g.exp(v[0]);
        Ok(g.ln(e))
    });
    assert_grad("sqrt", &[&[4, 5]], |g, v| {
        let e = g.square(v[0]);
        let e = g.add_scalar(e, 0.5);
        Ok(g.sqrt(e))
    });
    assert_grad("concat", &[&[2, 3, 2], &[2, 1, 2]], |g, v| g.concat(&[v[0], v[1]], 1));
    assert_grad("linear", &[&[2, 3, 4], &[4, 5], &[5]], |g, v| g.linear(v[0], v[1], Some(v[2])));
    assert_grad("mul_suffix", &[&[2, 3, 4], &[3, 4]], |g, v| g.mul_suffix(v[0], v[1]));
    assert_grad("mul", &[&[2, 3], &[2, 3]], |g, v| g.mul(v[0], v[1]));
    assert_grad("sub", &[&[2, 3], &[2, 3]], |g, v| g.sub(v[0], v[1]));
    assert_grad("permute", &[&[2, 3, 4]], |g, v| g.permute(v[0], &[2, 0, 1]));
    assert_grad("narrow", &[&[2, 6, 3]], |g, v| g.narrow(v[0], 1, 2, 3));
    assert_grad("index_select", &[&[4, 3]], |g, v| g.index_select(v[0], 0, &[3, 0, 3, 1]));
    assert_grad("mean_axis", &[&[2, 3, 4]], |g, v| g.mean_axis(v[0], 1));
    assert_grad("reshape", &[&[2, 6]], |g, v| g.reshape(v[0], &[3, 4]));
}

#[test]
fn dropout_is_differentiable_through_its_mask() {
    let mut g = Graph::<f64>::new();
    g.set_train(true);
    let x = g.leaf(rand(&[10, 10], 1), true);
    let d = g.dropout(x, 0.5, 3).unwrap();
    let s = g.sum(d);
    g.backward(s).unwrap();
    let grad = g.grad(x).unwrap();
    assert!(grad.iter().all(|&v| v == 0.0 || v == 2.0));
    assert!(grad.iter().any(|&v| v == 0.0) && grad.iter().any(|&v| v == 2.0));
}

#[test]
fn losses() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(rand(&[3, 4], 2));
    let l = g.l1_loss(x, x).unwrap();
    assert_eq!(g.value(l).data(), &[0.0]);

    let logits = g.constant(Tensor::from_f64(&[1, 3], &[0.0, 800.0, 0.0]).unwrap());
    let ce = g.cross_entropy(logits, &[1]).unwrap();
    assert_eq!(g.value(ce).data(), &[0.0]);
    assert!(g.cross_entropy(logits, &[3]).is_err());

    // focal(gamma=2) on p_true = 0.9 is (1 - 0.9)^2 * CE
    let z = (0.9f64 / 0.1).ln();
    let logits = g.constant(Tensor::from_f64(&[1, 2], &[z, 0.0]).unwrap());
    let ce = g.cross_entropy(logits, &[0]).unwrap();
    let fl = g.focal_loss(logits, &[0], 2.0, 1.0).unwrap();
    let (ce, fl) = (g.value(ce).data()[0], g.value(fl).data()[0]);
    assert!((ce - (-(0.9f64).ln())).abs() < 1e-12);
    assert!((fl - 0.01 * ce).abs() < 1e-14);

    // focal(0, 1) is cross-entropy to the bit
    for seed in 0..SEEDS {
        let logits = g.constant(rand(&[6, 5], seed));
        let t: Vec<usize> = (0..6).map(|i| (i * 7 + seed as usize) % 5).collect();
        let ce = g.cross_entropy(logits, &t).unwrap();
        let fl = g.focal_loss(logits, &t, 0.0, 1.0).unwrap();
        assert_eq!(g.value(ce).data(), g.value(fl).data());
    }

    let targets = [0usize, 2, 1, 2];
    for (gamma, alpha) in [(0.0, 1.0), (2.0, 0.25), (1.5, 1.0)] {
        for seed in 0..SEEDS {
            let inputs: Vec<Tensor<f64>> = vec![rand(&[4, 3], seed)];
            let err = check_inputs(&inputs, CheckOptions::default(), |g, v| {
                g.focal_loss(v[0], &targets, gamma, alpha)
            })
            .unwrap();
            assert!(err < 1e-4, "focal({gamma},{alpha}) seed {seed}: {err}");
        }
    }
    assert_grad("l1", &[&[3, 4], &[3, 4]], |g, v| g.l1_loss(v[0], v[1]));
}

#[test]
fn backward_semantics() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_f64(&[3], &[1.0, -2.0, 3.0]).unwrap(), true);
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0, 2.0]);

    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_f64(&[1], &[3.0]).unwrap(), true);
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[6.0]);

    let v = g.leaf(Tensor::full(&[2], 1.0), true);
    assert!(g.backward(v).is_err());
}

#[test]
fn determinism() {
    let run = || {
        let mut g = Graph::<f64>::new();
        g.set_train(true);
        g.set_seed(11);
        let x = g.leaf(rand(&[4, 8], 3), true);
        let w = g.leaf(rand(&[8, 8], 4), true);
        let y = g.matmul(x, w).unwrap();
        let s = g.next_seed();
        let y = g.dropout(y, 0.1, s).unwrap();
        let y = g.gelu(y);
        let l = g.mean(y);
        g.backward(l).unwrap();
        (g.value(y).clone(), g.grad(w).unwrap().to_vec())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a, b);
    assert_eq!(ga, gb);
}
