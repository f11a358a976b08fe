//! Reverse-mode autodiff on the tape, checked against finite differences.
//!
//! cargo run --example autodiff

use prix::tensor::gradcheck::{check_inputs, CheckOptions};
use prix::tensor::{Graph, Init, Tensor};

fn main() -> prix::Result<()> {
    // y = sum(softmax(x W) * t)
    let x = Tensor::<f64>::create(&[2, 3], Init::Gaussian { std: 1.0, seed: 1 })?;
    let w = Tensor::<f64>::create(&[3, 4], Init::Gaussian { std: 1.0, seed: 2 })?;
    let t = Tensor::<f64>::from_f64(&[2, 4], &[1., 0., 0., 0., 0., 0., 1., 0.])?;

    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let wv = g.leaf(w.clone(), true);
    let z = g.matmul(xv, wv)?;
    let p = g.softmax(z, 1)?;
    let tv = g.constant(t.clone());
    let y = g.mul(p, tv)?;
    let y = g.sum(y);
    g.backward(y)?;
    println!("y = {:.6}", g.value(y).data()[0]);
    println!("dy/dW = {:?}", g.grad(wv).unwrap());

    let err = check_inputs(&[x, w], CheckOptions::default(), |g, v| {
        let z = g.matmul(v[0], v[1])?;
        let p = g.softmax(z, 1)?;
        let tv = g.constant(t.clone());
        let y = g.mul(p, tv)?;
        Ok(g.sum(y))
    })?;
    println!("relative error vs central differences: {err:.2e}");
    Ok(())
}
