//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward passes, so it is independent
//! of the backward rules it checks.

use super::{Graph, Scalar, Tensor, Var};
use crate::error::Result;
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy)]
pub struct CheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Upper bound on perturbed entries per tensor; entries are spread evenly.
    pub max_entries: usize,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            max_entries: 48,
        }
    }
}

/// `||a - n|| / max(||a||, ||n||)`, or the absolute error when both are tiny.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom < 1e-10 {
        diff
    } else {
        diff / denom
    }
}

fn sample_indices(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        (0..n).collect()
    } else {
        (0..max).map(|i| i * n / max).collect()
    }
}

/// Worst relative error over all `inputs` of the scalar produced by `f`.
pub fn check_inputs<T: Scalar>(
    inputs: &[Tensor<T>],
    opts: CheckOptions,
    f: impl Fn(&mut Graph<'static, T>, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let eval = |ins: &[Tensor<T>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0].as_f64())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let zeros = vec![T::zero(); inputs[k].numel()];
        let grad = g.grad(*v).unwrap_or(&zeros);
        let idx = sample_indices(inputs[k].numel(), opts.max_entries);
        let mut analytic = Vec::with_capacity(idx.len());
        let mut numeric = Vec::with_capacity(idx.len());
        for &i in &idx {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            let base = inputs[k].data()[i].as_f64();
            plus[k].data_mut()[i] = T::cast(base + opts.step);
            minus[k].data_mut()[i] = T::cast(base - opts.step);
            // use the actually representable step
            let h = plus[k].data()[i].as_f64() - minus[k].data()[i].as_f64();
            numeric.push((eval(&plus)? - eval(&minus)?) / h);
            analytic.push(grad[i].as_f64());
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// Worst relative error over every parameter in `store`.
pub fn check_params<T: Scalar>(
    store: &ParamStore<T>,
    opts: CheckOptions,
    f: impl for<'s> Fn(&mut Graph<'s, T>) -> Result<Var>,
) -> Result<f64> {
    let eval = |s: &ParamStore<T>| -> Result<f64> {
        let mut g = Graph::with_params(s, false);
        let out = f(&mut g)?;
        Ok(g.value(out).data()[0].as_f64())
    };
    let grads = {
        let mut g = Graph::with_params(store, false);
        let out = f(&mut g)?;
        g.backward(out)?;
        g.param_grads()
    };
    let mut worst = 0.0f64;
    for (id, p) in store.iter() {
        let zeros = vec![T::zero(); p.value.numel()];
        let grad = grads
            .iter()
            .find(|(gid, _)| *gid == id)
            .map(|(_, g)| g.as_slice())
            .unwrap_or(&zeros);
        let idx = sample_indices(p.value.numel(), opts.max_entries);
        let mut analytic = Vec::with_capacity(idx.len());
        let mut numeric = Vec::with_capacity(idx.len());
        for &i in &idx {
            let base = p.value.data()[i].as_f64();
            let mut plus = store.clone();
            let mut minus = store.clone();
            plus.param_mut(id).value.data_mut()[i] = T::cast(base + opts.step);
            minus.param_mut(id).value.data_mut()[i] = T::cast(base - opts.step);
            let h = plus.value(id).data()[i].as_f64() - minus.value(id).data()[i].as_f64();
            numeric.push((eval(&plus)? - eval(&minus)?) / h);
            analytic.push(grad[i].as_f64());
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}
