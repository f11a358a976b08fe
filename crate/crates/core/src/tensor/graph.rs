use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use super::kernels::{col2im, im2col, split_axis, strides, ConvGeom, ResampleMap, ResampleMode};
use super::{seeded_rng, Scalar, Tensor};
use crate::error::{shape_err, Error, Result};
use crate::nn::{ParamId, ParamStore};

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Relu,
    Gelu,
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Abs,
    Square,
    Sqrt,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddSuffix(Var, Var),
    MulSuffix(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Unary(Var, Unary),
    MulConst(Var, Tensor<T>),
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Reshape(Var),
    /// `out[j] = in[map[j]]`; covers permute, narrow, index-select and repeat.
    Gather { a: Var, map: Arc<Vec<u32>> },
    Concat(Vec<Var>, usize),
    SumAll(Var),
    SumAxis(Var, usize),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Resample { a: Var, map: Arc<ResampleMap> },
    ClassLoss {
        logits: Var,
        targets: Vec<usize>,
        gamma: T,
        alpha: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A single-owner autodiff tape.
///
/// Nodes are appended in evaluation order, so reverse index order is a valid
/// topological order for the backward sweep.
pub struct Graph<'s, T: Scalar> {
    nodes: Vec<Node<T>>,
    leaf_grads: HashMap<usize, Vec<T>>,
    store: Option<&'s ParamStore<T>>,
    param_vars: HashMap<ParamId, Var>,
    train: bool,
    seed: u64,
    seed_counter: u64,
}

impl<T: Scalar> Default for Graph<'static, T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

impl<T: Scalar> Graph<'static, T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            leaf_grads: HashMap::new(),
            store: None,
            param_vars: HashMap::new(),
            train: false,
            seed: 0,
            seed_counter: 0,
        }
    }
}

impl<'s, T: Scalar> Graph<'s, T> {
    /// A tape that can pull parameters from `store`.
    pub fn with_params(store: &'s ParamStore<T>, train: bool) -> Self {
        Graph {
            nodes: Vec::new(),
            leaf_grads: HashMap::new(),
            store: Some(store),
            param_vars: HashMap::new(),
            train,
            seed: 0,
            seed_counter: 0,
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn set_train(&mut self, train: bool) {
        self.train = train;
    }

    /// Base seed for [`Graph::next_seed`].
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.seed_counter = 0;
    }

    /// Deterministic stream of per-op seeds (dropout masks, sampling noise).
    pub fn next_seed(&mut self) -> u64 {
        self.seed_counter += 1;
        crate::nn::mix_seed(self.seed, self.seed_counter)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf for a stored parameter; repeated calls return the same node, so a
    /// parameter used in several places accumulates one gradient.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.store.expect("graph was built without a parameter store");
        let v = self.leaf(store.value(id).clone(), true);
        self.param_vars.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf after one or more [`Graph::backward`] calls.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads.get(&v.0).map(|g| g.as_slice())
    }

    /// Gradients of every parameter pulled onto this tape.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<T>)> {
        let mut out: Vec<(ParamId, Vec<T>)> = self
            .param_vars
            .iter()
            .filter_map(|(&id, &v)| self.grad(v).map(|g| (id, g.to_vec())))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    // ---------------------------------------------------------------- elementwise

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_map(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_map(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_map(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    fn suffix_len(&self, a: Var, b: Var, what: &str) -> Result<usize> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err!("{what}: {sb:?} is not a suffix of {sa:?}"));
        }
        Ok(self.value(b).numel())
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s (bias broadcast).
    pub fn add_suffix(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.suffix_len(a, b, "add_suffix")?;
        let vb = self.value(b).data().to_vec();
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + vb[i % n])
            .collect();
        let v = Tensor::new(va.shape(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::AddSuffix(a, b), ng))
    }

    pub fn mul_suffix(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.suffix_len(a, b, "mul_suffix")?;
        let vb = self.value(b).data().to_vec();
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * vb[i % n])
            .collect();
        let v = Tensor::new(va.shape(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::MulSuffix(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let k = T::cast(k);
        let v = self.value(a).map(|x| x * k);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, k), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = T::cast(c);
        let v = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(v, Op::AddScalar(a), ng)
    }

    /// Elementwise product with a constant (no gradient to the constant).
    pub fn mul_const(&mut self, a: Var, c: Tensor<T>) -> Result<Var> {
        if c.shape() != self.shape(a) {
            return Err(shape_err!(
                "mul_const: {:?} vs {:?}",
                self.shape(a),
                c.shape()
            ));
        }
        let v = Tensor::new(
            self.shape(a),
            self.value(a)
                .data()
                .iter()
                .zip(c.data())
                .map(|(&x, &y)| x * y)
                .collect(),
        )?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::MulConst(a, c), ng))
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Relu => |x| x.max(0.0),
            Unary::Gelu => gelu,
            Unary::Tanh => f64::tanh,
            Unary::Sigmoid => |x| 1.0 / (1.0 + (-x).exp()),
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Abs => f64::abs,
            Unary::Square => |x| x * x,
            Unary::Sqrt => f64::sqrt,
        };
        let v = match kind {
            // keep these exact in the working precision
            Unary::Relu => self.value(a).map(|x| x.max(T::zero())),
            Unary::Abs => self.value(a).map(|x| x.abs()),
            Unary::Square => self.value(a).map(|x| x * x),
            _ => self.value(a).map(|x| T::cast(f(x.as_f64()))),
        };
        let ng = self.ng(a);
        self.push(v, Op::Unary(a, kind), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }
    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }

    /// Inverted dropout. Identity outside training mode.
    pub fn dropout(&mut self, a: Var, p: f64, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Domain(format!("dropout rate {p} outside [0,1)")));
        }
        if !self.train || p == 0.0 {
            return Ok(a);
        }
        let mut rng = seeded_rng(seed);
        let keep = T::cast(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(a).numel())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let mask = Tensor::new(self.shape(a), mask)?;
        self.mul_const(a, mask)
    }

    // ---------------------------------------------------------------- linear algebra

    /// `[.., m, k] x [k, n] -> [.., m, n]`; `b` is shared across leading dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(shape_err!("matmul: {sa:?} x {sb:?}"));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).numel() / k;
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            &mut out,
            false,
        );
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        let v = Tensor::new(&shape, out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::MatMul(a, b), ng))
    }

    /// Batched `[B, m, k] x [B, k, n]`, or `x [B, n, k]^T` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(shape_err!("bmm: {sa:?} x {sb:?} (trans_b={trans_b})"));
        }
        let (bs, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![T::zero(); bs * m * n];
        let bstr = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        for i in 0..bs {
            T::gemm(
                m,
                k,
                n,
                &self.value(a).data()[i * m * k..(i + 1) * m * k],
                (k as isize, 1),
                &self.value(b).data()[i * k * n..(i + 1) * k * n],
                bstr,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let v = Tensor::new(&[bs, m, n], out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Bmm { a, b, trans_b }, ng))
    }

    // ---------------------------------------------------------------- shape

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::Reshape(a), ng))
    }

    fn gather(&mut self, a: Var, shape: &[usize], map: Vec<u32>) -> Result<Var> {
        let src = self.value(a).data();
        let data = map.iter().map(|&i| src[i as usize]).collect();
        let v = Tensor::new(shape, data)?;
        let ng = self.ng(a);
        Ok(self.push(
            v,
            Op::Gather {
                a,
                map: Arc::new(map),
            },
            ng,
        ))
    }

    /// Reorder axes; the result is materialised contiguously.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err!("permute: {perm:?} is not a permutation of rank {}", shape.len()));
        }
        let in_strides = strides(&shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let numel: usize = shape.iter().product();
        let mut map = Vec::with_capacity(numel);
        let mut idx = vec![0usize; out_shape.len()];
        for _ in 0..numel {
            let src: usize = idx.iter().zip(perm).map(|(&i, &p)| i * in_strides[p]).sum();
            map.push(src as u32);
            for ax in (0..idx.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        self.gather(a, &out_shape, map)
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(shape_err!("narrow: axis {axis} [{start}, +{len}) of {shape:?}"));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let mut map = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for i in start..start + len {
                let base = (o * n + i) * inner;
                map.extend((base..base + inner).map(|x| x as u32));
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.gather(a, &out_shape, map)
    }

    /// Pick entries of `axis` by index (repeats allowed).
    pub fn index_select(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || indices.iter().any(|&i| i >= shape[axis]) || indices.is_empty() {
            return Err(shape_err!("index_select: axis {axis} of {shape:?} with {indices:?}"));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let mut map = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * n + i) * inner;
                map.extend((base..base + inner).map(|x| x as u32));
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = indices.len();
        self.gather(a, &out_shape, map)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(shape_err!("concat: axis {axis} for rank {}", first.len()));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let same = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !same {
                return Err(shape_err!("concat: {s:?} incompatible with {first:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let n = self.shape(p)[axis];
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let v = Tensor::new(&shape, data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(v, Op::Concat(parts.to_vec(), axis), ng))
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(shape_err!("sum_axis: axis {axis} for {shape:?}"));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let row = &src[(o * n + i) * inner..(o * n + i + 1) * inner];
                add_into(&mut out[o * inner..(o + 1) * inner], row);
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let v = Tensor::new(&out_shape, out)?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::SumAxis(a, axis), ng))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| shape_err!("mean_axis: axis {axis} out of range"))?;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    // ---------------------------------------------------------------- normalisation

    fn softmax_impl(&self, a: Var, axis: usize, log: bool) -> Result<Tensor<T>> {
        let shape = self.shape(a);
        if axis >= shape.len() {
            return Err(shape_err!("softmax: axis {axis} for {shape:?}"));
        }
        let (outer, n, inner) = split_axis(shape, axis);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * n + i) * inner + j;
                let mx = (0..n).map(|i| src[at(i)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for i in 0..n {
                    let e = (src[at(i)] - mx).exp();
                    out[at(i)] = e;
                    z = z + e;
                }
                let lz = z.ln();
                for i in 0..n {
                    out[at(i)] = if log {
                        src[at(i)] - mx - lz
                    } else {
                        out[at(i)] / z
                    };
                }
            }
        }
        Tensor::new(shape, out)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.softmax_impl(a, axis, false)?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::Softmax(a, axis), ng))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.softmax_impl(a, axis, true)?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::LogSoftmax(a, axis), ng))
    }

    /// Normalise over the last axis, then apply optional affine `gamma`/`beta`.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        eps: f64,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        for p in [gamma, beta].into_iter().flatten() {
            if self.shape(p) != [d] {
                return Err(shape_err!("layer_norm affine shape {:?} for width {d}", self.shape(p)));
            }
        }
        let src = self.value(x).data();
        let rows = src.len() / d;
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let dn = T::cast(d as f64);
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + T::cast(eps)).sqrt();
            rstd[r] = rs;
            for (o, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let g = gamma.map(|g| self.value(g).data().to_vec());
        let b = beta.map(|b| self.value(b).data().to_vec());
        let out: Vec<T> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| {
                let mut y = h;
                if let Some(g) = &g {
                    y = y * g[i % d];
                }
                if let Some(b) = &b {
                    y = y + b[i % d];
                }
                y
            })
            .collect();
        let v = Tensor::new(&shape, out)?;
        let ng = self.ng(x) || gamma.is_some_and(|g| self.ng(g)) || beta.is_some_and(|b| self.ng(b));
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    // ---------------------------------------------------------------- spatial

    /// `x [B,C,H,W]`, `w [O,C,kh,kw]`, optional `bias [O]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(shape_err!("conv2d: input {sx:?} with kernel {sw:?}"));
        }
        if stride == 0 {
            return Err(shape_err!("conv2d: stride must be >= 1"));
        }
        let geom = ConvGeom {
            channels: sx[1],
            h: sx[2],
            w: sx[3],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
        };
        if geom.kh > geom.h + 2 * pad || geom.kw > geom.w + 2 * pad {
            return Err(shape_err!(
                "conv2d: kernel {}x{} larger than padded input {}x{}",
                geom.kh,
                geom.kw,
                geom.h + 2 * pad,
                geom.w + 2 * pad
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [sw[0]] {
                return Err(shape_err!("conv2d: bias {:?} for {} outputs", self.shape(b), sw[0]));
            }
        }
        let (bs, o) = (sx[0], sw[0]);
        let (ho, wo) = geom.out_hw();
        let hw = ho * wo;
        let ckk = geom.col_rows();
        let in_plane = geom.channels * geom.h * geom.w;
        let mut out = vec![T::zero(); bs * o * hw];
        let mut cols = vec![T::zero(); if geom.is_pointwise() { 0 } else { ckk * hw }];
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        for b in 0..bs {
            let img = &xd[b * in_plane..(b + 1) * in_plane];
            let colm: &[T] = if geom.is_pointwise() {
                img
            } else {
                im2col(img, &geom, &mut cols);
                &cols
            };
            T::gemm(
                o,
                ckk,
                hw,
                wd,
                (ckk as isize, 1),
                colm,
                (hw as isize, 1),
                &mut out[b * o * hw..(b + 1) * o * hw],
                false,
            );
        }
        if let Some(bv) = bias {
            let bd = self.value(bv).data();
            for (i, chunk) in out.chunks_mut(hw).enumerate() {
                let bb = bd[i % o];
                chunk.iter_mut().for_each(|v| *v = *v + bb);
            }
        }
        let v = Tensor::new(&[bs, o, ho, wo], out)?;
        let ng = self.ng(x) || self.ng(w) || bias.is_some_and(|b| self.ng(b));
        Ok(self.push(v, Op::Conv2d { x, w, bias, geom }, ng))
    }

    /// Spatial resampling of `[.., H, W]` to `out_hw`.
    pub fn resample(&mut self, a: Var, mode: ResampleMode, out_hw: (usize, usize)) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 || out_hw.0 == 0 || out_hw.1 == 0 {
            return Err(shape_err!("resample: {shape:?} to {out_hw:?}"));
        }
        let r = shape.len();
        let in_hw = (shape[r - 2], shape[r - 1]);
        if in_hw == out_hw && mode != ResampleMode::Bilinear {
            return Ok(a);
        }
        let map = ResampleMap::new(mode, in_hw, out_hw);
        let planes = self.value(a).numel() / (in_hw.0 * in_hw.1);
        let out = map.apply(self.value(a).data(), planes);
        let mut out_shape = shape;
        out_shape[r - 2] = out_hw.0;
        out_shape[r - 1] = out_hw.1;
        let v = Tensor::new(&out_shape, out)?;
        let ng = self.ng(a);
        Ok(self.push(
            v,
            Op::Resample {
                a,
                map: Arc::new(map),
            },
            ng,
        ))
    }

    // ---------------------------------------------------------------- losses

    /// Mean softmax focal loss over rows of `logits [N, C]`.
    ///
    /// `-alpha * (1 - p_t)^gamma * log p_t`; `gamma = 0, alpha = 1` is plain
    /// cross-entropy.
    pub fn focal_loss(&mut self, logits: Var, targets: &[usize], gamma: f64, alpha: f64) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(shape_err!(
                "class loss: logits {shape:?} with {} targets",
                targets.len()
            ));
        }
        let c = shape[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Domain(format!("class index {bad} out of range for {c} classes")));
        }
        let (gamma, alpha) = (T::cast(gamma), T::cast(alpha));
        let logp = self.softmax_impl(logits, 1, true)?;
        let lp = logp.data();
        let mut total = T::zero();
        for (n, &t) in targets.iter().enumerate() {
            let l = lp[n * c + t];
            let w = if gamma == T::zero() {
                T::one()
            } else {
                (T::one() - l.exp()).powf(gamma)
            };
            total = total - alpha * w * l;
        }
        let v = Tensor::scalar(total / T::cast(targets.len() as f64));
        let ng = self.ng(logits);
        Ok(self.push(
            v,
            Op::ClassLoss {
                logits,
                targets: targets.to_vec(),
                gamma,
                alpha,
            },
            ng,
        ))
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.focal_loss(logits, targets, 0.0, 1.0)
    }

    /// Mean absolute difference.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let d = self.sub(pred, target)?;
        let a = self.abs(d);
        Ok(self.mean(a))
    }

    // ---------------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                match self.leaf_grads.get_mut(&idx) {
                    Some(acc) => add_into(acc, &g),
                    None => {
                        self.leaf_grads.insert(idx, g);
                    }
                }
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let nodes = &self.nodes;
        let ng = |v: Var| nodes[v.0].needs_grad;
        let val = |v: Var| nodes[v.0].value.data();
        fn slot<'a, T: Scalar>(grads: &'a mut [Option<Vec<T>>], v: Var, n: usize) -> &'a mut Vec<T> {
            grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if ng(v) {
                        add_into(slot(grads, v, g.len()), g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if ng(*a) {
                    add_into(slot(grads, *a, g.len()), g);
                }
                if ng(*b) {
                    let s = slot(grads, *b, g.len());
                    for (d, &x) in s.iter_mut().zip(g) {
                        *d = *d - x;
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if ng(v) {
                        let o = val(other);
                        let s = slot(grads, v, g.len());
                        for i in 0..g.len() {
                            s[i] = s[i] + g[i] * o[i];
                        }
                    }
                }
            }
            Op::AddSuffix(a, b) => {
                if ng(*a) {
                    add_into(slot(grads, *a, g.len()), g);
                }
                if ng(*b) {
                    let n = val(*b).len();
                    let s = slot(grads, *b, n);
                    for (i, &x) in g.iter().enumerate() {
                        s[i % n] = s[i % n] + x;
                    }
                }
            }
            Op::MulSuffix(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let n = vb.len();
                if ng(*a) {
                    let s = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        s[i] = s[i] + g[i] * vb[i % n];
                    }
                }
                if ng(*b) {
                    let s = slot(grads, *b, n);
                    for i in 0..g.len() {
                        s[i % n] = s[i % n] + g[i] * va[i];
                    }
                }
            }
            Op::Scale(a, k) => {
                let s = slot(grads, *a, g.len());
                for (d, &x) in s.iter_mut().zip(g) {
                    *d = *d + x * *k;
                }
            }
            Op::AddScalar(a) => add_into(slot(grads, *a, g.len()), g),
            Op::MulConst(a, c) => {
                let s = slot(grads, *a, g.len());
                for ((d, &x), &m) in s.iter_mut().zip(g).zip(c.data()) {
                    *d = *d + x * m;
                }
            }
            Op::Unary(a, kind) => {
                let x = val(*a);
                let s = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    let d = match kind {
                        Unary::Relu => {
                            if x[i] > T::zero() {
                                T::one()
                            } else {
                                T::zero()
                            }
                        }
                        Unary::Gelu => T::cast(gelu_grad(x[i].as_f64())),
                        Unary::Tanh => T::one() - out[i] * out[i],
                        Unary::Sigmoid => out[i] * (T::one() - out[i]),
                        Unary::Exp => out[i],
                        Unary::Log => T::one() / x[i],
                        Unary::Abs => {
                            if x[i] > T::zero() {
                                T::one()
                            } else if x[i] < T::zero() {
                                -T::one()
                            } else {
                                T::zero()
                            }
                        }
                        Unary::Square => T::cast(2.0) * x[i],
                        Unary::Sqrt => T::cast(0.5) / out[i],
                    };
                    s[i] = s[i] + g[i] * d;
                }
            }
            Op::MatMul(a, b) => {
                let (sb, va, vb) = (nodes[b.0].value.shape(), val(*a), val(*b));
                let (k, n) = (sb[0], sb[1]);
                let m = va.len() / k;
                if ng(*a) {
                    let s = slot(grads, *a, va.len());
                    T::gemm(m, n, k, g, (n as isize, 1), vb, (1, n as isize), s, true);
                }
                if ng(*b) {
                    let s = slot(grads, *b, vb.len());
                    T::gemm(k, m, n, va, (1, k as isize), g, (n as isize, 1), s, true);
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let sa = nodes[a.0].value.shape();
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (va, vb) = (val(*a), val(*b));
                if ng(*a) {
                    let s = slot(grads, *a, va.len());
                    // da = dc * b^T
                    let bstr = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                    for i in 0..bs {
                        T::gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            (n as isize, 1),
                            &vb[i * k * n..(i + 1) * k * n],
                            bstr,
                            &mut s[i * m * k..(i + 1) * m * k],
                            true,
                        );
                    }
                }
                if ng(*b) {
                    let s = slot(grads, *b, vb.len());
                    for i in 0..bs {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &va[i * m * k..(i + 1) * m * k];
                        let si = &mut s[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // db [n,k] = dc^T a
                            T::gemm(n, m, k, gi, (1, n as isize), ai, (k as isize, 1), si, true);
                        } else {
                            // db [k,n] = a^T dc
                            T::gemm(k, m, n, ai, (1, k as isize), gi, (n as isize, 1), si, true);
                        }
                    }
                }
            }
            Op::Reshape(a) => add_into(slot(grads, *a, g.len()), g),
            Op::Gather { a, map } => {
                let n = val(*a).len();
                let s = slot(grads, *a, n);
                for (&src, &x) in map.iter().zip(g) {
                    s[src as usize] = s[src as usize] + x;
                }
            }
            Op::Concat(parts, axis) => {
                let shape = node.value.shape();
                let (outer, total, inner) = split_axis(shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let np = nodes[p.0].value.shape()[*axis];
                    if ng(p) {
                        let len = val(p).len();
                        let s = slot(grads, p, len);
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + np) * inner];
                            add_into(&mut s[o * np * inner..(o + 1) * np * inner], src);
                        }
                    }
                    offset += np;
                }
            }
            Op::SumAll(a) => {
                let n = val(*a).len();
                let s = slot(grads, *a, n);
                s.iter_mut().for_each(|d| *d = *d + g[0]);
            }
            Op::SumAxis(a, axis) => {
                let shape = nodes[a.0].value.shape();
                let (outer, n, inner) = split_axis(shape, *axis);
                let s = slot(grads, *a, outer * n * inner);
                for o in 0..outer {
                    for i in 0..n {
                        add_into(
                            &mut s[(o * n + i) * inner..(o * n + i + 1) * inner],
                            &g[o * inner..(o + 1) * inner],
                        );
                    }
                }
            }
            Op::Softmax(a, axis) | Op::LogSoftmax(a, axis) => {
                let log = matches!(node.op, Op::LogSoftmax(..));
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                let s = slot(grads, *a, g.len());
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| (o * n + i) * inner + j;
                        if log {
                            let gs: T = (0..n).map(|i| g[at(i)]).sum();
                            for i in 0..n {
                                s[at(i)] = s[at(i)] + g[at(i)] - out[at(i)].exp() * gs;
                            }
                        } else {
                            let dot: T = (0..n).map(|i| g[at(i)] * out[at(i)]).sum();
                            for i in 0..n {
                                s[at(i)] = s[at(i)] + out[at(i)] * (g[at(i)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = *node.value.shape().last().unwrap();
                let rows = g.len() / d;
                let gv = gamma.map(|gm| val(gm).to_vec());
                if let Some(b) = beta.filter(|&b| ng(b)) {
                    let s = slot(grads, b, d);
                    for (i, &x) in g.iter().enumerate() {
                        s[i % d] = s[i % d] + x;
                    }
                }
                if let Some(gm) = gamma.filter(|&gm| ng(gm)) {
                    let s = slot(grads, gm, d);
                    for i in 0..g.len() {
                        s[i % d] = s[i % d] + g[i] * xhat[i];
                    }
                }
                if ng(*x) {
                    let s = slot(grads, *x, g.len());
                    let dn = T::cast(d as f64);
                    let mut dxhat = vec![T::zero(); d];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        for i in 0..d {
                            dxhat[i] = match &gv {
                                Some(gm) => gr[i] * gm[i],
                                None => gr[i],
                            };
                        }
                        let m1 = dxhat.iter().copied().sum::<T>() / dn;
                        let m2 = dxhat.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() / dn;
                        for i in 0..d {
                            let v = rstd[r] * (dxhat[i] - m1 - hr[i] * m2);
                            s[r * d + i] = s[r * d + i] + v;
                        }
                    }
                }
            }
            Op::Conv2d { x, w, bias, geom } => {
                let sw = nodes[w.0].value.shape();
                let o = sw[0];
                let (ho, wo) = geom.out_hw();
                let hw = ho * wo;
                let ckk = geom.col_rows();
                let in_plane = geom.channels * geom.h * geom.w;
                let bs = g.len() / (o * hw);
                if let Some(b) = bias.filter(|&b| ng(b)) {
                    let s = slot(grads, b, o);
                    for (i, chunk) in g.chunks(hw).enumerate() {
                        s[i % o] = s[i % o] + chunk.iter().copied().sum::<T>();
                    }
                }
                let xd = val(*x);
                let wd = val(*w);
                let mut cols = vec![T::zero(); if geom.is_pointwise() { 0 } else { ckk * hw }];
                if ng(*w) {
                    let mut dw = vec![T::zero(); wd.len()];
                    for b in 0..bs {
                        let img = &xd[b * in_plane..(b + 1) * in_plane];
                        let colm: &[T] = if geom.is_pointwise() {
                            img
                        } else {
                            im2col(img, geom, &mut cols);
                            &cols
                        };
                        T::gemm(
                            o,
                            hw,
                            ckk,
                            &g[b * o * hw..(b + 1) * o * hw],
                            (hw as isize, 1),
                            colm,
                            (1, hw as isize),
                            &mut dw,
                            true,
                        );
                    }
                    add_into(slot(grads, *w, wd.len()), &dw);
                }
                if ng(*x) {
                    let s = slot(grads, *x, xd.len());
                    let mut dcols = vec![T::zero(); ckk * hw];
                    for b in 0..bs {
                        let gb = &g[b * o * hw..(b + 1) * o * hw];
                        let dst = &mut s[b * in_plane..(b + 1) * in_plane];
                        if geom.is_pointwise() {
                            T::gemm(ckk, o, hw, wd, (1, ckk as isize), gb, (hw as isize, 1), dst, true);
                        } else {
                            T::gemm(ckk, o, hw, wd, (1, ckk as isize), gb, (hw as isize, 1), &mut dcols, false);
                            col2im(&dcols, geom, dst);
                        }
                    }
                }
            }
            Op::Resample { a, map } => {
                let n = val(*a).len();
                let planes = n / (map.in_hw.0 * map.in_hw.1);
                let s = slot(grads, *a, n);
                map.apply_transpose(g, planes, s);
            }
            Op::ClassLoss {
                logits,
                targets,
                gamma,
                alpha,
            } => {
                let c = nodes[logits.0].value.shape()[1];
                let z = val(*logits);
                let rows = targets.len();
                let scale = g[0] / T::cast(rows as f64);
                let s = slot(grads, *logits, z.len());
                for (r, &t) in targets.iter().enumerate() {
                    let row = &z[r * c..(r + 1) * c];
                    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let zs: T = row.iter().map(|&v| (v - mx).exp()).sum();
                    let p_t = (row[t] - mx).exp() / zs;
                    let logp = row[t] - mx - zs.ln();
                    // dL/dp_t * p_t
                    let one_m = T::one() - p_t;
                    let mut coef = -*alpha * one_m.powf(*gamma);
                    if *gamma != T::zero() {
                        coef = coef + *alpha * *gamma * one_m.powf(*gamma - T::one()) * logp * p_t;
                    }
                    for j in 0..c {
                        let sj = (row[j] - mx).exp() / zs;
                        let dj = if j == t { T::one() - sj } else { -sj };
                        s[r * c + j] = s[r * c + j] + scale * coef * dj;
                    }
                }
            }
        }
    }
}

/// Shorthand for the three resampling modes.
impl<T: Scalar> Graph<'_, T> {
    pub fn adaptive_avg_pool(&mut self, a: Var, out_hw: (usize, usize)) -> Result<Var> {
        self.resample(a, ResampleMode::AdaptiveAvg, out_hw)
    }

    pub fn upsample_nearest(&mut self, a: Var, out_hw: (usize, usize)) -> Result<Var> {
        self.resample(a, ResampleMode::Nearest, out_hw)
    }

    pub fn upsample_bilinear(&mut self, a: Var, out_hw: (usize, usize)) -> Result<Var> {
        self.resample(a, ResampleMode::Bilinear, out_hw)
    }

    /// `x W + b` over the last axis.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_suffix(y, b),
            None => Ok(y),
        }
    }
}
