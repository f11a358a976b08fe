use super::{Builder, ParamId};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Var};

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        let mut s = b.scope(name);
        let w = s.kaiming("weight", &[in_dim, out_dim], in_dim)?;
        let bias = if bias { Some(s.zeros("bias", &[out_dim])?) } else { None };
        Ok(Self {
            w,
            b: bias,
            in_dim,
            out_dim,
        })
    }

    /// Same layer with weights initialised to zero.
    pub fn zeroed<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        let mut s = b.scope(name);
        let w = s.zeros("weight", &[in_dim, out_dim])?;
        let bias = Some(s.zeros("bias", &[out_dim])?);
        Ok(Self {
            w,
            b: bias,
            in_dim,
            out_dim,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
}

impl Conv2d {
    /// Square `kernel`, 'same'-style padding of `kernel / 2`.
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Result<Self> {
        let mut s = b.scope(name);
        let w = s.kaiming("weight", &[out_ch, in_ch, kernel, kernel], in_ch * kernel * kernel)?;
        let bias = if bias { Some(s.zeros("bias", &[out_ch])?) } else { None };
        Ok(Self {
            w,
            b: bias,
            stride,
            pad: kernel / 2,
            in_ch,
            out_ch,
            kernel,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, dim: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Self {
            gamma: s.ones("weight", &[dim])?,
            beta: s.zeros("bias", &[dim])?,
            eps: 1e-5,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gm = g.param(self.gamma);
        let bt = g.param(self.beta);
        g.layer_norm(x, Some(gm), Some(bt), self.eps)
    }
}

/// Two-layer perceptron with GELU.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub dropout: f64,
}

impl Mlp {
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        dropout: f64,
    ) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Self {
            fc1: Linear::new(&mut s, "fc1", in_dim, hidden, true)?,
            fc2: Linear::new(&mut s, "fc2", hidden, out_dim, true)?,
            dropout,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h);
        let seed = g.next_seed();
        let h = g.dropout(h, self.dropout, seed)?;
        self.fc2.forward(g, h)
    }
}

/// `softmax(q k^T / sqrt(d_k)) v` per head.
///
/// `q [B, Nq, d]`, `k, v [B, Nk, d]`; returns `[B, Nq, d]` with heads
/// concatenated along the feature axis.
pub fn attention<T: Scalar>(
    g: &mut Graph<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<Var> {
    let (sq, sk) = (g.shape(q).to_vec(), g.shape(k).to_vec());
    let (bs, nq, d) = (sq[0], sq[1], sq[2]);
    let nk = sk[1];
    if d % heads != 0 {
        return Err(Error::Shape(format!("width {d} not divisible by {heads} heads")));
    }
    let dk = d / heads;
    let split = |g: &mut Graph<'_, T>, x: Var, n: usize| -> Result<Var> {
        let x = g.reshape(x, &[bs, n, heads, dk])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[bs * heads, n, dk])
    };
    let qh = split(g, q, nq)?;
    let kh = split(g, k, nk)?;
    let vh = split(g, v, nk)?;
    let scores = g.bmm(qh, kh, true)?;
    let scores = g.scale(scores, 1.0 / (dk as f64).sqrt());
    let attn = g.softmax(scores, 2)?;
    let out = g.bmm(attn, vh, false)?;
    let out = g.reshape(out, &[bs, heads, nq, dk])?;
    let out = g.permute(out, &[0, 2, 1, 3])?;
    g.reshape(out, &[bs, nq, d])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QkvMode {
    /// One `d -> 3d` projection split into Q, K, V.
    Fused,
    /// Three separate `d -> d` matmuls on column blocks of the same weights.
    Split,
}

/// Multi-head self-attention with a fused QKV projection.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("width {dim} not divisible by {heads} heads")));
        }
        let mut s = b.scope(name);
        Ok(Self {
            qkv: Linear::new(&mut s, "qkv", dim, 3 * dim, true)?,
            out: Linear::new(&mut s, "out", dim, dim, true)?,
            heads,
            dim,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        self.forward_with(g, x, QkvMode::Fused)
    }

    pub fn forward_with<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, mode: QkvMode) -> Result<Var> {
        let d = self.dim;
        let (q, k, v) = match mode {
            QkvMode::Fused => {
                let qkv = self.qkv.forward(g, x)?;
                (
                    g.narrow(qkv, 2, 0, d)?,
                    g.narrow(qkv, 2, d, d)?,
                    g.narrow(qkv, 2, 2 * d, d)?,
                )
            }
            QkvMode::Split => {
                let w = g.param(self.qkv.w);
                let b = self.qkv.b.map(|b| g.param(b));
                let mut proj = |i: usize| -> Result<Var> {
                    let wi = g.narrow(w, 1, i * d, d)?;
                    let bi = b.map(|b| g.narrow(b, 0, i * d, d)).transpose()?;
                    g.linear(x, wi, bi)
                };
                (proj(0)?, proj(1)?, proj(2)?)
            }
        };
        let a = attention(g, q, k, v, self.heads)?;
        self.out.forward(g, a)
    }
}

/// Learned queries attending to a context sequence.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub q: Linear,
    pub kv: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl CrossAttention {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("width {dim} not divisible by {heads} heads")));
        }
        let mut s = b.scope(name);
        Ok(Self {
            q: Linear::new(&mut s, "q", dim, dim, true)?,
            kv: Linear::new(&mut s, "kv", dim, 2 * dim, true)?,
            out: Linear::new(&mut s, "out", dim, dim, true)?,
            heads,
            dim,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, queries: Var, context: Var) -> Result<Var> {
        let q = self.q.forward(g, queries)?;
        let kv = self.kv.forward(g, context)?;
        let k = g.narrow(kv, 2, 0, self.dim)?;
        let v = g.narrow(kv, 2, self.dim, self.dim)?;
        let a = attention(g, q, k, v, self.heads)?;
        self.out.forward(g, a)
    }
}

/// Pre-norm block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_hidden: usize,
        dropout: f64,
    ) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Self {
            ln1: LayerNorm::new(&mut s, "ln1", dim)?,
            attn: MultiHeadAttention::new(&mut s, "attn", dim, heads)?,
            ln2: LayerNorm::new(&mut s, "ln2", dim)?,
            mlp: Mlp::new(&mut s, "mlp", dim, mlp_hidden, dim, dropout)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.ln1.forward(g, x)?;
        let h = self.attn.forward(g, h)?;
        let x = g.add(x, h)?;
        let h = self.ln2.forward(g, x)?;
        let h = self.mlp.forward(g, h)?;
        g.add(x, h)
    }
}
