//! Raw numeric kernels shared by the graph ops.

use super::Scalar;

/// Sparse linear map from an `in_hw` plane to an `out_hw` plane.
///
/// Adaptive average pooling, nearest and bilinear upsampling are all linear
/// in the input, so one representation serves forward and backward for all
/// three.
#[derive(Debug, Clone, PartialEq)]
pub struct ResampleMap {
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
    /// `(out_index, in_index, weight)` triples within one plane.
    pub taps: Vec<(u32, u32, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResampleMode {
    AdaptiveAvg,
    Nearest,
    Bilinear,
}

fn axis_taps(mode: ResampleMode, n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    (0..n_out)
        .map(|o| match mode {
            ResampleMode::AdaptiveAvg => {
                let start = (o * n_in) / n_out;
                let end = ((o + 1) * n_in).div_ceil(n_out);
                let w = 1.0 / (end - start) as f64;
                (start..end).map(|i| (i, w)).collect()
            }
            ResampleMode::Nearest => {
                let src = ((o * n_in) / n_out).min(n_in - 1);
                vec![(src, 1.0)]
            }
            ResampleMode::Bilinear => {
                let scale = n_in as f64 / n_out as f64;
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                let frac = src - i0 as f64;
                if i0 == i1 || frac == 0.0 {
                    vec![(i0, 1.0)]
                } else {
                    vec![(i0, 1.0 - frac), (i1, frac)]
                }
            }
        })
        .collect()
}

impl ResampleMap {
    pub fn new(mode: ResampleMode, in_hw: (usize, usize), out_hw: (usize, usize)) -> Self {
        let rows = axis_taps(mode, in_hw.0, out_hw.0);
        let cols = axis_taps(mode, in_hw.1, out_hw.1);
        let mut taps = Vec::new();
        for (oy, ry) in rows.iter().enumerate() {
            for (ox, rx) in cols.iter().enumerate() {
                let out = (oy * out_hw.1 + ox) as u32;
                for &(iy, wy) in ry {
                    for &(ix, wx) in rx {
                        taps.push((out, (iy * in_hw.1 + ix) as u32, wy * wx));
                    }
                }
            }
        }
        Self {
            in_hw,
            out_hw,
            taps,
        }
    }

    pub fn apply<T: Scalar>(&self, input: &[T], planes: usize) -> Vec<T> {
        let (ip, op) = (self.in_hw.0 * self.in_hw.1, self.out_hw.0 * self.out_hw.1);
        let taps: Vec<(usize, usize, T)> = self
            .taps
            .iter()
            .map(|&(o, i, w)| (o as usize, i as usize, T::cast(w)))
            .collect();
        let mut out = vec![T::zero(); planes * op];
        for p in 0..planes {
            let src = &input[p * ip..(p + 1) * ip];
            let dst = &mut out[p * op..(p + 1) * op];
            for &(o, i, w) in &taps {
                dst[o] = dst[o] + w * src[i];
            }
        }
        out
    }

    pub fn apply_transpose<T: Scalar>(&self, grad_out: &[T], planes: usize, grad_in: &mut [T]) {
        let (ip, op) = (self.in_hw.0 * self.in_hw.1, self.out_hw.0 * self.out_hw.1);
        let taps: Vec<(usize, usize, T)> = self
            .taps
            .iter()
            .map(|&(o, i, w)| (o as usize, i as usize, T::cast(w)))
            .collect();
        for p in 0..planes {
            let src = &grad_out[p * op..(p + 1) * op];
            let dst = &mut grad_in[p * ip..(p + 1) * ip];
            for &(o, i, w) in &taps {
                dst[i] = dst[i] + w * src[o];
            }
        }
    }
}

/// Geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.kh) / self.stride + 1,
            (self.w + 2 * self.pad - self.kw) / self.stride + 1,
        )
    }

    /// 1x1, stride 1, no padding: the column matrix is the input itself.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }
}

/// Unfold one `[C,H,W]` image into a `[C*kh*kw, Ho*Wo]` column matrix.
pub fn im2col<T: Scalar>(img: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let ncol = ho * wo;
    for c in 0..g.channels {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image gradient.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let ncol = ho * wo;
    for c in 0..g.channels {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = iy as usize * g.w;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            let d = &mut plane[base + ix as usize];
                            *d = *d + src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Split a shape into `(outer, axis_len, inner)` around `axis`.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Row-major strides.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}
