//! Dense CHW tensors and the handful of kernels the heads and backbone need.
//! Everything is f64 so gradient checks can run at tight tolerances.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w, data: vec![0.0; c * h * w] }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor data length");
        Self { c, h, w, data }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.h + y) * self.w + x
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(c, y, x)]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.h * self.w;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.h * self.w;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self { data: self.data.iter().map(|v| v * k).collect(), ..*self }
    }

    /// Columns `x0..x0 + w` of every channel.
    pub fn crop_cols(&self, x0: usize, w: usize) -> Self {
        let mut out = Tensor::zeros(self.c, self.h, w);
        for c in 0..self.c {
            for y in 0..self.h {
                let src = self.idx(c, y, x0);
                let dst = out.idx(c, y, 0);
                out.data[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
            }
        }
        out
    }

    /// Side-by-side concatenation along the width axis.
    pub fn hconcat(&self, right: &Tensor) -> Self {
        assert_eq!((self.c, self.h), (right.c, right.h), "hconcat shape");
        let w = self.w + right.w;
        let mut out = Tensor::zeros(self.c, self.h, w);
        for c in 0..self.c {
            for y in 0..self.h {
                let dst = out.idx(c, y, 0);
                out.data[dst..dst + self.w]
                    .copy_from_slice(&self.data[self.idx(c, y, 0)..self.idx(c, y, 0) + self.w]);
                out.data[dst + self.w..dst + w]
                    .copy_from_slice(&right.data[right.idx(c, y, 0)..right.idx(c, y, 0) + right.w]);
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Convolution geometry. Weights are laid out `[out][in][k][k]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvShape {
    pub fn weight_len(&self) -> usize {
        self.out_c * self.in_c * self.k * self.k
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    /// Range of output columns whose tap `kx` lands inside `0..in_w`.
    #[inline]
    fn valid_range(&self, kx: usize, in_w: usize, out_w: usize) -> (usize, usize) {
        // ix = ox * s + kx - pad, need 0 <= ix < in_w
        let lo = if kx >= self.pad { 0 } else { (self.pad - kx).div_ceil(self.stride) };
        let hi_num = in_w + self.pad;
        let hi = if hi_num > kx {
            ((hi_num - kx - 1) / self.stride + 1).min(out_w)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

/// Patch matrix `[in_c * k * k][oh * ow]`; out-of-bounds taps are zero.
fn im2col(input: &Tensor, shape: ConvShape, oh: usize, ow: usize) -> Vec<f64> {
    let (k, s) = (shape.k, shape.stride);
    let p = oh * ow;
    let mut col = vec![0.0; shape.in_c * k * k * p];
    for ci in 0..shape.in_c {
        let plane = input.plane(ci);
        for ky in 0..k {
            let (oy_lo, oy_hi) = shape.valid_range(ky, input.h, oh);
            for kx in 0..k {
                let (ox_lo, ox_hi) = shape.valid_range(kx, input.w, ow);
                let row = &mut col[((ci * k + ky) * k + kx) * p..][..p];
                for oy in oy_lo..oy_hi {
                    let iy = oy * s + ky - shape.pad;
                    let src = &plane[iy * input.w..(iy + 1) * input.w];
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    for ox in ox_lo..ox_hi {
                        dst[ox] = src[ox * s + kx - shape.pad];
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add of a patch-matrix gradient back onto the input grid.
fn col2im(col: &[f64], shape: ConvShape, h: usize, w: usize, oh: usize, ow: usize) -> Tensor {
    let (k, s) = (shape.k, shape.stride);
    let p = oh * ow;
    let mut out = Tensor::zeros(shape.in_c, h, w);
    for ci in 0..shape.in_c {
        let plane = out.plane_mut(ci);
        for ky in 0..k {
            let (oy_lo, oy_hi) = shape.valid_range(ky, h, oh);
            for kx in 0..k {
                let (ox_lo, ox_hi) = shape.valid_range(kx, w, ow);
                let row = &col[((ci * k + ky) * k + kx) * p..][..p];
                for oy in oy_lo..oy_hi {
                    let iy = oy * s + ky - shape.pad;
                    let src = &row[oy * ow..(oy + 1) * ow];
                    let dst = &mut plane[iy * w..(iy + 1) * w];
                    for ox in ox_lo..ox_hi {
                        dst[ox * s + kx - shape.pad] += src[ox];
                    }
                }
            }
        }
    }
    out
}

/// `c = a * b` for row-major `a: m x k`, `b: k x n`, with `b` addressed
/// through explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_strides: (isize, isize), b: &[f64], b_strides: (isize, isize), c: &mut [f64]) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the strides address only elements inside `a`, `b` and `c`,
    // whose lengths are checked by the callers' shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Zero-padded cross-correlation.
pub fn conv2d(input: &Tensor, weight: &[f64], bias: Option<&[f64]>, shape: ConvShape) -> Tensor {
    assert_eq!(input.c, shape.in_c, "conv input channels");
    assert_eq!(weight.len(), shape.weight_len(), "conv weight length");
    let (oh, ow) = shape.out_size(input.h, input.w);
    let p = oh * ow;
    let kk = shape.in_c * shape.k * shape.k;
    let col = im2col(input, shape, oh, ow);
    let mut out = Tensor::zeros(shape.out_c, oh, ow);
    gemm(shape.out_c, kk, p, weight, (kk as isize, 1), &col, (p as isize, 1), &mut out.data);
    if let Some(b) = bias {
        for (co, &bv) in b.iter().enumerate() {
            out.plane_mut(co).iter_mut().for_each(|v| *v += bv);
        }
    }
    out
}

pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Backward pass of [`conv2d`]. `want_input` skips the input gradient when
/// nothing upstream needs it.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &[f64],
    grad_out: &Tensor,
    shape: ConvShape,
    want_input: bool,
) -> ConvGrads {
    let (oh, ow) = (grad_out.h, grad_out.w);
    let p = oh * ow;
    let kk = shape.in_c * shape.k * shape.k;
    let col = im2col(input, shape, oh, ow);
    let gb = (0..shape.out_c).map(|co| grad_out.plane(co).iter().sum()).collect();
    let mut gw = vec![0.0; shape.weight_len()];
    // gw = go * col^T
    gemm(shape.out_c, p, kk, &grad_out.data, (p as isize, 1), &col, (1, p as isize), &mut gw);
    let gi = want_input.then(|| {
        // gcol = W^T * go
        let mut gcol = vec![0.0; kk * p];
        gemm(kk, shape.out_c, p, weight, (1, kk as isize), &grad_out.data, (p as isize, 1), &mut gcol);
        col2im(&gcol, shape, input.h, input.w, oh, ow)
    });
    ConvGrads { input: gi, weight: gw, bias: gb }
}

pub fn relu_inplace(t: &mut Tensor) {
    t.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes `grad` wherever the forward activation was clipped.
pub fn relu_backward_inplace(grad: &mut Tensor, activated: &Tensor) {
    for (g, a) in grad.data.iter_mut().zip(&activated.data) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// `y = W x + b` with `W` row-major `[out][in]`.
pub fn linear(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    b.iter()
        .enumerate()
        .map(|(o, bo)| bo + w[o * n_in..(o + 1) * n_in].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
        .collect()
}

/// Accumulates `dW += dy x^T`, `db += dy` and returns `W^T dy` when asked.
pub fn linear_backward(
    w: &[f64],
    x: &[f64],
    dy: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    want_input: bool,
) -> Option<Vec<f64>> {
    let n_in = x.len();
    for (o, d) in dy.iter().enumerate() {
        gb[o] += d;
        if *d != 0.0 {
            for (g, xi) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(x) {
                *g += d * xi;
            }
        }
    }
    want_input.then(|| {
        let mut dx = vec![0.0; n_in];
        for (o, d) in dy.iter().enumerate() {
            for (dxi, wv) in dx.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                *dxi += d * wv;
            }
        }
        dx
    })
}
