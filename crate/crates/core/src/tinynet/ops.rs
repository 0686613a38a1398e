//! Layer kernels: forward passes and their analytic backward passes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor4;
use crate::error::{Error, Result};

/// `C = A·B` (or `C += A·B`) with `A` logically `[m,k]` and `B` logically `[k,n]`.
/// A transposed operand is stored in its untransposed row-major layout.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    // SAFETY: slice lengths are checked above and the strides describe
    // row-major [m,k], [k,n] and [m,n] layouts inside those slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Valid,
    Same,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Output extent and leading pad along one axis. Same-padding splits the
/// total pad symmetrically with the odd pixel on the bottom/right.
pub fn conv_out_dim(len: usize, k: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    if k == 0 || stride == 0 {
        return Err(Error::Shape("kernel and stride must be >= 1".into()));
    }
    match padding {
        Padding::Valid => {
            if len < k {
                return Err(Error::Shape(format!("input extent {len} < kernel {k}")));
            }
            Ok(((len - k) / stride + 1, 0))
        }
        Padding::Same => {
            let out = len.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(len);
            Ok((out, total / 2))
        }
    }
}

impl ConvGeometry {
    pub fn new(
        in_shape: (usize, usize, usize),
        filters: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let (in_c, in_h, in_w) = in_shape;
        let (out_h, pad_top) = conv_out_dim(in_h, kernel.0, stride, padding)?;
        let (out_w, pad_left) = conv_out_dim(in_w, kernel.1, stride, padding)?;
        Ok(ConvGeometry {
            in_c,
            in_h,
            in_w,
            filters,
            kh: kernel.0,
            kw: kernel.1,
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

fn im2col(x: &[f64], g: &ConvGeometry, cols: &mut [f64]) {
    let p = g.out_len();
    for c in 0..g.in_c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * p;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + i) as isize - g.pad_top as isize;
                    let dst = &mut cols[row + oy * g.out_w..row + (oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        dst.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &x[(c * g.in_h + iy as usize) * g.in_w..][..g.in_w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + j) as isize - g.pad_left as isize;
                        *d = if ix < 0 || ix >= g.in_w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeometry, dx: &mut [f64]) {
    let p = g.out_len();
    for c in 0..g.in_c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * p;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + i) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * g.in_h + iy as usize) * g.in_w..][..g.in_w];
                    let src = &cols[row + oy * g.out_w..row + (oy + 1) * g.out_w];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * g.stride + j) as isize - g.pad_left as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn check_conv_args(x: &Tensor4, w: &[f64], b: &[f64], g: &ConvGeometry) -> Result<()> {
    if x.c != g.in_c || x.h != g.in_h || x.w != g.in_w {
        return Err(Error::Shape(format!(
            "conv input {:?} does not match geometry ({}, {}, {})",
            x.shape(),
            g.in_c,
            g.in_h,
            g.in_w
        )));
    }
    if w.len() != g.filters * g.patch_len() || b.len() != g.filters {
        return Err(Error::Shape(format!(
            "conv weights {} / bias {} for {} filters of {} taps",
            w.len(),
            b.len(),
            g.filters,
            g.patch_len()
        )));
    }
    Ok(())
}

/// 2-D convolution (cross-correlation). `w` is `[F, C, kH, kW]`, `b` is `[F]`.
pub fn conv2d_forward(x: &Tensor4, w: &[f64], b: &[f64], g: &ConvGeometry) -> Result<Tensor4> {
    check_conv_args(x, w, b, g)?;
    x.check_finite("conv2d input")?;
    let (k, p) = (g.patch_len(), g.out_len());
    let mut out = Tensor4::zeros(x.n, g.filters, g.out_h, g.out_w);
    let mut cols = vec![0.0; k * p];
    for n in 0..x.n {
        im2col(x.sample(n), g, &mut cols);
        let dst = &mut out.data[n * g.filters * p..(n + 1) * g.filters * p];
        for (f, row) in dst.chunks_exact_mut(p).enumerate() {
            row.iter_mut().for_each(|v| *v = b[f]);
        }
        gemm(g.filters, k, p, w, false, &cols, false, dst, true);
    }
    Ok(out)
}

pub struct ConvGrads {
    pub dx: Tensor4,
    pub dw: Vec<f64>,
    pub db: Vec<f64>,
}

pub fn conv2d_backward(x: &Tensor4, w: &[f64], g: &ConvGeometry, dy: &Tensor4) -> Result<ConvGrads> {
    let (k, p) = (g.patch_len(), g.out_len());
    if dy.shape() != [x.n, g.filters, g.out_h, g.out_w] || w.len() != g.filters * k {
        return Err(Error::Shape(format!(
            "conv backward: upstream {:?} vs expected [{}, {}, {}, {}]",
            dy.shape(),
            x.n,
            g.filters,
            g.out_h,
            g.out_w
        )));
    }
    let mut dx = Tensor4::zeros(x.n, x.c, x.h, x.w);
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; g.filters];
    let mut cols = vec![0.0; k * p];
    let mut dcols = vec![0.0; k * p];
    let sample_in = x.sample_len();
    for n in 0..x.n {
        let dyn_ = dy.sample(n);
        for (f, row) in dyn_.chunks_exact(p).enumerate() {
            db[f] += row.iter().sum::<f64>();
        }
        im2col(x.sample(n), g, &mut cols);
        gemm(g.filters, p, k, dyn_, false, &cols, true, &mut dw, true);
        gemm(k, g.filters, p, w, true, dyn_, false, &mut dcols, false);
        col2im(&dcols, g, &mut dx.data[n * sample_in..(n + 1) * sample_in]);
    }
    Ok(ConvGrads { dx, dw, db })
}

/// 2×2 stride-2 transposed convolution. `w` is `[C_in, C_out, 2, 2]`, `b` is `[C_out]`.
pub fn tconv2d_forward(x: &Tensor4, w: &[f64], b: &[f64], out_c: usize) -> Result<Tensor4> {
    if w.len() != x.c * out_c * 4 || b.len() != out_c {
        return Err(Error::Shape(format!(
            "tconv weights {} / bias {} for {} -> {} channels",
            w.len(),
            b.len(),
            x.c,
            out_c
        )));
    }
    x.check_finite("tconv2d input")?;
    let hw = x.h * x.w;
    let (oh, ow) = (2 * x.h, 2 * x.w);
    let mut out = Tensor4::zeros(x.n, out_c, oh, ow);
    let mut stamp = vec![0.0; out_c * 4 * hw];
    for n in 0..x.n {
        gemm(out_c * 4, x.c, hw, w, true, x.sample(n), false, &mut stamp, false);
        for o in 0..out_c {
            for a in 0..2 {
                for bb in 0..2 {
                    let src = &stamp[((o * 4) + a * 2 + bb) * hw..][..hw];
                    for i in 0..x.h {
                        let row = out.idx(n, o, 2 * i + a, 0);
                        for j in 0..x.w {
                            out.data[row + 2 * j + bb] = src[i * x.w + j] + b[o];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn tconv2d_backward(x: &Tensor4, w: &[f64], out_c: usize, dy: &Tensor4) -> Result<ConvGrads> {
    if dy.shape() != [x.n, out_c, 2 * x.h, 2 * x.w] {
        return Err(Error::Shape(format!(
            "tconv backward: upstream {:?} for input {:?}",
            dy.shape(),
            x.shape()
        )));
    }
    let hw = x.h * x.w;
    let mut dx = Tensor4::zeros(x.n, x.c, x.h, x.w);
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; out_c];
    let mut dstamp = vec![0.0; out_c * 4 * hw];
    for n in 0..x.n {
        for o in 0..out_c {
            for a in 0..2 {
                for bb in 0..2 {
                    let dst = &mut dstamp[((o * 4) + a * 2 + bb) * hw..][..hw];
                    for i in 0..x.h {
                        let row = dy.idx(n, o, 2 * i + a, 0);
                        for j in 0..x.w {
                            let v = dy.data[row + 2 * j + bb];
                            dst[i * x.w + j] = v;
                            db[o] += v;
                        }
                    }
                }
            }
        }
        gemm(x.c, hw, out_c * 4, x.sample(n), false, &dstamp, true, &mut dw, true);
        let s = x.sample_len();
        gemm(x.c, out_c * 4, hw, w, false, &dstamp, false, &mut dx.data[n * s..(n + 1) * s], false);
    }
    Ok(ConvGrads { dx, dw, db })
}

/// 2×2 stride-2 max pooling. Odd extents are padded with −∞ on the
/// bottom/right. Returns the winners' flat input indices for the backward pass;
/// ties go to the first element in row-major order.
pub fn maxpool2d_forward(x: &Tensor4) -> (Tensor4, Vec<usize>) {
    let (oh, ow) = (x.h.div_ceil(2), x.w.div_ceil(2));
    let mut out = Tensor4::zeros(x.n, x.c, oh, ow);
    let mut route = vec![0usize; out.len()];
    let mut k = 0;
    for n in 0..x.n {
        for c in 0..x.c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut arg = usize::MAX;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let (y, xx) = (2 * oy + dy, 2 * ox + dx);
                            if y < x.h && xx < x.w {
                                let i = x.idx(n, c, y, xx);
                                if arg == usize::MAX || x.data[i] > best {
                                    best = x.data[i];
                                    arg = i;
                                }
                            }
                        }
                    }
                    out.data[k] = best;
                    route[k] = arg;
                    k += 1;
                }
            }
        }
    }
    (out, route)
}

pub fn maxpool2d_backward(input_shape: [usize; 4], route: &[usize], dy: &Tensor4) -> Tensor4 {
    let [n, c, h, w] = input_shape;
    let mut dx = Tensor4::zeros(n, c, h, w);
    for (&i, &g) in route.iter().zip(&dy.data) {
        dx.data[i] += g;
    }
    dx
}

/// `y = x·W + b` with `x` as `[N, D]` (any trailing layout), `W` as `[D, U]`.
pub fn dense_forward(x: &Tensor4, w: &[f64], b: &[f64]) -> Result<Tensor4> {
    let d = x.sample_len();
    let u = b.len();
    if w.len() != d * u {
        return Err(Error::Shape(format!(
            "dense weights {} for input width {d} and {u} units",
            w.len()
        )));
    }
    x.check_finite("dense input")?;
    let mut out = Tensor4::zeros(x.n, u, 1, 1);
    for row in out.data.chunks_exact_mut(u) {
        row.copy_from_slice(b);
    }
    gemm(x.n, d, u, &x.data, false, w, false, &mut out.data, true);
    Ok(out)
}

pub fn dense_backward(x: &Tensor4, w: &[f64], units: usize, dy: &Tensor4) -> Result<ConvGrads> {
    let d = x.sample_len();
    if dy.n != x.n || dy.sample_len() != units || w.len() != d * units {
        return Err(Error::Shape(format!(
            "dense backward: upstream {:?} for input {:?}",
            dy.shape(),
            x.shape()
        )));
    }
    let mut dw = vec![0.0; d * units];
    gemm(d, x.n, units, &x.data, true, &dy.data, false, &mut dw, false);
    let mut db = vec![0.0; units];
    for row in dy.data.chunks_exact(units) {
        for (acc, v) in db.iter_mut().zip(row) {
            *acc += v;
        }
    }
    let mut dx = x.with_data(vec![0.0; x.len()]);
    gemm(x.n, units, d, &dy.data, false, w, true, &mut dx.data, false);
    Ok(ConvGrads { dx, dw, db })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn activation_forward(x: &Tensor4, kind: Activation) -> Tensor4 {
    match kind {
        Activation::Relu => x.map(|v| v.max(0.0)),
        Activation::Sigmoid => x.map(sigmoid),
    }
}

/// `x` is the activation input, `y` its output.
pub fn activation_backward(x: &Tensor4, y: &Tensor4, kind: Activation, dy: &Tensor4) -> Tensor4 {
    let data = match kind {
        Activation::Relu => x
            .data
            .iter()
            .zip(&dy.data)
            .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
            .collect(),
        Activation::Sigmoid => y
            .data
            .iter()
            .zip(&dy.data)
            .map(|(&s, &g)| g * s * (1.0 - s))
            .collect(),
    };
    dy.with_data(data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Inverted dropout. Returns the output and the per-element scale applied
/// (0 or `1/(1−rate)`), which the backward pass multiplies into `dy`.
pub fn dropout_forward<R: Rng + ?Sized>(
    x: &Tensor4,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor4, Option<Vec<f64>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::param("rate", "dropout rate must be in [0, 1)"));
    }
    if mode == Mode::Infer || rate == 0.0 {
        return Ok((x.clone(), None));
    }
    let keep = 1.0 - rate;
    let scale: Vec<f64> = (0..x.len())
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let out = x.with_data(x.data.iter().zip(&scale).map(|(v, s)| v * s).collect());
    Ok((out, Some(scale)))
}

pub fn dropout_backward(scale: Option<&[f64]>, dy: &Tensor4) -> Tensor4 {
    match scale {
        None => dy.clone(),
        Some(s) => dy.with_data(dy.data.iter().zip(s).map(|(g, s)| g * s).collect()),
    }
}

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

pub struct BatchNormCache {
    pub xhat: Tensor4,
    pub inv_std: Vec<f64>,
}

/// Per-channel batch normalization over (n, h, w).
pub fn batchnorm_forward(
    x: &Tensor4,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &mut [f64],
    running_var: &mut [f64],
    mode: Mode,
) -> Result<(Tensor4, Option<BatchNormCache>)> {
    let c = x.c;
    if gamma.len() != c || beta.len() != c || running_mean.len() != c || running_var.len() != c {
        return Err(Error::Shape(format!("batchnorm parameters for {c} channels")));
    }
    let hw = x.h * x.w;
    let mut out = x.with_data(vec![0.0; x.len()]);
    match mode {
        Mode::Infer => {
            for n in 0..x.n {
                for ch in 0..c {
                    let inv = 1.0 / (running_var[ch] + BN_EPS).sqrt();
                    let base = (n * c + ch) * hw;
                    for i in base..base + hw {
                        out.data[i] = gamma[ch] * (x.data[i] - running_mean[ch]) * inv + beta[ch];
                    }
                }
            }
            Ok((out, None))
        }
        Mode::Train => {
            if x.n < 2 {
                return Err(Error::param("batch", "batchnorm needs a batch of at least 2 in train mode"));
            }
            let m = (x.n * hw) as f64;
            let mut xhat = x.with_data(vec![0.0; x.len()]);
            let mut inv_std = vec![0.0; c];
            for ch in 0..c {
                let mut sum = 0.0;
                for n in 0..x.n {
                    let base = (n * c + ch) * hw;
                    sum += x.data[base..base + hw].iter().sum::<f64>();
                }
                let mean = sum / m;
                let mut ss = 0.0;
                for n in 0..x.n {
                    let base = (n * c + ch) * hw;
                    ss += x.data[base..base + hw].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
                }
                let var = ss / m;
                let inv = 1.0 / (var + BN_EPS).sqrt();
                inv_std[ch] = inv;
                for n in 0..x.n {
                    let base = (n * c + ch) * hw;
                    for i in base..base + hw {
                        let xh = (x.data[i] - mean) * inv;
                        xhat.data[i] = xh;
                        out.data[i] = gamma[ch] * xh + beta[ch];
                    }
                }
                running_mean[ch] = BN_MOMENTUM * running_mean[ch] + (1.0 - BN_MOMENTUM) * mean;
                running_var[ch] = BN_MOMENTUM * running_var[ch] + (1.0 - BN_MOMENTUM) * var;
            }
            Ok((out, Some(BatchNormCache { xhat, inv_std })))
        }
    }
}

/// Backward through train-mode batch statistics. Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_backward(cache: &BatchNormCache, gamma: &[f64], dy: &Tensor4) -> (Tensor4, Vec<f64>, Vec<f64>) {
    let xhat = &cache.xhat;
    let (c, hw) = (xhat.c, xhat.h * xhat.w);
    let m = (xhat.n * hw) as f64;
    let mut dx = dy.with_data(vec![0.0; dy.len()]);
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ch in 0..c {
        let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
        for n in 0..xhat.n {
            let base = (n * c + ch) * hw;
            for i in base..base + hw {
                sum_dy += dy.data[i];
                sum_dy_xhat += dy.data[i] * xhat.data[i];
            }
        }
        dgamma[ch] = sum_dy_xhat;
        dbeta[ch] = sum_dy;
        let k = gamma[ch] * cache.inv_std[ch] / m;
        for n in 0..xhat.n {
            let base = (n * c + ch) * hw;
            for i in base..base + hw {
                dx.data[i] = k * (m * dy.data[i] - sum_dy - xhat.data[i] * sum_dy_xhat);
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub const BCE_EPS: f64 = 1e-7;

/// Mean binary cross-entropy with predictions clamped to `[ε, 1−ε]`.
pub fn bce_loss(p: &[f64], y: &[f64]) -> Result<f64> {
    if p.len() != y.len() || p.is_empty() {
        return Err(Error::Shape(format!(
            "bce over {} predictions and {} targets",
            p.len(),
            y.len()
        )));
    }
    let sum: f64 = p
        .iter()
        .zip(y)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(sum / p.len() as f64)
}

/// Gradient of the mean BCE with respect to the (clamped) predictions.
pub fn bce_grad(p: &[f64], y: &[f64]) -> Vec<f64> {
    let count = p.len() as f64;
    p.iter()
        .zip(y)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            (-y / p + (1.0 - y) / (1.0 - p)) / count
        })
        .collect()
}

/// Gradient of `bce(sigmoid(z), y)` with respect to the logits `z`.
pub fn bce_logit_grad(p: &[f64], y: &[f64]) -> Vec<f64> {
    let count = p.len() as f64;
    p.iter().zip(y).map(|(&p, &y)| (p - y) / count).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn zeros(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One bias-corrected Adam step at iteration `t ≥ 1`.
pub fn adam_update(param: &mut [f64], grad: &[f64], state: &mut AdamState, t: u64, hp: &AdamParams) -> Result<()> {
    if param.len() != grad.len() || state.m.len() != param.len() || state.v.len() != param.len() {
        return Err(Error::Shape("adam: parameter, gradient and state lengths differ".into()));
    }
    if t == 0 {
        return Err(Error::param("t", "adam step counter starts at 1"));
    }
    let bc1 = 1.0 - hp.beta1.powi(t as i32);
    let bc2 = 1.0 - hp.beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
        state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        param[i] -= hp.lr * mhat / (vhat.sqrt() + hp.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_fixtures() {
        let x = Tensor4::from_vec(1, 1, 3, 3, vec![1.0; 9]).unwrap();
        let w = vec![1.0; 9];
        let g = ConvGeometry::new((1, 3, 3), 1, (3, 3), 1, Padding::Valid).unwrap();
        let y = conv2d_forward(&x, &w, &[0.0], &g).unwrap();
        assert_eq!(y.data, vec![9.0]);
        let g = ConvGeometry::new((1, 3, 3), 1, (3, 3), 1, Padding::Same).unwrap();
        let y = conv2d_forward(&x, &w, &[0.0], &g).unwrap();
        assert_eq!(y.data, vec![4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
        let x = Tensor4::from_vec(2, 1, 2, 3, (0..12).map(|v| v as f64).collect()).unwrap();
        let g = ConvGeometry::new((1, 2, 3), 1, (1, 1), 1, Padding::Valid).unwrap();
        assert_eq!(conv2d_forward(&x, &[1.0], &[0.0], &g).unwrap(), x);
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let x = Tensor4::zeros(1, 2, 4, 4);
        let g = ConvGeometry::new((1, 4, 4), 1, (3, 3), 1, Padding::Same).unwrap();
        assert!(conv2d_forward(&x, &[0.0; 9], &[0.0], &g).is_err());
        let mut bad = Tensor4::zeros(1, 1, 4, 4);
        bad.data[3] = f64::NAN;
        assert!(matches!(conv2d_forward(&bad, &[0.0; 9], &[0.0], &g), Err(Error::NonFinite(_))));
    }

    #[test]
    fn tconv_stamp() {
        let x = Tensor4::from_vec(1, 1, 1, 1, vec![2.5]).unwrap();
        let y = tconv2d_forward(&x, &[1.0; 4], &[0.0], 1).unwrap();
        assert_eq!(y.shape(), [1, 1, 2, 2]);
        assert_eq!(y.data, vec![2.5; 4]);
        let z = tconv2d_forward(&Tensor4::zeros(2, 3, 4, 5), &[0.7; 3 * 2 * 4], &[0.0; 2], 2).unwrap();
        assert_eq!(z.shape(), [2, 2, 8, 10]);
        assert!(z.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn maxpool_fixtures() {
        let x = Tensor4::from_vec(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, r) = maxpool2d_forward(&x);
        assert_eq!(y.data, vec![4.0]);
        assert_eq!(r, vec![3]);
        let (_, r) = maxpool2d_forward(&Tensor4::from_vec(1, 1, 2, 2, vec![5.0; 4]).unwrap());
        assert_eq!(r, vec![0]);
        let (y, _) = maxpool2d_forward(&Tensor4::zeros(1, 1, 3, 5));
        assert_eq!(y.shape(), [1, 1, 2, 3]);
    }

    #[test]
    fn dense_fixtures() {
        let x = Tensor4::from_vec(1, 2, 1, 1, vec![1.0, 2.0]).unwrap();
        let y = dense_forward(&x, &[1.0, 1.0], &[0.5]).unwrap();
        assert_eq!(y.data, vec![3.5]);
        let y = dense_forward(&x, &[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0]).unwrap();
        assert_eq!(y.data, vec![1.0, 2.0]);
    }

    #[test]
    fn activation_fixtures() {
        let x = Tensor4::from_vec(1, 3, 1, 1, vec![-3.0, 0.0, 3.0]).unwrap();
        assert_eq!(activation_forward(&x, Activation::Relu).data, vec![0.0, 0.0, 3.0]);
        assert_eq!(activation_forward(&x, Activation::Sigmoid).data[1], 0.5);
        let dy = x.with_data(vec![1.0; 3]);
        let y = activation_forward(&x, Activation::Relu);
        assert_eq!(activation_backward(&x, &y, Activation::Relu, &dy).data, vec![0.0, 0.0, 1.0]);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor4::from_vec(1, 4, 1, 1, vec![1.0, -2.0, 3.0, 4.0]).unwrap();
        assert_eq!(dropout_forward(&x, 0.5, Mode::Infer, &mut rng).unwrap().0, x);
        assert_eq!(dropout_forward(&x, 0.0, Mode::Train, &mut rng).unwrap().0, x);
        assert!(dropout_forward(&x, 1.0, Mode::Train, &mut rng).is_err());
        let big = Tensor4::from_vec(1, 100_000, 1, 1, vec![1.0; 100_000]).unwrap();
        let (y, _) = dropout_forward(&big, 0.5, Mode::Train, &mut rng).unwrap();
        let ratio = y.data.iter().sum::<f64>() / 100_000.0;
        assert!((0.98..=1.02).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn batchnorm_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor4::from_vec(4, 2, 3, 3, (0..72).map(|_| rng.gen_range(-5.0..9.0)).collect()).unwrap();
        let (mut rm, mut rv) = (vec![0.0; 2], vec![1.0; 2]);
        let (y, _) = batchnorm_forward(&x, &[1.0, 1.0], &[0.0, 0.0], &mut rm, &mut rv, Mode::Train).unwrap();
        let (y2, _) = batchnorm_forward(&x, &[2.0, 2.0], &[3.0, 3.0], &mut rm, &mut rv, Mode::Train).unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..4).flat_map(|n| (0..9).map(move |i| (n, i))).map(|(n, i)| y.data[(n * 2 + ch) * 9 + i]).collect();
            let mean = vals.iter().sum::<f64>() / 36.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 36.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
            let vals2: Vec<f64> = (0..4).flat_map(|n| (0..9).map(move |i| (n, i))).map(|(n, i)| y2.data[(n * 2 + ch) * 9 + i]).collect();
            let mean2 = vals2.iter().sum::<f64>() / 36.0;
            let sd2 = (vals2.iter().map(|v| (v - mean2).powi(2)).sum::<f64>() / 36.0).sqrt();
            assert!((mean2 - 3.0).abs() < 1e-12);
            assert!((sd2 - 2.0).abs() < 1e-3);
        }
        let single = Tensor4::zeros(1, 2, 3, 3);
        assert!(batchnorm_forward(&single, &[1.0; 2], &[0.0; 2], &mut rm, &mut rv, Mode::Train).is_err());
        assert!(batchnorm_forward(&single, &[1.0; 2], &[0.0; 2], &mut rm, &mut rv, Mode::Infer).is_ok());
    }

    #[test]
    fn bce_fixtures() {
        assert!(bce_loss(&[1.0, 0.0], &[1.0, 0.0]).unwrap() <= 1.2e-7);
        assert!((bce_loss(&[0.5], &[1.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce_loss(&[0.5], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn adam_fixtures() {
        let hp = AdamParams::default();
        for g in [0.3, -7.0, 1e-4] {
            let mut p = [1.0];
            let mut s = AdamState::zeros(1);
            adam_update(&mut p, &[g], &mut s, 1, &hp).unwrap();
            let step = p[0] - 1.0;
            assert!((step + hp.lr * g.signum()).abs() <= 1e-6 * hp.lr + hp.lr * 1e-4 * (1e-8 / g.abs()) * 1e4);
        }
        let mut p = [0.25];
        let mut s = AdamState::zeros(1);
        adam_update(&mut p, &[0.0], &mut s, 1, &hp).unwrap();
        assert_eq!(p[0], 0.25);

        // two steps unrolled by hand
        let (g1, g2, lr, b1, b2, eps) = (0.5f64, -0.2f64, 0.01, 0.9f64, 0.999f64, 1e-8);
        let hp = AdamParams { lr, beta1: b1, beta2: b2, eps };
        let mut p = [2.0];
        let mut s = AdamState::zeros(1);
        adam_update(&mut p, &[g1], &mut s, 1, &hp).unwrap();
        adam_update(&mut p, &[g2], &mut s, 2, &hp).unwrap();
        let m1 = (1.0 - b1) * g1;
        let v1 = (1.0 - b2) * g1 * g1;
        let p1 = 2.0 - lr * (m1 / (1.0 - b1)) / ((v1 / (1.0 - b2)).sqrt() + eps);
        let m2 = b1 * m1 + (1.0 - b1) * g2;
        let v2 = b2 * v1 + (1.0 - b2) * g2 * g2;
        let p2 = p1 - lr * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + eps);
        assert!((p[0] - p2).abs() < 1e-12);
        assert!(adam_update(&mut p, &[1.0, 2.0], &mut s, 3, &hp).is_err());
    }
}
