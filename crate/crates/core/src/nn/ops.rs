//! Forward and backward kernels for the layer set of the segmentation nets.
//!
//! Activations are (N, C, H, W) row-major. Every kernel walks the batch
//! sequentially and reduces in a fixed order, so results are bitwise
//! reproducible for a given build.

use crate::error::{bail, Result};
use crate::rng::Rng;
use crate::tensor::{gemm, Scalar, Tensor};

/// Weights and bias of a convolution. For a regular convolution the weight
/// is (out, in, kh, kw); for the 2×2 stride-2 transposed convolution it is
/// (in, out, 2, 2).
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams<T = f32> {
    Conv(ConvParams<T>),
    ConvTranspose(ConvParams<T>),
    BatchNorm(BatchNormParams<T>),
}

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

impl<T: Scalar> ConvParams<T> {
    /// Fan-in scaled normal init (Kaiming), zero bias.
    pub fn kaiming(out_c: usize, in_c: usize, k: usize, rng: &mut Rng) -> Self {
        let fan_in = (in_c * k * k).max(1) as f64;
        let std = (2.0 / fan_in).sqrt();
        Self {
            weight: Tensor::from_fn(&[out_c, in_c, k, k], |_| T::cast_from(rng.normal() * std)),
            bias: Tensor::zeros(&[out_c]),
        }
    }

    pub fn transposed_kaiming(in_c: usize, out_c: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / in_c.max(1) as f64).sqrt();
        Self {
            weight: Tensor::from_fn(&[in_c, out_c, 2, 2], |_| T::cast_from(rng.normal() * std)),
            bias: Tensor::zeros(&[out_c]),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ConvParams<U> {
        ConvParams {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

impl<T: Scalar> BatchNormParams<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Folds batch statistics into the running estimates.
    pub fn update_running(&mut self, mean: &[T], var: &[T]) {
        let m = T::cast_from(self.momentum);
        let one_m = T::cast_from(1.0 - self.momentum);
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(mean) {
            *r = m * *r + one_m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(var) {
            *r = m * *r + one_m * b;
        }
    }

    pub fn cast<U: Scalar>(&self) -> BatchNormParams<U> {
        BatchNormParams {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            running_mean: self.running_mean.cast(),
            running_var: self.running_var.cast(),
            momentum: self.momentum,
            eps: self.eps,
        }
    }
}

// ---------------------------------------------------------------------------
// convolution

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn p(&self) -> usize {
        self.ho * self.wo
    }
}

pub(crate) fn conv_geom<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvGeom> {
    let (n, cin, h, w) = x.dims4()?;
    let (cout, wcin, kh, kw) = weight.dims4()?;
    if stride == 0 {
        bail!(Invalid, "conv stride must be positive");
    }
    if wcin != cin {
        bail!(
            Shape,
            "conv expects {} input channels, input has {} (input {:?}, weight {:?})",
            wcin,
            cin,
            x.shape(),
            weight.shape()
        );
    }
    if bias.len() != cout {
        bail!(Shape, "conv bias length {} != out channels {}", bias.len(), cout);
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        bail!(
            Shape,
            "conv output would be empty: input {}x{}, kernel {}x{}, pad {}",
            h,
            w,
            kh,
            kw,
            pad
        );
    }
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    Ok(ConvGeom {
        n,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        stride,
        pad,
        ho,
        wo,
    })
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let p = g.p();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
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

fn col2im_add<T: Scalar>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.p();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = conv_geom(x, weight, bias, stride, pad)?;
    let (k, p) = (g.k(), g.p());
    let mut out = vec![T::zero(); g.n * g.cout * p];
    let mut col = vec![T::zero(); k * p];
    for i in 0..g.n {
        let y = &mut out[i * g.cout * p..(i + 1) * g.cout * p];
        for (o, b) in bias.data().iter().enumerate() {
            y[o * p..(o + 1) * p].fill(*b);
        }
        im2col(x.item(i), &g, &mut col);
        gemm(g.cout, k, p, weight.data(), (k, 1), &col, (p, 1), T::one(), y, (p, 1));
    }
    Tensor::new(&[g.n, g.cout, g.ho, g.wo], out)
}

/// Returns (dx, dweight, dbias).
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
    dy: &[T],
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let g = conv_geom(x, weight, bias, stride, pad)?;
    let (k, p) = (g.k(), g.p());
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); weight.len()];
    let mut db = vec![T::zero(); g.cout];
    let mut col = vec![T::zero(); k * p];
    let mut dcol = vec![T::zero(); k * p];
    let per_in = g.cin * g.h * g.w;
    for i in 0..g.n {
        let dyi = &dy[i * g.cout * p..(i + 1) * g.cout * p];
        for (o, d) in db.iter_mut().enumerate() {
            *d = *d + dyi[o * p..(o + 1) * p].iter().copied().sum::<T>();
        }
        im2col(x.item(i), &g, &mut col);
        // dW += dY · colᵀ
        gemm(g.cout, p, k, dyi, (p, 1), &col, (1, p), T::one(), &mut dw, (k, 1));
        // dcol = Wᵀ · dY
        gemm(k, g.cout, p, weight.data(), (1, k), dyi, (p, 1), T::zero(), &mut dcol, (p, 1));
        col2im_add(&dcol, &g, &mut dx[i * per_in..(i + 1) * per_in]);
    }
    Ok((dx, dw, db))
}

/// Forward-only convolution.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    params: &ConvParams<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    conv2d_forward(x, &params.weight, &params.bias, stride, pad)
}

// ---------------------------------------------------------------------------
// 2×2 stride-2 transposed convolution

pub(crate) fn check_upsample<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize, usize, usize, usize)> {
    let (n, cin, h, w) = x.dims4()?;
    let (wcin, cout, kh, kw) = weight.dims4()?;
    if (kh, kw) != (2, 2) {
        bail!(
            Invalid,
            "only 2x2 stride-2 transposed convolutions are supported, got {}x{}",
            kh,
            kw
        );
    }
    if wcin != cin {
        bail!(Shape, "upsample expects {} input channels, got {}", wcin, cin);
    }
    if bias.len() != cout {
        bail!(Shape, "upsample bias length {} != {}", bias.len(), cout);
    }
    Ok((n, cin, h, w, cout))
}

pub(crate) fn upsample2_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, cin, h, w, cout) = check_upsample(x, weight, bias)?;
    let hw = h * w;
    let m = cout * 4;
    let mut z = vec![T::zero(); m * hw];
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * cout * ho * wo];
    for i in 0..n {
        // Z = Wmatᵀ · X, Wmat is cin × (cout·4)
        gemm(m, cin, hw, weight.data(), (1, m), x.item(i), (hw, 1), T::zero(), &mut z, (hw, 1));
        let y = &mut out[i * cout * ho * wo..(i + 1) * cout * ho * wo];
        for o in 0..cout {
            let b = bias.data()[o];
            for a in 0..2 {
                for c in 0..2 {
                    let zr = &z[(o * 4 + a * 2 + c) * hw..(o * 4 + a * 2 + c + 1) * hw];
                    for yy in 0..h {
                        let row = &mut y[o * ho * wo + (2 * yy + a) * wo..];
                        for xx in 0..w {
                            row[2 * xx + c] = zr[yy * w + xx] + b;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, cout, ho, wo], out)
}

pub(crate) fn upsample2_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    dy: &[T],
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let (n, cin, h, w, cout) = check_upsample(x, weight, bias)?;
    let hw = h * w;
    let m = cout * 4;
    let (ho, wo) = (2 * h, 2 * w);
    let mut dz = vec![T::zero(); m * hw];
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); weight.len()];
    let mut db = vec![T::zero(); cout];
    for i in 0..n {
        let dyi = &dy[i * cout * ho * wo..(i + 1) * cout * ho * wo];
        for o in 0..cout {
            db[o] = db[o] + dyi[o * ho * wo..(o + 1) * ho * wo].iter().copied().sum::<T>();
            for a in 0..2 {
                for c in 0..2 {
                    let zr = &mut dz[(o * 4 + a * 2 + c) * hw..(o * 4 + a * 2 + c + 1) * hw];
                    for yy in 0..h {
                        let row = &dyi[o * ho * wo + (2 * yy + a) * wo..];
                        for xx in 0..w {
                            zr[yy * w + xx] = row[2 * xx + c];
                        }
                    }
                }
            }
        }
        // dX = Wmat · dZ
        gemm(
            cin,
            m,
            hw,
            weight.data(),
            (m, 1),
            &dz,
            (hw, 1),
            T::zero(),
            &mut dx[i * cin * hw..(i + 1) * cin * hw],
            (hw, 1),
        );
        // dWmat += X · dZᵀ
        gemm(cin, hw, m, x.item(i), (hw, 1), &dz, (1, hw), T::one(), &mut dw, (m, 1));
    }
    Ok((dx, dw, db))
}

/// Forward-only learned 2× upsampling.
pub fn upsample2<T: Scalar>(x: &Tensor<T>, params: &ConvParams<T>) -> Result<Tensor<T>> {
    upsample2_forward(x, &params.weight, &params.bias)
}

// ---------------------------------------------------------------------------
// max pooling

/// 2×2 stride-2 max pool. Returns the output and, per output element, the
/// flat input index that won (first maximum in row-major window order).
pub(crate) fn maxpool2_forward<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        bail!(Shape, "maxpool2 needs even spatial dims, got {}x{}", h, w);
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    let xd = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best_i = base + 2 * oy * w + 2 * ox;
                let mut best = xd[best_i];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if xd[idx] > best {
                        best = xd[idx];
                        best_i = idx;
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    Ok((Tensor::new(&[n, c, ho, wo], out)?, arg))
}

pub fn maxpool2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    maxpool2_forward(x).map(|(t, _)| t)
}

// ---------------------------------------------------------------------------
// batch normalization

pub(crate) struct BnForward<T> {
    pub out: Tensor<T>,
    pub xhat: Vec<T>,
    pub istd: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

fn bn_check<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    if n == 0 {
        bail!(Invalid, "batchnorm on an empty batch");
    }
    if gamma.len() != c || beta.len() != c {
        bail!(
            Shape,
            "batchnorm has {} channels, input has {}",
            gamma.len(),
            c
        );
    }
    Ok((n, c, h * w))
}

/// Normalizes with batch statistics (biased variance).
pub(crate) fn batchnorm_train_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<BnForward<T>> {
    let (n, c, hw) = bn_check(x, gamma, beta)?;
    let m = (n * hw) as f64;
    let xd = x.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    let mut istd = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = 0.0f64;
        for i in 0..n {
            let off = (i * c + ch) * hw;
            s += xd[off..off + hw].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let mu = s / m;
        let mut ss = 0.0f64;
        for i in 0..n {
            let off = (i * c + ch) * hw;
            ss += xd[off..off + hw]
                .iter()
                .map(|v| (v.as_f64() - mu).powi(2))
                .sum::<f64>();
        }
        let v = ss / m;
        mean[ch] = T::cast_from(mu);
        var[ch] = T::cast_from(v);
        istd[ch] = T::cast_from(1.0 / (v + eps).sqrt());
    }
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * hw;
            let (mu, is, g, b) = (mean[ch], istd[ch], gamma.data()[ch], beta.data()[ch]);
            for j in off..off + hw {
                let xh = (xd[j] - mu) * is;
                xhat[j] = xh;
                out[j] = g * xh + b;
            }
        }
    }
    Ok(BnForward {
        out: Tensor::new(x.shape(), out)?,
        xhat,
        istd,
        mean,
        var,
    })
}

pub(crate) fn batchnorm_eval_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &[T],
    running_var: &[T],
    eps: f64,
) -> Result<BnForward<T>> {
    let (n, c, hw) = bn_check(x, gamma, beta)?;
    if running_mean.len() != c || running_var.len() != c {
        bail!(Shape, "batchnorm running stats have wrong length");
    }
    let istd: Vec<T> = running_var
        .iter()
        .map(|v| T::cast_from(1.0 / (v.as_f64() + eps).sqrt()))
        .collect();
    let xd = x.data();
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * hw;
            let (mu, is, g, b) = (running_mean[ch], istd[ch], gamma.data()[ch], beta.data()[ch]);
            for j in off..off + hw {
                let xh = (xd[j] - mu) * is;
                xhat[j] = xh;
                out[j] = g * xh + b;
            }
        }
    }
    Ok(BnForward {
        out: Tensor::new(x.shape(), out)?,
        xhat,
        istd,
        mean: running_mean.to_vec(),
        var: running_var.to_vec(),
    })
}

/// Returns (dx, dgamma, dbeta).
pub(crate) fn batchnorm_backward<T: Scalar>(
    shape: (usize, usize, usize),
    gamma: &[T],
    xhat: &[T],
    istd: &[T],
    train: bool,
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (n, c, hw) = shape;
    let m = (n * hw) as f64;
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let mut sdy = 0.0f64;
        let mut sdyx = 0.0f64;
        for i in 0..n {
            let off = (i * c + ch) * hw;
            for j in off..off + hw {
                sdy += dy[j].as_f64();
                sdyx += (dy[j] * xhat[j]).as_f64();
            }
        }
        dbeta[ch] = T::cast_from(sdy);
        dgamma[ch] = T::cast_from(sdyx);
        let scale = gamma[ch] * istd[ch];
        let (mdy, mdyx) = (T::cast_from(sdy / m), T::cast_from(sdyx / m));
        for i in 0..n {
            let off = (i * c + ch) * hw;
            for j in off..off + hw {
                dx[j] = if train {
                    scale * (dy[j] - mdy - xhat[j] * mdyx)
                } else {
                    scale * dy[j]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Forward-only batch normalization. In train mode the running statistics
/// of `params` are updated.
pub fn batchnorm<T: Scalar>(x: &Tensor<T>, params: &mut BatchNormParams<T>, mode: Mode) -> Result<Tensor<T>> {
    match mode {
        Mode::Train => {
            let f = batchnorm_train_forward(x, &params.gamma, &params.beta, params.eps)?;
            params.update_running(&f.mean, &f.var);
            Ok(f.out)
        }
        Mode::Eval => Ok(batchnorm_eval_forward(
            x,
            &params.gamma,
            &params.beta,
            params.running_mean.data(),
            params.running_var.data(),
            params.eps,
        )?
        .out),
    }
}

// ---------------------------------------------------------------------------
// elementwise and structural

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
    Tensor::new(x.shape(), data).expect("same shape")
}

pub(crate) fn relu_backward<T: Scalar>(x: &[T], dy: &[T]) -> Vec<T> {
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| if v > T::zero() { d } else { T::zero() })
        .collect()
}

pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, ca, h, w) = a.dims4()?;
    let (nb, cb, hb, wb) = b.dims4()?;
    if (n, h, w) != (nb, hb, wb) {
        bail!(
            Shape,
            "concat needs equal batch and spatial dims, got {:?} and {:?}",
            a.shape(),
            b.shape()
        );
    }
    let mut out = Vec::with_capacity(a.len() + b.len());
    for i in 0..n {
        out.extend_from_slice(a.item(i));
        out.extend_from_slice(b.item(i));
    }
    Tensor::new(&[n, ca + cb, h, w], out)
}

pub(crate) fn concat_backward<T: Scalar>(
    a_shape: &[usize],
    b_shape: &[usize],
    dy: &[T],
) -> (Vec<T>, Vec<T>) {
    let n = a_shape[0];
    let pa: usize = a_shape[1..].iter().product();
    let pb: usize = b_shape[1..].iter().product();
    let mut da = Vec::with_capacity(n * pa);
    let mut db = Vec::with_capacity(n * pb);
    for i in 0..n {
        let off = i * (pa + pb);
        da.extend_from_slice(&dy[off..off + pa]);
        db.extend_from_slice(&dy[off + pa..off + pa + pb]);
    }
    (da, db)
}
