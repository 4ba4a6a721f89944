//! 2-D cross-correlation with bias, its exact backward pass, and analytic
//! cost counters.

use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;

use crate::error::{invalid, shape_mismatch, Result};
use crate::params::{join, ParamMut, ParamRef, Parameterized};
use crate::tensor::{Dims, Tensor};

/// Convolution weights in `(out, in, kh, kw)` layout with per-output bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel {
    weights: Tensor,
    bias: Vec<f32>,
    stride: usize,
    padding: usize,
}

impl ConvKernel {
    pub fn new(weights: Tensor, bias: Vec<f32>, stride: usize, padding: usize) -> Result<Self> {
        let [out, _, kh, kw] = weights.dims();
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(invalid(alloc::format!("kernel size {kh}x{kw} must be odd")));
        }
        if bias.len() != out {
            return Err(shape_mismatch(weights.dims(), bias.len()));
        }
        if stride == 0 {
            return Err(invalid("stride must be positive"));
        }
        Ok(Self {
            weights,
            bias,
            stride,
            padding,
        })
    }

    pub fn zeros(out: usize, inp: usize, k: usize, stride: usize, padding: usize) -> Self {
        Self {
            weights: Tensor::zeros([out, inp, k, k]),
            bias: vec![0.0; out],
            stride,
            padding,
        }
    }

    /// Uniform fan-in scaled initialisation, bound `1 / sqrt(in * k * k)`.
    pub fn random<R: Rng + ?Sized>(out: usize, inp: usize, k: usize, stride: usize, padding: usize, rng: &mut R) -> Self {
        let bound = 1.0 / libm::sqrtf((inp * k * k) as f32);
        let weights = Tensor::uniform([out, inp, k, k], bound, rng);
        let bias = Tensor::uniform([1, 1, 1, out], bound, rng).into_data();
        Self {
            weights,
            bias,
            stride,
            padding,
        }
    }

    /// A `1×1` kernel with unit diagonal.
    pub fn identity(channels: usize) -> Self {
        let mut k = Self::zeros(channels, channels, 1, 1, 0);
        for c in 0..channels {
            k.weights.set(c, c, 0, 0, 1.0);
        }
        k
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Tensor {
        &mut self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f32] {
        &mut self.bias
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn out_channels(&self) -> usize {
        self.weights.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.dims()[1]
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        let d = self.weights.dims();
        (d[2], d[3])
    }

    /// Same weights, different geometry.
    pub fn with_geometry(&self, stride: usize, padding: usize) -> Self {
        Self {
            weights: self.weights.clone(),
            bias: self.bias.clone(),
            stride: stride.max(1),
            padding,
        }
    }

    pub fn output_dims(&self, input: Dims) -> Result<Dims> {
        let [b, c, h, w] = input;
        let (kh, kw) = self.kernel_size();
        if c != self.in_channels() {
            return Err(shape_mismatch(input, self.weights.dims()));
        }
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < kh || pw < kw {
            return Err(shape_mismatch(input, self.weights.dims()));
        }
        Ok([b, self.out_channels(), (ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1])
    }

    /// Multiply-accumulate count times two, bias excluded.
    pub fn flops(&self, out_h: usize, out_w: usize) -> u64 {
        let (kh, kw) = self.kernel_size();
        2 * (self.out_channels() * self.in_channels() * kh * kw * out_h * out_w) as u64
    }
}

impl Parameterized for ConvKernel {
    fn params(&self, prefix: &str) -> Vec<ParamRef<'_>> {
        vec![
            ParamRef {
                name: join(prefix, "weight"),
                dims: self.weights.dims().to_vec(),
                data: self.weights.data(),
            },
            ParamRef {
                name: join(prefix, "bias"),
                dims: vec![self.bias.len()],
                data: &self.bias,
            },
        ]
    }

    fn params_mut(&mut self, prefix: &str) -> Vec<ParamMut<'_>> {
        let wdims = self.weights.dims().to_vec();
        let blen = self.bias.len();
        vec![
            ParamMut {
                name: join(prefix, "weight"),
                dims: wdims,
                data: self.weights.data_mut(),
            },
            ParamMut {
                name: join(prefix, "bias"),
                dims: vec![blen],
                data: &mut self.bias,
            },
        ]
    }
}

/// Range of output columns `ox` whose source column `ox * stride + k - pad`
/// lies inside `[0, len)`.
#[inline]
fn valid_range(out_len: usize, len: usize, k: usize, pad: usize, stride: usize) -> (usize, usize) {
    // ox * s + k >= pad  and  ox * s + k < len + pad
    let lo = if pad > k { (pad - k + stride - 1) / stride } else { 0 };
    let hi = if len + pad > k { ((len + pad - k - 1) / stride + 1).min(out_len) } else { 0 };
    (lo, hi.max(lo))
}


/// Zero-padded `f64` copies of every channel plane of batch entry `b`, each
/// `(h + 2p) × (w + 2p)`, concatenated.
fn padded_planes(x: &Tensor, b: usize, pad: usize) -> (Vec<f64>, usize, usize) {
    let [_, c, h, w] = x.dims();
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut buf = vec![0f64; c * hp * wp];
    for ci in 0..c {
        let src = x.plane(b, ci);
        let dst = &mut buf[ci * hp * wp..(ci + 1) * hp * wp];
        for y in 0..h {
            let row = &mut dst[(y + pad) * wp + pad..(y + pad) * wp + pad + w];
            for (d, &v) in row.iter_mut().zip(&src[y * w..(y + 1) * w]) {
                *d = v as f64;
            }
        }
    }
    (buf, hp, wp)
}

/// Stride-1 forward on padded planes. Output rows are computed at the padded
/// width `wp` so each tap is one contiguous multiply-add over the plane; the
/// trailing `wp - wo` columns of each row are discarded.
fn conv2d_stride1(input: &Tensor, kernel: &ConvKernel, out: &mut Tensor) {
    let [b, c, _, _] = input.dims();
    let [_, o, ho, wo] = out.dims();
    let (kh, kw) = kernel.kernel_size();
    let mut acc = Vec::new();
    for bi in 0..b {
        let (pad, hp, wp) = padded_planes(input, bi, kernel.padding);
        let span = (ho - 1) * wp + wo;
        acc.resize(ho * wp, 0.0);
        for oc in 0..o {
            acc.fill(kernel.bias[oc] as f64);
            for ic in 0..c {
                let plane = &pad[ic * hp * wp..(ic + 1) * hp * wp];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = kernel.weights.at(oc, ic, ky, kx) as f64;
                        if wv == 0.0 {
                            continue;
                        }
                        let off = ky * wp + kx;
                        for (d, &v) in acc[..span].iter_mut().zip(&plane[off..off + span]) {
                            *d += wv * v;
                        }
                    }
                }
            }
            let dst = out.plane_mut(bi, oc);
            for oy in 0..ho {
                for ox in 0..wo {
                    dst[oy * wo + ox] = acc[oy * wp + ox] as f32;
                }
            }
        }
    }
}

/// Cross-correlation of `input` with `kernel`, plus bias.
pub fn conv2d(input: &Tensor, kernel: &ConvKernel) -> Result<Tensor> {
    let out_dims = kernel.output_dims(input.dims())?;
    let [b, c, h, w] = input.dims();
    let [_, o, ho, wo] = out_dims;
    let (kh, kw) = kernel.kernel_size();
    let (s, p) = (kernel.stride, kernel.padding);
    let mut out = Tensor::zeros(out_dims);
    if s == 1 {
        conv2d_stride1(input, kernel, &mut out);
        return Ok(out);
    }
    let mut acc = vec![0f64; ho * wo];
    for bi in 0..b {
        for oc in 0..o {
            acc.fill(kernel.bias[oc] as f64);
            for ic in 0..c {
                let plane = input.plane(bi, ic);
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_range(ho, h, ky, p, s);
                    for kx in 0..kw {
                        let wv = kernel.weights.at(oc, ic, ky, kx) as f64;
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = valid_range(wo, w, kx, p, s);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * s + ky - p;
                            let row = &plane[iy * w..(iy + 1) * w];
                            let dst = &mut acc[oy * wo..(oy + 1) * wo];
                            if s == 1 {
                                let src = &row[ox_lo + kx - p..ox_hi + kx - p];
                                for (d, &v) in dst[ox_lo..ox_hi].iter_mut().zip(src) {
                                    *d += wv * v as f64;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    dst[ox] += wv * row[ox * s + kx - p] as f64;
                                }
                            }
                        }
                    }
                }
            }
            for (d, &a) in out.plane_mut(bi, oc).iter_mut().zip(&acc) {
                *d = a as f32;
            }
        }
    }
    Ok(out)
}


/// `grad_out` of batch entry `b` re-laid at row width `wp`, zeros in the
/// discarded columns, as `f64`.
fn widened_grad(grad_out: &Tensor, b: usize, wp: usize) -> Vec<f64> {
    let [_, o, ho, wo] = grad_out.dims();
    let mut buf = vec![0f64; o * ho * wp];
    for oc in 0..o {
        let src = grad_out.plane(b, oc);
        for oy in 0..ho {
            let dst = &mut buf[(oc * ho + oy) * wp..(oc * ho + oy) * wp + wo];
            for (d, &v) in dst.iter_mut().zip(&src[oy * wo..(oy + 1) * wo]) {
                *d = v as f64;
            }
        }
    }
    buf
}

#[inline]
fn dot_f64(a: &[f64], b: &[f64]) -> f64 {
    let mut s = [0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..4 {
            s[l] += x[l] * y[l];
        }
    }
    let mut tail = 0f64;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    (s[0] + s[1]) + (s[2] + s[3]) + tail
}

fn backward_params_stride1(input: &Tensor, kernel: &ConvKernel, grad_out: &Tensor, gw: &mut [f64]) {
    let [b, c, _, _] = input.dims();
    let [_, o, ho, wo] = grad_out.dims();
    let (kh, kw) = kernel.kernel_size();
    for bi in 0..b {
        let (pad, hp, wp) = padded_planes(input, bi, kernel.padding);
        let g = widened_grad(grad_out, bi, wp);
        let span = (ho - 1) * wp + wo;
        for oc in 0..o {
            let gp = &g[oc * ho * wp..oc * ho * wp + span];
            for ic in 0..c {
                let plane = &pad[ic * hp * wp..(ic + 1) * hp * wp];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let off = ky * wp + kx;
                        gw[((oc * c + ic) * kh + ky) * kw + kx] += dot_f64(gp, &plane[off..off + span]);
                    }
                }
            }
        }
    }
}

fn backward_input_stride1(kernel: &ConvKernel, grad_out: &Tensor, gin: &mut Tensor) {
    let [b, c, h, w] = gin.dims();
    let [_, o, ho, wo] = grad_out.dims();
    let (kh, kw) = kernel.kernel_size();
    let p = kernel.padding;
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let span = (ho - 1) * wp + wo;
    let mut acc = vec![0f64; hp * wp];
    for bi in 0..b {
        let g = widened_grad(grad_out, bi, wp);
        for ic in 0..c {
            acc.fill(0.0);
            for oc in 0..o {
                let gp = &g[oc * ho * wp..oc * ho * wp + span];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = kernel.weights.at(oc, ic, ky, kx) as f64;
                        if wv == 0.0 {
                            continue;
                        }
                        let off = ky * wp + kx;
                        for (d, &gv) in acc[off..off + span].iter_mut().zip(gp) {
                            *d += wv * gv;
                        }
                    }
                }
            }
            let dst = gin.plane_mut(bi, ic);
            for y in 0..h {
                for x in 0..w {
                    dst[y * w + x] = acc[(y + p) * wp + x + p] as f32;
                }
            }
        }
    }
}

/// Gradients of `⟨grad_out, conv2d(input, kernel)⟩`.
#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Tensor,
    /// Weight and bias gradients, packaged with the kernel's geometry.
    pub kernel: ConvKernel,
}

#[inline]
fn dot4(a: &[f32], b: &[f32]) -> f64 {
    let mut s = [0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..4 {
            s[l] += x[l] as f64 * y[l] as f64;
        }
    }
    let mut tail = 0f64;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += *x as f64 * *y as f64;
    }
    (s[0] + s[1]) + (s[2] + s[3]) + tail
}

pub fn conv2d_backward(input: &Tensor, kernel: &ConvKernel, grad_out: &Tensor) -> Result<ConvGrads> {
    let mut grads = conv2d_backward_params(input, kernel, grad_out)?;
    grads.input = conv2d_backward_input(input.dims(), kernel, grad_out)?;
    Ok(grads)
}

/// Weight and bias gradients only; the returned `input` field is empty.
pub fn conv2d_backward_params(input: &Tensor, kernel: &ConvKernel, grad_out: &Tensor) -> Result<ConvGrads> {
    let out_dims = kernel.output_dims(input.dims())?;
    if grad_out.dims() != out_dims {
        return Err(shape_mismatch(out_dims, grad_out.dims()));
    }
    let [b, c, _, _] = input.dims();
    let [_, o, _, _] = out_dims;
    let (kh, kw) = kernel.kernel_size();
    let (s, p) = (kernel.stride, kernel.padding);

    let mut gw = vec![0f64; o * c * kh * kw];
    let mut gb = vec![0f64; o];
    for bi in 0..b {
        for oc in 0..o {
            gb[oc] += grad_out.plane(bi, oc).iter().map(|&v| v as f64).sum::<f64>();
        }
    }
    if s == 1 {
        backward_params_stride1(input, kernel, grad_out, &mut gw);
    } else {
        strided_backward_params(input, kernel, grad_out, &mut gw);
    }
    let weights = Tensor::from_vec(kernel.weights.dims(), gw.into_iter().map(|v| v as f32).collect())?;
    Ok(ConvGrads {
        input: Tensor::zeros([0, 0, 0, 0]),
        kernel: ConvKernel {
            weights,
            bias: gb.into_iter().map(|v| v as f32).collect(),
            stride: s,
            padding: p,
        },
    })
}

fn strided_backward_params(input: &Tensor, kernel: &ConvKernel, grad_out: &Tensor, gw: &mut [f64]) {
    let [b, c, h, w] = input.dims();
    let [_, o, ho, wo] = grad_out.dims();
    let (kh, kw) = kernel.kernel_size();
    let (s, p) = (kernel.stride, kernel.padding);
    for bi in 0..b {
        for oc in 0..o {
            let g = grad_out.plane(bi, oc);
            for ic in 0..c {
                let plane = input.plane(bi, ic);
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_range(ho, h, ky, p, s);
                    for kx in 0..kw {
                        let (ox_lo, ox_hi) = valid_range(wo, w, kx, p, s);
                        let mut sum = 0f64;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * s + ky - p;
                            let grow = &g[oy * wo + ox_lo..oy * wo + ox_hi];
                            if s == 1 {
                                let src = &plane[iy * w + ox_lo + kx - p..iy * w + ox_hi + kx - p];
                                sum += dot4(grow, src);
                            } else {
                                for (j, &gv) in grow.iter().enumerate() {
                                    let ix = (ox_lo + j) * s + kx - p;
                                    sum += gv as f64 * plane[iy * w + ix] as f64;
                                }
                            }
                        }
                        gw[((oc * c + ic) * kh + ky) * kw + kx] += sum;
                    }
                }
            }
        }
    }
}

/// Gradient with respect to the input only.
pub fn conv2d_backward_input(input_dims: Dims, kernel: &ConvKernel, grad_out: &Tensor) -> Result<Tensor> {
    let out_dims = kernel.output_dims(input_dims)?;
    if grad_out.dims() != out_dims {
        return Err(shape_mismatch(out_dims, grad_out.dims()));
    }
    let [b, c, h, w] = input_dims;
    let [_, o, ho, wo] = out_dims;
    let (kh, kw) = kernel.kernel_size();
    let (s, p) = (kernel.stride, kernel.padding);
    let mut gin = Tensor::zeros(input_dims);
    if s == 1 {
        backward_input_stride1(kernel, grad_out, &mut gin);
        return Ok(gin);
    }
    let mut acc = vec![0f64; h * w];
    for bi in 0..b {
        for ic in 0..c {
            acc.fill(0.0);
            for oc in 0..o {
                let g = grad_out.plane(bi, oc);
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_range(ho, h, ky, p, s);
                    for kx in 0..kw {
                        let wv = kernel.weights.at(oc, ic, ky, kx) as f64;
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = valid_range(wo, w, kx, p, s);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * s + ky - p;
                            let grow = &g[oy * wo..(oy + 1) * wo];
                            let dst = &mut acc[iy * w..(iy + 1) * w];
                            if s == 1 {
                                let d = &mut dst[ox_lo + kx - p..ox_hi + kx - p];
                                for (dv, &gv) in d.iter_mut().zip(&grow[ox_lo..ox_hi]) {
                                    *dv += wv * gv as f64;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    dst[ox * s + kx - p] += wv * grow[ox] as f64;
                                }
                            }
                        }
                    }
                }
            }
            for (d, &a) in gin.plane_mut(bi, ic).iter_mut().zip(&acc) {
                *d = a as f32;
            }
        }
    }
    Ok(gin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct summation over every output site.
    fn loop_oracle(input: &Tensor, k: &ConvKernel) -> Tensor {
        let [b, c, h, w] = input.dims();
        let (kh, kw) = k.kernel_size();
        let (s, p) = (k.stride() as isize, k.padding() as isize);
        let ho = (h as isize + 2 * p - kh as isize) / s + 1;
        let wo = (w as isize + 2 * p - kw as isize) / s + 1;
        let o = k.out_channels();
        let mut out = Tensor::zeros([b, o, ho as usize, wo as usize]);
        for bi in 0..b {
            for oc in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut sum = k.bias()[oc] as f64;
                        for ic in 0..c {
                            for ky in 0..kh as isize {
                                for kx in 0..kw as isize {
                                    let iy = oy * s + ky - p;
                                    let ix = ox * s + kx - p;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        sum += k.weights().at(oc, ic, ky as usize, kx as usize) as f64
                                            * input.at(bi, ic, iy as usize, ix as usize) as f64;
                                    }
                                }
                            }
                        }
                        out.set(bi, oc, oy as usize, ox as usize, sum as f32);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_and_bias_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::uniform([2, 1, 5, 4], 3.0, &mut rng);
        assert_eq!(conv2d(&x, &ConvKernel::identity(1)).unwrap(), x);

        let mut k = ConvKernel::zeros(3, 1, 3, 1, 1);
        k.bias_mut().copy_from_slice(&[0.5, -2.0, 7.0]);
        let y = conv2d(&x, &k).unwrap();
        for oc in 0..3 {
            assert!(y.plane(0, oc).iter().all(|&v| v == k.bias()[oc]));
        }
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::uniform([1, 3, 5, 5], 1.0, &mut rng);
        let k = ConvKernel::random(2, 3, 3, 1, 1, &mut rng);
        assert!(conv2d(&x, &k).unwrap().max_abs_diff(&loop_oracle(&x, &k)) < 1e-6);
        for (stride, pad) in [(2, 1), (2, 0), (1, 0), (3, 2)] {
            let x = Tensor::uniform([2, 2, 7, 6], 1.0, &mut rng);
            let k = ConvKernel::random(3, 2, 3, stride, pad, &mut rng);
            assert!(conv2d(&x, &k).unwrap().max_abs_diff(&loop_oracle(&x, &k)) < 1e-6);
        }
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let k = ConvKernel::zeros(2, 3, 3, 1, 1);
        let err = conv2d(&Tensor::zeros([1, 4, 5, 5]), &k).unwrap_err();
        let msg = alloc::format!("{err}");
        assert!(msg.contains("[1, 4, 5, 5]") && msg.contains("[2, 3, 3, 3]"), "{msg}");
        assert!(conv2d(&Tensor::zeros([1, 3, 1, 1]), &k.with_geometry(1, 0)).is_err());
        assert!(ConvKernel::new(Tensor::zeros([1, 1, 2, 2]), vec![0.0], 1, 0).is_err());
    }

    #[test]
    fn backward_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::uniform([1, 2, 4, 4], 1.0, &mut rng);
        let k = ConvKernel::random(3, 2, 3, 1, 1, &mut rng);
        let g = conv2d_backward(&x, &k, &Tensor::zeros([1, 3, 4, 4])).unwrap();
        assert!(g.input.data().iter().all(|&v| v == 0.0));
        assert!(g.kernel.weights().data().iter().all(|&v| v == 0.0));
        assert!(g.kernel.bias().iter().all(|&v| v == 0.0));

        let gout = Tensor::uniform([1, 2, 4, 4], 1.0, &mut rng);
        let g = conv2d_backward(&x, &ConvKernel::identity(2), &gout).unwrap();
        assert_eq!(g.input, gout);
        assert!(conv2d_backward(&x, &k, &Tensor::zeros([1, 3, 3, 3])).is_err());
    }
}
