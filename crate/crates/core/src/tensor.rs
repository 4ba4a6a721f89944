//! Dense 4-D `f32` tensors in batch, channel, height, width layout, plus the
//! elementwise, pooling and loss operations the networks are built from.
//!
//! Every operation that sums more than a handful of values accumulates in
//! `f64` and rounds once on the way out.

use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;

use crate::error::{invalid, shape_mismatch, Result};

pub type Dims = [usize; 4];

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Dims,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(dims: Dims) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: Dims, value: f32) -> Self {
        Self {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: Dims, data: Vec<f32>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(shape_mismatch(dims, data.len()));
        }
        Ok(Self { dims, data })
    }

    /// Uniform samples in `[-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(dims: Dims, bound: f32, rng: &mut R) -> Self {
        let n = dims.iter().product();
        let data = (0..n)
            .map(|_| if bound > 0.0 { rng.gen_range(-bound..bound) } else { 0.0 })
            .collect();
        Self { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn height(&self) -> usize {
        self.dims[2]
    }

    pub fn width(&self) -> usize {
        self.dims[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.dims[1] + c) * self.dims[2] + y) * self.dims[3] + x
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(b, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, value: f32) {
        let i = self.index(b, c, y, x);
        self.data[i] = value;
    }

    /// Contiguous `height * width` slice for one (batch, channel) pair.
    pub fn plane(&self, b: usize, c: usize) -> &[f32] {
        let hw = self.dims[2] * self.dims[3];
        let start = (b * self.dims[1] + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [f32] {
        let hw = self.dims[2] * self.dims[3];
        let start = (b * self.dims[1] + c) * hw;
        &mut self.data[start..start + hw]
    }

    pub fn reshape(self, dims: Dims) -> Result<Self> {
        Self::from_vec(dims, self.data)
    }

    /// Copy of batch entry `b` as a batch-of-one tensor.
    pub fn sample(&self, b: usize) -> Tensor {
        let per = self.dims[1] * self.dims[2] * self.dims[3];
        Tensor {
            dims: [1, self.dims[1], self.dims[2], self.dims[3]],
            data: self.data[b * per..(b + 1) * per].to_vec(),
        }
    }

    /// Concatenates tensors along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or_else(|| invalid("cannot stack zero tensors"))?;
        let [_, c, h, w] = first.dims;
        let mut data = Vec::with_capacity(items.iter().map(Tensor::len).sum());
        let mut batch = 0;
        for t in items {
            if t.dims[1..] != first.dims[1..] {
                return Err(shape_mismatch(first.dims, t.dims));
            }
            batch += t.dims[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            dims: [batch, c, h, w],
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.dims != other.dims {
            return Err(shape_mismatch(self.dims, other.dims));
        }
        Ok(Tensor {
            dims: self.dims,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.dims != other.dims {
            return Err(shape_mismatch(self.dims, other.dims));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, factor: f32) -> Tensor {
        self.map(|v| v * factor)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; `f32::INFINITY` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        if self.dims != other.dims {
            return f32::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len().max(1) as f64
    }

    pub fn variance(&self) -> f64 {
        let mean = self.mean();
        self.data
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / self.data.len().max(1) as f64
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Passes `grad` through where `x > 0`.
pub fn relu_backward(x: &Tensor, grad: &Tensor) -> Result<Tensor> {
    x.zip_with(grad, |v, g| if v > 0.0 { g } else { 0.0 })
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(|v| 1.0 / (1.0 + libm::expf(-v)))
}

/// Backward through the sigmoid given its forward output `y`.
pub fn sigmoid_backward(y: &Tensor, grad: &Tensor) -> Result<Tensor> {
    y.zip_with(grad, |s, g| g * s * (1.0 - s))
}

/// Mean squared error over all elements.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<f32> {
    if pred.dims != target.dims {
        return Err(shape_mismatch(pred.dims, target.dims));
    }
    let sum: f64 = pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(&p, &t)| {
            let d = p as f64 - t as f64;
            d * d
        })
        .sum();
    Ok((sum / pred.len().max(1) as f64) as f32)
}

/// Gradient of [`mse_loss`] with respect to `pred`: `2 (pred - target) / count`.
pub fn mse_loss_grad(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let scale = 2.0 / pred.len().max(1) as f32;
    pred.zip_with(target, |p, t| scale * (p - t))
}

/// 2×2 average pooling.
pub fn downsample2(x: &Tensor) -> Result<Tensor> {
    let [b, c, h, w] = x.dims;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(invalid(alloc::format!(
            "downsample2 needs even spatial dims, got {h}x{w}"
        )));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros([b, c, ho, wo]);
    for bi in 0..b {
        for ci in 0..c {
            let src = x.plane(bi, ci);
            let dst = out.plane_mut(bi, ci);
            for y in 0..ho {
                for xx in 0..wo {
                    let i = 2 * y * w + 2 * xx;
                    let s = src[i] as f64 + src[i + 1] as f64 + src[i + w] as f64 + src[i + w + 1] as f64;
                    dst[y * wo + xx] = (s * 0.25) as f32;
                }
            }
        }
    }
    Ok(out)
}

pub fn downsample2_backward(grad: &Tensor) -> Tensor {
    let [b, c, ho, wo] = grad.dims;
    let w = wo * 2;
    let mut out = Tensor::zeros([b, c, ho * 2, w]);
    for bi in 0..b {
        for ci in 0..c {
            let src = grad.plane(bi, ci);
            let dst = out.plane_mut(bi, ci);
            for y in 0..ho {
                for x in 0..wo {
                    let g = src[y * wo + x] * 0.25;
                    let i = 2 * y * w + 2 * x;
                    dst[i] = g;
                    dst[i + 1] = g;
                    dst[i + w] = g;
                    dst[i + w + 1] = g;
                }
            }
        }
    }
    out
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(invalid("upsample factor must be at least 1"));
    }
    if factor == 1 {
        return Ok(x.clone());
    }
    let [b, c, h, w] = x.dims;
    let wo = w * factor;
    let mut out = Tensor::zeros([b, c, h * factor, wo]);
    for bi in 0..b {
        for ci in 0..c {
            let src = x.plane(bi, ci);
            let dst = out.plane_mut(bi, ci);
            for (y, row) in dst.chunks_exact_mut(wo).enumerate() {
                let srow = &src[(y / factor) * w..(y / factor + 1) * w];
                for (x, v) in row.iter_mut().enumerate() {
                    *v = srow[x / factor];
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`upsample_nearest`]: sums each `factor × factor` cell.
pub fn upsample_nearest_backward(grad: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(invalid("upsample factor must be at least 1"));
    }
    let [b, c, h, w] = grad.dims;
    if h % factor != 0 || w % factor != 0 {
        return Err(invalid(alloc::format!(
            "gradient dims {h}x{w} not divisible by factor {factor}"
        )));
    }
    let (ho, wo) = (h / factor, w / factor);
    let mut out = Tensor::zeros([b, c, ho, wo]);
    for bi in 0..b {
        for ci in 0..c {
            let src = grad.plane(bi, ci);
            let mut acc = vec![0f64; ho * wo];
            for y in 0..h {
                for x in 0..w {
                    acc[(y / factor) * wo + x / factor] += src[y * w + x] as f64;
                }
            }
            for (d, a) in out.plane_mut(bi, ci).iter_mut().zip(acc) {
                *d = a as f32;
            }
        }
    }
    Ok(out)
}

/// Spatial mean per channel, `(B, C, H, W) -> (B, C, 1, 1)`.
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let [b, c, h, w] = x.dims;
    let n = (h * w) as f64;
    let mut out = Tensor::zeros([b, c, 1, 1]);
    for bi in 0..b {
        for ci in 0..c {
            let s: f64 = x.plane(bi, ci).iter().map(|&v| v as f64).sum();
            out.data[bi * c + ci] = (s / n) as f32;
        }
    }
    out
}

pub fn global_avg_pool_backward(grad: &Tensor, height: usize, width: usize) -> Tensor {
    let [b, c, _, _] = grad.dims;
    let scale = 1.0 / (height * width) as f32;
    let mut out = Tensor::zeros([b, c, height, width]);
    for bi in 0..b {
        for ci in 0..c {
            let g = grad.data[bi * c + ci] * scale;
            out.plane_mut(bi, ci).fill(g);
        }
    }
    out
}

/// Channel concatenation of two tensors with equal batch and spatial dims.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [ba, ca, h, w] = a.dims;
    let [bb, cb, hb, wb] = b.dims;
    if ba != bb || h != hb || w != wb {
        return Err(shape_mismatch(a.dims, b.dims));
    }
    let mut out = Tensor::zeros([ba, ca + cb, h, w]);
    for bi in 0..ba {
        for ci in 0..ca {
            out.plane_mut(bi, ci).copy_from_slice(a.plane(bi, ci));
        }
        for ci in 0..cb {
            out.plane_mut(bi, ca + ci).copy_from_slice(b.plane(bi, ci));
        }
    }
    Ok(out)
}

/// Splits channels at `at`, inverse of [`concat_channels`].
pub fn split_channels(x: &Tensor, at: usize) -> Result<(Tensor, Tensor)> {
    let [b, c, h, w] = x.dims;
    if at > c {
        return Err(invalid(alloc::format!("split point {at} beyond {c} channels")));
    }
    let mut first = Tensor::zeros([b, at, h, w]);
    let mut second = Tensor::zeros([b, c - at, h, w]);
    for bi in 0..b {
        for ci in 0..c {
            if ci < at {
                first.plane_mut(bi, ci).copy_from_slice(x.plane(bi, ci));
            } else {
                second.plane_mut(bi, ci - at).copy_from_slice(x.plane(bi, ci));
            }
        }
    }
    Ok((first, second))
}

/// Multiplies every channel of `x` by the single-channel `gate`.
pub fn gate_channels(x: &Tensor, gate: &Tensor) -> Result<Tensor> {
    let [b, c, h, w] = x.dims;
    if gate.dims != [b, 1, h, w] {
        return Err(shape_mismatch(x.dims, gate.dims));
    }
    let mut out = x.clone();
    for bi in 0..b {
        let g = gate.plane(bi, 0);
        for ci in 0..c {
            for (v, &gv) in out.plane_mut(bi, ci).iter_mut().zip(g) {
                *v *= gv;
            }
        }
    }
    Ok(out)
}

/// Gradient of the gate in [`gate_channels`]: channel-summed `grad ⊙ x`.
pub fn gate_channels_backward_gate(x: &Tensor, grad: &Tensor) -> Result<Tensor> {
    let [b, c, h, w] = x.dims;
    if grad.dims != x.dims {
        return Err(shape_mismatch(x.dims, grad.dims));
    }
    let mut out = Tensor::zeros([b, 1, h, w]);
    for bi in 0..b {
        let mut acc = vec![0f64; h * w];
        for ci in 0..c {
            for ((a, &xv), &gv) in acc.iter_mut().zip(x.plane(bi, ci)).zip(grad.plane(bi, ci)) {
                *a += xv as f64 * gv as f64;
            }
        }
        for (d, a) in out.plane_mut(bi, 0).iter_mut().zip(acc) {
            *d = a as f32;
        }
    }
    Ok(out)
}

/// Mean softmax cross-entropy over the batch of `(B, K, 1, 1)` logits, and its gradient.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f32, Tensor)> {
    let [b, k, h, w] = logits.dims;
    if h != 1 || w != 1 || labels.len() != b {
        return Err(shape_mismatch(logits.dims, labels.len()));
    }
    let mut grad = Tensor::zeros(logits.dims);
    let mut loss = 0f64;
    for bi in 0..b {
        let row = &logits.data[bi * k..(bi + 1) * k];
        let label = labels[bi];
        if label >= k {
            return Err(invalid(alloc::format!("label {label} out of range for {k} classes")));
        }
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
        let exps: Vec<f64> = row.iter().map(|&v| libm::exp(v as f64 - max)).collect();
        let total: f64 = exps.iter().sum();
        loss += libm::log(total) - (row[label] as f64 - max);
        for (j, e) in exps.iter().enumerate() {
            let p = e / total;
            let t = if j == label { 1.0 } else { 0.0 };
            grad.data[bi * k + j] = ((p - t) / b as f64) as f32;
        }
    }
    Ok(((loss / b as f64) as f32, grad))
}
