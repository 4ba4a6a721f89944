//! Three-branch RepConv block and the structural re-parameterisation that
//! collapses it into a single 3×3 convolution.
//!
//! Branches, all mapping `C` to `E` channels through a `D`-wide middle:
//!
//! 1. 1×1 (`C→D`) then 3×3 (`D→E`)
//! 2. 3×3 (`C→D`) then 1×1 (`D→E`)
//! 3. 1×1 (`C→E`)
//!
//! The outputs are summed and passed through ReLU.
//!
//! Branch 1 applies its 1×1 with padding 1 and its 3×3 with padding 0. The
//! ring around the middle feature map then carries the 1×1 bias instead of
//! zeros, which is exactly what the fused kernel computes at the borders.

use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;

use crate::conv::{conv2d, conv2d_backward, ConvKernel};
use crate::error::{invalid, shape_mismatch, Result};
use crate::params::{join, ParamMut, ParamRef, Parameterized};
use crate::tensor::{relu, relu_backward, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct RepConvBlock {
    pub b1_pointwise: ConvKernel,
    pub b1_spatial: ConvKernel,
    pub b2_spatial: ConvKernel,
    pub b2_pointwise: ConvKernel,
    pub b3_pointwise: ConvKernel,
}

/// Activations kept from the forward pass for [`RepConvBlock::backward`].
#[derive(Clone, Debug)]
pub struct RepConvCache {
    input: Tensor,
    b1_mid: Tensor,
    b2_mid: Tensor,
    pre_activation: Tensor,
}

impl RepConvBlock {
    pub fn random<R: Rng + ?Sized>(c: usize, d: usize, e: usize, rng: &mut R) -> Self {
        Self {
            b1_pointwise: ConvKernel::random(d, c, 1, 1, 1, rng),
            b1_spatial: ConvKernel::random(e, d, 3, 1, 0, rng),
            b2_spatial: ConvKernel::random(d, c, 3, 1, 1, rng),
            b2_pointwise: ConvKernel::random(e, d, 1, 1, 0, rng),
            b3_pointwise: ConvKernel::random(e, c, 1, 1, 0, rng),
        }
    }

    pub fn zeros(c: usize, d: usize, e: usize) -> Self {
        Self {
            b1_pointwise: ConvKernel::zeros(d, c, 1, 1, 1),
            b1_spatial: ConvKernel::zeros(e, d, 3, 1, 0),
            b2_spatial: ConvKernel::zeros(d, c, 3, 1, 1),
            b2_pointwise: ConvKernel::zeros(e, d, 1, 1, 0),
            b3_pointwise: ConvKernel::zeros(e, c, 1, 1, 0),
        }
    }

    /// Checks the channel plan and kernel geometry.
    pub fn validate(&self) -> Result<()> {
        let c = self.in_channels();
        let e = self.out_channels();
        let d = self.b1_pointwise.out_channels();
        let expect = [
            (&self.b1_pointwise, d, c, 1, 1),
            (&self.b1_spatial, e, d, 3, 0),
            (&self.b2_spatial, self.b2_spatial.out_channels(), c, 3, 1),
            (&self.b2_pointwise, e, self.b2_spatial.out_channels(), 1, 0),
            (&self.b3_pointwise, e, c, 1, 0),
        ];
        for (k, o, i, size, pad) in expect {
            if k.out_channels() != o || k.in_channels() != i || k.kernel_size() != (size, size) || k.padding() != pad || k.stride() != 1 {
                return Err(shape_mismatch(
                    (k.weights().dims(), k.padding(), k.stride()),
                    ([o, i, size, size], pad, 1),
                ));
            }
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        self.b3_pointwise.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.b3_pointwise.out_channels()
    }

    /// Sum of the three branches, before the activation.
    pub fn pre_activation(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_train(x)?.1.pre_activation)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_train(x)?.0)
    }

    pub fn forward_train(&self, x: &Tensor) -> Result<(Tensor, RepConvCache)> {
        if x.channels() != self.in_channels() {
            return Err(shape_mismatch(x.dims(), self.b3_pointwise.weights().dims()));
        }
        let b1_mid = conv2d(x, &self.b1_pointwise)?;
        let mut sum = conv2d(&b1_mid, &self.b1_spatial)?;
        let b2_mid = conv2d(x, &self.b2_spatial)?;
        sum.add_assign(&conv2d(&b2_mid, &self.b2_pointwise)?)?;
        sum.add_assign(&conv2d(x, &self.b3_pointwise)?)?;
        let out = relu(&sum);
        Ok((
            out,
            RepConvCache {
                input: x.clone(),
                b1_mid,
                b2_mid,
                pre_activation: sum,
            },
        ))
    }

    /// Returns the input gradient and the block-shaped parameter gradient.
    pub fn backward(&self, cache: &RepConvCache, grad_out: &Tensor) -> Result<(Tensor, RepConvBlock)> {
        let g = relu_backward(&cache.pre_activation, grad_out)?;
        let g1b = conv2d_backward(&cache.b1_mid, &self.b1_spatial, &g)?;
        let g1a = conv2d_backward(&cache.input, &self.b1_pointwise, &g1b.input)?;
        let g2b = conv2d_backward(&cache.b2_mid, &self.b2_pointwise, &g)?;
        let g2a = conv2d_backward(&cache.input, &self.b2_spatial, &g2b.input)?;
        let g3 = conv2d_backward(&cache.input, &self.b3_pointwise, &g)?;
        let mut gin = g1a.input;
        gin.add_assign(&g2a.input)?;
        gin.add_assign(&g3.input)?;
        Ok((
            gin,
            RepConvBlock {
                b1_pointwise: g1a.kernel,
                b1_spatial: g1b.kernel,
                b2_spatial: g2a.kernel,
                b2_pointwise: g2b.kernel,
                b3_pointwise: g3.kernel,
            },
        ))
    }

    /// Analytic FLOPs of the multi-branch forward on an `h × w` input,
    /// including the two branch additions.
    pub fn flops(&self, h: usize, w: usize) -> u64 {
        self.b1_pointwise.flops(h + 2, w + 2)
            + self.b1_spatial.flops(h, w)
            + self.b2_spatial.flops(h, w)
            + self.b2_pointwise.flops(h, w)
            + self.b3_pointwise.flops(h, w)
            + 2 * (self.out_channels() * h * w) as u64
    }
}

impl Parameterized for RepConvBlock {
    fn params(&self, prefix: &str) -> Vec<ParamRef<'_>> {
        let mut v = self.b1_pointwise.params(&join(prefix, "b1.pointwise"));
        v.extend(self.b1_spatial.params(&join(prefix, "b1.spatial")));
        v.extend(self.b2_spatial.params(&join(prefix, "b2.spatial")));
        v.extend(self.b2_pointwise.params(&join(prefix, "b2.pointwise")));
        v.extend(self.b3_pointwise.params(&join(prefix, "b3.pointwise")));
        v
    }

    fn params_mut(&mut self, prefix: &str) -> Vec<ParamMut<'_>> {
        let mut v = self.b1_pointwise.params_mut(&join(prefix, "b1.pointwise"));
        v.extend(self.b1_spatial.params_mut(&join(prefix, "b1.spatial")));
        v.extend(self.b2_spatial.params_mut(&join(prefix, "b2.spatial")));
        v.extend(self.b2_pointwise.params_mut(&join(prefix, "b2.pointwise")));
        v.extend(self.b3_pointwise.params_mut(&join(prefix, "b3.pointwise")));
        v
    }
}

fn require_kernel(k: &ConvKernel, size: usize, what: &str) -> Result<()> {
    if k.kernel_size() != (size, size) || k.stride() != 1 {
        return Err(invalid(alloc::format!(
            "{what} must be a stride-1 {size}x{size} kernel, got {:?} stride {}",
            k.weights().dims(),
            k.stride()
        )));
    }
    Ok(())
}

/// Collapses `k3 ∘ k1` (1×1 first) into one 3×3 kernel with padding 1:
/// `W'[e,c] = Σd k3[e,d] · k1[d,c]`, `b'[e] = b3[e] + Σd Σhw k3[e,d,h,w] · b1[d]`.
pub fn fuse_seq_1x1_then_3x3(k1: &ConvKernel, k3: &ConvKernel) -> Result<ConvKernel> {
    require_kernel(k1, 1, "first kernel")?;
    require_kernel(k3, 3, "second kernel")?;
    if k1.out_channels() != k3.in_channels() {
        return Err(shape_mismatch(k1.weights().dims(), k3.weights().dims()));
    }
    let (c, d, e) = (k1.in_channels(), k1.out_channels(), k3.out_channels());
    let mut w = Tensor::zeros([e, c, 3, 3]);
    let mut bias = vec![0f32; e];
    for eo in 0..e {
        let mut b = k3.bias()[eo] as f64;
        for di in 0..d {
            let beta = k1.bias()[di] as f64;
            for t in 0..9 {
                b += k3.weights().at(eo, di, t / 3, t % 3) as f64 * beta;
            }
        }
        bias[eo] = b as f32;
        for ci in 0..c {
            for t in 0..9 {
                let mut s = 0f64;
                for di in 0..d {
                    s += k3.weights().at(eo, di, t / 3, t % 3) as f64 * k1.weights().at(di, ci, 0, 0) as f64;
                }
                w.set(eo, ci, t / 3, t % 3, s as f32);
            }
        }
    }
    ConvKernel::new(w, bias, 1, 1)
}

/// Collapses `k1 ∘ k3` (3×3 first) into one 3×3 kernel with the padding of `k3`:
/// `W'[e,c] = Σd k1[e,d] · k3[d,c]`, `b'[e] = b1[e] + Σd k1[e,d] · b3[d]`.
pub fn fuse_seq_3x3_then_1x1(k3: &ConvKernel, k1: &ConvKernel) -> Result<ConvKernel> {
    require_kernel(k3, 3, "first kernel")?;
    require_kernel(k1, 1, "second kernel")?;
    if k3.out_channels() != k1.in_channels() {
        return Err(shape_mismatch(k3.weights().dims(), k1.weights().dims()));
    }
    let (c, d, e) = (k3.in_channels(), k3.out_channels(), k1.out_channels());
    let mut w = Tensor::zeros([e, c, 3, 3]);
    let mut bias = vec![0f32; e];
    for eo in 0..e {
        let mut b = k1.bias()[eo] as f64;
        for di in 0..d {
            b += k1.weights().at(eo, di, 0, 0) as f64 * k3.bias()[di] as f64;
        }
        bias[eo] = b as f32;
        for ci in 0..c {
            for t in 0..9 {
                let mut s = 0f64;
                for di in 0..d {
                    s += k1.weights().at(eo, di, 0, 0) as f64 * k3.weights().at(di, ci, t / 3, t % 3) as f64;
                }
                w.set(eo, ci, t / 3, t % 3, s as f32);
            }
        }
    }
    ConvKernel::new(w, bias, 1, k3.padding())
}

/// Embeds a 1×1 kernel at the centre tap of a zero 3×3 kernel (padding 1).
pub fn pad_1x1_to_3x3(k1: &ConvKernel) -> Result<ConvKernel> {
    require_kernel(k1, 1, "kernel")?;
    let (e, c) = (k1.out_channels(), k1.in_channels());
    let mut w = Tensor::zeros([e, c, 3, 3]);
    for eo in 0..e {
        for ci in 0..c {
            w.set(eo, ci, 1, 1, k1.weights().at(eo, ci, 0, 0));
        }
    }
    ConvKernel::new(w, k1.bias().to_vec(), 1, k1.padding() + 1)
}

/// Sums kernels of identical shape and geometry: `W_all = Σ W_i`, `b_all = Σ b_i`.
pub fn fuse_parallel(kernels: &[ConvKernel]) -> Result<ConvKernel> {
    let first = kernels.first().ok_or_else(|| invalid("fuse_parallel needs at least one kernel"))?;
    for k in &kernels[1..] {
        if k.weights().dims() != first.weights().dims() || k.stride() != first.stride() || k.padding() != first.padding() {
            return Err(shape_mismatch(
                (first.weights().dims(), first.stride(), first.padding()),
                (k.weights().dims(), k.stride(), k.padding()),
            ));
        }
    }
    if kernels.len() == 1 {
        return Ok(first.clone());
    }
    let n = first.weights().len();
    let mut w = vec![0f64; n];
    let mut b = vec![0f64; first.out_channels()];
    for k in kernels {
        for (a, &v) in w.iter_mut().zip(k.weights().data()) {
            *a += v as f64;
        }
        for (a, &v) in b.iter_mut().zip(k.bias()) {
            *a += v as f64;
        }
    }
    ConvKernel::new(
        Tensor::from_vec(first.weights().dims(), w.into_iter().map(|v| v as f32).collect())?,
        b.into_iter().map(|v| v as f32).collect(),
        first.stride(),
        first.padding(),
    )
}

/// The single 3×3 kernel whose ReLU'd output equals [`RepConvBlock::forward`].
pub fn fuse_block(block: &RepConvBlock) -> Result<ConvKernel> {
    block.validate()?;
    let k1 = fuse_seq_1x1_then_3x3(&block.b1_pointwise, &block.b1_spatial)?;
    let k2 = fuse_seq_3x3_then_1x1(&block.b2_spatial, &block.b2_pointwise)?;
    let k3 = pad_1x1_to_3x3(&block.b3_pointwise)?;
    fuse_parallel(&[k1, k2, k3])
}

/// Forward of a fused block: `relu(conv(x, kernel))`.
pub fn fused_forward(kernel: &ConvKernel, x: &Tensor) -> Result<Tensor> {
    Ok(relu(&conv2d(x, kernel)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_block_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform([1, 3, 5, 5], 1.0, &mut rng);
        let y = RepConvBlock::zeros(3, 4, 2).forward(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_third_branch_is_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::uniform([2, 3, 4, 6], 1.0, &mut rng);
        let mut b = RepConvBlock::zeros(3, 5, 3);
        b.b3_pointwise = ConvKernel::identity(3);
        assert_eq!(b.forward(&x).unwrap(), relu(&x));
        let fused = fuse_block(&b).unwrap();
        for eo in 0..3 {
            for ci in 0..3 {
                for t in 0..9 {
                    let want = if eo == ci && t == 4 { 1.0 } else { 0.0 };
                    assert_eq!(fused.weights().at(eo, ci, t / 3, t % 3), want);
                }
            }
        }
    }

    #[test]
    fn fused_param_count_independent_of_middle_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for d in [1, 4, 17] {
            let f = fuse_block(&RepConvBlock::random(6, d, 5, &mut rng)).unwrap();
            assert_eq!(f.param_count(), 5 * 6 * 9 + 5);
        }
    }

    #[test]
    fn channel_mismatch_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = RepConvBlock::random(3, 4, 2, &mut rng);
        assert!(b.forward(&Tensor::zeros([1, 2, 4, 4])).is_err());
        let k1 = ConvKernel::random(4, 3, 1, 1, 0, &mut rng);
        let k3 = ConvKernel::random(2, 5, 3, 1, 1, &mut rng);
        assert!(fuse_seq_1x1_then_3x3(&k1, &k3).is_err());
        assert!(fuse_seq_3x3_then_1x1(&k3, &k1).is_err());
        assert!(fuse_parallel(&[k1.clone(), k3]).is_err());
        assert!(fuse_parallel(&[]).is_err());
    }

    #[test]
    fn parallel_with_negation_cancels() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = ConvKernel::random(3, 2, 3, 1, 1, &mut rng);
        let neg = ConvKernel::new(k.weights().scale(-1.0), k.bias().iter().map(|b| -b).collect(), 1, 1).unwrap();
        let z = fuse_parallel(&[k.clone(), neg]).unwrap();
        assert!(z.weights().data().iter().all(|&v| v == 0.0));
        assert!(z.bias().iter().all(|&v| v == 0.0));
        assert_eq!(fuse_parallel(core::slice::from_ref(&k)).unwrap(), k);
    }
}
