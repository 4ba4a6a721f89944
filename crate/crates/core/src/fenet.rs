//! Feature enhancement network: a two-scale U-Net of RepConv blocks that
//! predicts a residual for degraded features, gated by the upsampled drift map.
//!
//! ```text
//! s  = stem([degraded; fdm])            1×1, Cf+1 → width
//! e1 = enc1(s)                          H
//! e2 = enc2(down(e1))                   H/2
//! m  = bottleneck(down(e2))             H/4
//! d2 = dec2(up(m) + e2)                 H/2
//! d1 = dec1(up(d2) + e1)                H
//! out = degraded + fdm ⊙ head(d1)       1×1, width → Cf
//! ```

use alloc::vec::Vec;
use rand::Rng;

use crate::conv::{conv2d, conv2d_backward, ConvKernel};
use crate::error::{invalid, shape_mismatch, Result};
use crate::params::{join, ParamMut, ParamRef, Parameterized};
use crate::repconv::{fuse_block, RepConvBlock, RepConvCache};
use crate::tensor::{
    concat_channels, downsample2, downsample2_backward, gate_channels, gate_channels_backward_gate, relu, relu_backward,
    split_channels, upsample_nearest, upsample_nearest_backward, Tensor,
};

pub const FE_WIDTH: usize = 32;

/// A U-Net stage in either training (multi-branch) or deploy (fused) form.
#[derive(Clone, Debug, PartialEq)]
pub enum Stage {
    Train(RepConvBlock),
    Deploy(ConvKernel),
}

#[derive(Clone, Debug)]
pub enum StageCache {
    Train(RepConvCache),
    Deploy { input: Tensor, pre: Tensor },
}

impl Stage {
    pub fn forward_train(&self, x: &Tensor) -> Result<(Tensor, StageCache)> {
        match self {
            Stage::Train(b) => {
                let (y, c) = b.forward_train(x)?;
                Ok((y, StageCache::Train(c)))
            }
            Stage::Deploy(k) => {
                let pre = conv2d(x, k)?;
                Ok((relu(&pre), StageCache::Deploy { input: x.clone(), pre }))
            }
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Stage::Train(b) => b.forward(x),
            Stage::Deploy(k) => Ok(relu(&conv2d(x, k)?)),
        }
    }

    pub fn backward(&self, cache: &StageCache, grad: &Tensor) -> Result<(Tensor, Stage)> {
        match (self, cache) {
            (Stage::Train(b), StageCache::Train(c)) => {
                let (gi, gb) = b.backward(c, grad)?;
                Ok((gi, Stage::Train(gb)))
            }
            (Stage::Deploy(k), StageCache::Deploy { input, pre }) => {
                let g = relu_backward(pre, grad)?;
                let gk = conv2d_backward(input, k, &g)?;
                Ok((gk.input, Stage::Deploy(gk.kernel)))
            }
            _ => Err(invalid("stage cache does not match stage kind")),
        }
    }

    pub fn to_deploy(&self) -> Result<Stage> {
        Ok(match self {
            Stage::Train(b) => Stage::Deploy(fuse_block(b)?),
            Stage::Deploy(k) => Stage::Deploy(k.clone()),
        })
    }

    pub fn is_deploy(&self) -> bool {
        matches!(self, Stage::Deploy(_))
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        match self {
            Stage::Train(b) => b.flops(h, w),
            Stage::Deploy(k) => k.flops(h, w),
        }
    }
}

impl Parameterized for Stage {
    fn params(&self, prefix: &str) -> Vec<ParamRef<'_>> {
        match self {
            Stage::Train(b) => b.params(prefix),
            Stage::Deploy(k) => k.params(&join(prefix, "fused")),
        }
    }

    fn params_mut(&mut self, prefix: &str) -> Vec<ParamMut<'_>> {
        match self {
            Stage::Train(b) => b.params_mut(prefix),
            Stage::Deploy(k) => k.params_mut(&join(prefix, "fused")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeNet {
    pub stem: ConvKernel,
    pub enc1: Stage,
    pub enc2: Stage,
    pub bottleneck: Stage,
    pub dec2: Stage,
    pub dec1: Stage,
    pub head: ConvKernel,
}

pub struct FeCache {
    stem_in: Tensor,
    degraded: Tensor,
    fdm_up: Tensor,
    residual: Tensor,
    d1: Tensor,
    enc1: StageCache,
    enc2: StageCache,
    bottleneck: StageCache,
    dec2: StageCache,
    dec1: StageCache,
}

/// Gradients from [`FeNet::backward`].
pub struct FeGrads {
    pub params: FeNet,
    pub fdm_up: Tensor,
}

impl FeNet {
    /// Training-mode network for `feature_channels` input channels, with a
    /// zero head so that it starts as an exact identity.
    pub fn new<R: Rng + ?Sized>(feature_channels: usize, width: usize, rng: &mut R) -> Self {
        let block = |rng: &mut R| Stage::Train(RepConvBlock::random(width, width, width, rng));
        Self {
            stem: ConvKernel::random(width, feature_channels + 1, 1, 1, 0, rng),
            enc1: block(rng),
            enc2: block(rng),
            bottleneck: block(rng),
            dec2: block(rng),
            dec1: block(rng),
            head: ConvKernel::zeros(feature_channels, width, 1, 1, 0),
        }
    }

    pub fn feature_channels(&self) -> usize {
        self.head.out_channels()
    }

    pub fn width(&self) -> usize {
        self.stem.out_channels()
    }

    pub fn is_deploy(&self) -> bool {
        self.stages().iter().all(|s| s.is_deploy())
    }

    pub fn stages(&self) -> [&Stage; 5] {
        [&self.enc1, &self.enc2, &self.bottleneck, &self.dec2, &self.dec1]
    }

    fn check_inputs(&self, degraded: &Tensor, fdm_up: &Tensor) -> Result<()> {
        let [b, c, h, w] = degraded.dims();
        if c != self.feature_channels() || fdm_up.dims() != [b, 1, h, w] {
            return Err(shape_mismatch(degraded.dims(), fdm_up.dims()));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(invalid(alloc::format!("feature dims {h}x{w} must be divisible by 4")));
        }
        Ok(())
    }

    /// The ungated residual `head(U-Net(stem([degraded; fdm_up])))`.
    pub fn residual(&self, degraded: &Tensor, fdm_up: &Tensor) -> Result<Tensor> {
        Ok(self.forward_train(degraded, fdm_up)?.1.residual)
    }

    pub fn forward(&self, degraded: &Tensor, fdm_up: &Tensor) -> Result<Tensor> {
        Ok(self.forward_train(degraded, fdm_up)?.0)
    }

    pub fn forward_train(&self, degraded: &Tensor, fdm_up: &Tensor) -> Result<(Tensor, FeCache)> {
        self.check_inputs(degraded, fdm_up)?;
        let stem_in = concat_channels(degraded, fdm_up)?;
        let s = conv2d(&stem_in, &self.stem)?;
        let (e1, c_e1) = self.enc1.forward_train(&s)?;
        let (e2, c_e2) = self.enc2.forward_train(&downsample2(&e1)?)?;
        let (m, c_m) = self.bottleneck.forward_train(&downsample2(&e2)?)?;
        let (d2, c_d2) = self.dec2.forward_train(&upsample_nearest(&m, 2)?.add(&e2)?)?;
        let (d1, c_d1) = self.dec1.forward_train(&upsample_nearest(&d2, 2)?.add(&e1)?)?;
        let residual = conv2d(&d1, &self.head)?;
        let out = degraded.add(&gate_channels(&residual, fdm_up)?)?;
        Ok((
            out,
            FeCache {
                stem_in,
                degraded: degraded.clone(),
                fdm_up: fdm_up.clone(),
                residual,
                d1,
                enc1: c_e1,
                enc2: c_e2,
                bottleneck: c_m,
                dec2: c_d2,
                dec1: c_d1,
            },
        ))
    }

    /// Parameter gradients and the gradient reaching `fdm_up` through both the
    /// gate and the stem.
    pub fn backward(&self, cache: &FeCache, grad_out: &Tensor) -> Result<FeGrads> {
        let g_gate = gate_channels_backward_gate(&cache.residual, grad_out)?;
        let g_res = gate_channels(grad_out, &cache.fdm_up)?;
        let g_head = conv2d_backward(&cache.d1, &self.head, &g_res)?;

        let (g_dec1_in, gp_dec1) = self.dec1.backward(&cache.dec1, &g_head.input)?;
        let mut g_e1 = g_dec1_in.clone();
        let g_d2 = upsample_nearest_backward(&g_dec1_in, 2)?;

        let (g_dec2_in, gp_dec2) = self.dec2.backward(&cache.dec2, &g_d2)?;
        let mut g_e2 = g_dec2_in.clone();
        let g_m = upsample_nearest_backward(&g_dec2_in, 2)?;

        let (g_bot_in, gp_bot) = self.bottleneck.backward(&cache.bottleneck, &g_m)?;
        g_e2.add_assign(&downsample2_backward(&g_bot_in))?;

        let (g_enc2_in, gp_enc2) = self.enc2.backward(&cache.enc2, &g_e2)?;
        g_e1.add_assign(&downsample2_backward(&g_enc2_in))?;

        let (g_s, gp_enc1) = self.enc1.backward(&cache.enc1, &g_e1)?;
        let g_stem = conv2d_backward(&cache.stem_in, &self.stem, &g_s)?;
        let (_, g_fdm_stem) = split_channels(&g_stem.input, cache.degraded.channels())?;

        let mut fdm_up = g_gate;
        fdm_up.add_assign(&g_fdm_stem)?;
        Ok(FeGrads {
            params: FeNet {
                stem: g_stem.kernel,
                enc1: gp_enc1,
                enc2: gp_enc2,
                bottleneck: gp_bot,
                dec2: gp_dec2,
                dec1: gp_dec1,
                head: g_head.kernel,
            },
            fdm_up,
        })
    }

    /// Analytic FLOPs for one `h × w` feature map, gate and additions included.
    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let width = self.width() as u64;
        let cf = self.feature_channels() as u64;
        let px = (h * w) as u64;
        self.stem.flops(h, w)
            + self.enc1.flops(h, w)
            + self.enc2.flops(h / 2, w / 2)
            + self.bottleneck.flops(h / 4, w / 4)
            + self.dec2.flops(h / 2, w / 2)
            + self.dec1.flops(h, w)
            + self.head.flops(h, w)
            + width * (px + px / 4)
            + 2 * cf * px
    }
}

/// Every stage fused into its single 3×3 kernel. Already-fused stages are
/// kept as they are.
pub fn fe_to_deploy(net: &FeNet) -> Result<FeNet> {
    Ok(FeNet {
        stem: net.stem.clone(),
        enc1: net.enc1.to_deploy()?,
        enc2: net.enc2.to_deploy()?,
        bottleneck: net.bottleneck.to_deploy()?,
        dec2: net.dec2.to_deploy()?,
        dec1: net.dec1.to_deploy()?,
        head: net.head.clone(),
    })
}

impl Parameterized for FeNet {
    fn params(&self, prefix: &str) -> Vec<ParamRef<'_>> {
        let mut v = self.stem.params(&join(prefix, "stem"));
        v.extend(self.enc1.params(&join(prefix, "enc1")));
        v.extend(self.enc2.params(&join(prefix, "enc2")));
        v.extend(self.bottleneck.params(&join(prefix, "bottleneck")));
        v.extend(self.dec2.params(&join(prefix, "dec2")));
        v.extend(self.dec1.params(&join(prefix, "dec1")));
        v.extend(self.head.params(&join(prefix, "head")));
        v
    }

    fn params_mut(&mut self, prefix: &str) -> Vec<ParamMut<'_>> {
        let mut v = self.stem.params_mut(&join(prefix, "stem"));
        v.extend(self.enc1.params_mut(&join(prefix, "enc1")));
        v.extend(self.enc2.params_mut(&join(prefix, "enc2")));
        v.extend(self.bottleneck.params_mut(&join(prefix, "bottleneck")));
        v.extend(self.dec2.params_mut(&join(prefix, "dec2")));
        v.extend(self.dec1.params_mut(&join(prefix, "dec1")));
        v.extend(self.head.params_mut(&join(prefix, "head")));
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn inputs(rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
        let x = Tensor::uniform([2, 4, 8, 8], 1.0, rng);
        let g = Tensor::uniform([2, 1, 8, 8], 0.5, rng).map(|v| v + 0.5);
        (x, g)
    }

    #[test]
    fn zero_head_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = FeNet::new(4, 8, &mut rng);
        let (x, g) = inputs(&mut rng);
        assert_eq!(net.forward(&x, &g).unwrap(), x);
    }

    #[test]
    fn closed_gate_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = FeNet::new(4, 8, &mut rng);
        net.head = ConvKernel::random(4, 8, 1, 1, 0, &mut rng);
        let (x, _) = inputs(&mut rng);
        assert_eq!(net.forward(&x, &Tensor::zeros([2, 1, 8, 8])).unwrap(), x);
    }

    #[test]
    fn open_gate_adds_ungated_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = FeNet::new(4, 8, &mut rng);
        net.head = ConvKernel::random(4, 8, 1, 1, 0, &mut rng);
        let (x, _) = inputs(&mut rng);
        let ones = Tensor::filled([2, 1, 8, 8], 1.0);
        let r = net.residual(&x, &ones).unwrap();
        let y = net.forward(&x, &ones).unwrap();
        assert!(y.max_abs_diff(&x.add(&r).unwrap()) < 1e-6);
    }

    #[test]
    fn rejects_bad_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = FeNet::new(4, 8, &mut rng);
        assert!(net.forward(&Tensor::zeros([1, 4, 6, 6]), &Tensor::zeros([1, 1, 6, 6])).is_err());
        assert!(net.forward(&Tensor::zeros([1, 3, 8, 8]), &Tensor::zeros([1, 1, 8, 8])).is_err());
        assert!(net.forward(&Tensor::zeros([1, 4, 8, 8]), &Tensor::zeros([1, 1, 4, 4])).is_err());
    }

    #[test]
    fn deploy_is_idempotent_and_smaller() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = FeNet::new(4, 8, &mut rng);
        let once = fe_to_deploy(&net).unwrap();
        assert_eq!(fe_to_deploy(&once).unwrap(), once);
        assert!(once.is_deploy() && !net.is_deploy());
        assert!(once.param_count() < net.param_count());
        assert!(once.flops(16, 16) < net.flops(16, 16));
    }
}
