//! Feature drifting estimation: three 1×1 stages over the rearranged DCT grid
//! (192 → 64 → 16 → 1, ReLU, ReLU, sigmoid), producing one drift estimate per
//! 8×8 image block.
//!
//! Every stage is 1×1, so the estimate for a block depends on that block's
//! 192 coefficients only.

use alloc::vec::Vec;
use rand::Rng;

use crate::conv::{conv2d, conv2d_backward, conv2d_backward_params, ConvKernel};
use crate::dct_grid::{DctBlockGrid, DCT_CHANNELS};
use crate::error::{invalid, shape_mismatch, Result};
use crate::params::{join, ParamMut, ParamRef, Parameterized};
use crate::tensor::{relu, relu_backward, sigmoid_backward, upsample_nearest, Tensor};

pub const FDE_WIDTHS: [usize; 4] = [DCT_CHANNELS, 64, 16, 1];

/// Fixed input scaling applied to raw DCT coefficients. Level-shifted DC
/// terms reach ±1024; this brings them to ±8.
pub const DCT_INPUT_SCALE: f32 = 1.0 / 128.0;

// Largest f32 below 1 and its mirror, so the map never touches 0 or 1.
const FDM_LO: f32 = 5.960_464_5e-8;
const FDM_HI: f32 = 1.0 - 5.960_464_5e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct FdeNet {
    pub stages: [ConvKernel; 3],
}

#[derive(Clone, Debug)]
pub struct FdeCache {
    input: Tensor,
    pre1: Tensor,
    act1: Tensor,
    pre2: Tensor,
    act2: Tensor,
    out: Tensor,
}

impl FdeNet {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let w = FDE_WIDTHS;
        Self {
            stages: [
                ConvKernel::random(w[1], w[0], 1, 1, 0, rng),
                ConvKernel::random(w[2], w[1], 1, 1, 0, rng),
                ConvKernel::random(w[3], w[2], 1, 1, 0, rng),
            ],
        }
    }

    pub fn zeros() -> Self {
        let w = FDE_WIDTHS;
        Self {
            stages: [
                ConvKernel::zeros(w[1], w[0], 1, 1, 0),
                ConvKernel::zeros(w[2], w[1], 1, 1, 0),
                ConvKernel::zeros(w[3], w[2], 1, 1, 0),
            ],
        }
    }

    /// `(B, 192, bh, bw)` raw coefficients to `(B, 1, bh, bw)` drift estimates.
    pub fn forward(&self, grid: &Tensor) -> Result<Tensor> {
        Ok(self.forward_train(grid)?.0)
    }

    pub fn forward_train(&self, grid: &Tensor) -> Result<(Tensor, FdeCache)> {
        if grid.channels() != DCT_CHANNELS {
            return Err(shape_mismatch(grid.dims(), [grid.batch(), DCT_CHANNELS, grid.height(), grid.width()]));
        }
        let input = grid.scale(DCT_INPUT_SCALE);
        let pre1 = conv2d(&input, &self.stages[0])?;
        let act1 = relu(&pre1);
        let pre2 = conv2d(&act1, &self.stages[1])?;
        let act2 = relu(&pre2);
        let logits = conv2d(&act2, &self.stages[2])?;
        let out = logits.map(|v| (1.0 / (1.0 + libm::expf(-v))).clamp(FDM_LO, FDM_HI));
        Ok((
            out.clone(),
            FdeCache {
                input,
                pre1,
                act1,
                pre2,
                act2,
                out,
            },
        ))
    }

    /// Analytic FLOPs on a `blocks_h × blocks_w` grid, activations excluded.
    pub fn flops(&self, blocks_h: usize, blocks_w: usize) -> u64 {
        self.stages.iter().map(|k| k.flops(blocks_h, blocks_w)).sum()
    }

    /// Parameter gradients given the gradient of the drift map.
    pub fn backward(&self, cache: &FdeCache, grad_out: &Tensor) -> Result<FdeNet> {
        let g3 = sigmoid_backward(&cache.out, grad_out)?;
        let k3 = conv2d_backward(&cache.act2, &self.stages[2], &g3)?;
        let g2 = relu_backward(&cache.pre2, &k3.input)?;
        let k2 = conv2d_backward(&cache.act1, &self.stages[1], &g2)?;
        let g1 = relu_backward(&cache.pre1, &k2.input)?;
        let k1 = conv2d_backward_params(&cache.input, &self.stages[0], &g1)?;
        Ok(FdeNet {
            stages: [k1.kernel, k2.kernel, k3.kernel],
        })
    }
}

impl Parameterized for FdeNet {
    fn params(&self, prefix: &str) -> Vec<ParamRef<'_>> {
        self.stages
            .iter()
            .enumerate()
            .flat_map(|(i, k)| k.params(&join(prefix, &alloc::format!("stage{i}"))))
            .collect()
    }

    fn params_mut(&mut self, prefix: &str) -> Vec<ParamMut<'_>> {
        self.stages
            .iter_mut()
            .enumerate()
            .flat_map(|(i, k)| k.params_mut(&join(prefix, &alloc::format!("stage{i}"))))
            .collect()
    }
}

/// One value in `(0, 1)` per 8×8 block.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureDriftingMap {
    blocks_h: usize,
    blocks_w: usize,
    values: Vec<f32>,
}

impl FeatureDriftingMap {
    pub fn blocks_h(&self) -> usize {
        self.blocks_h
    }

    pub fn blocks_w(&self) -> usize {
        self.blocks_w
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, by: usize, bx: usize) -> f32 {
        self.values[by * self.blocks_w + bx]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec([1, 1, self.blocks_h, self.blocks_w], self.values.clone()).expect("map length matches dims")
    }
}

pub fn fde_forward(net: &FdeNet, grid: &DctBlockGrid) -> Result<FeatureDriftingMap> {
    let out = net.forward(&grid.to_tensor())?;
    Ok(FeatureDriftingMap {
        blocks_h: grid.blocks_h(),
        blocks_w: grid.blocks_w(),
        values: out.into_data(),
    })
}

/// Integer replication factor mapping a block grid onto a feature map.
pub fn block_fill_factor(blocks_h: usize, blocks_w: usize, feature_h: usize, feature_w: usize) -> Result<usize> {
    if blocks_h == 0 || blocks_w == 0 || feature_h % blocks_h != 0 || feature_w % blocks_w != 0 || feature_h / blocks_h != feature_w / blocks_w {
        return Err(invalid(alloc::format!(
            "feature map {feature_h}x{feature_w} is not an integer multiple of block grid {blocks_h}x{blocks_w}"
        )));
    }
    Ok(feature_h / blocks_h)
}

/// Fills each block's feature-map region with that block's estimate.
pub fn upsample_fdm(fdm: &FeatureDriftingMap, feature_h: usize, feature_w: usize) -> Result<Tensor> {
    let factor = block_fill_factor(fdm.blocks_h, fdm.blocks_w, feature_h, feature_w)?;
    upsample_nearest(&fdm.to_tensor(), factor)
}
