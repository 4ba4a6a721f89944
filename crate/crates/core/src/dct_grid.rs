//! Blockwise DCT gathered per block and rearranged so that each channel holds
//! one frequency of one colour plane across all blocks.
//!
//! Channel `plane * 64 + u * 8 + v` at grid position `(by, bx)` is coefficient
//! `(u, v)` of block `(by, bx)` in that plane (Y, Cb, Cr after a −128 level
//! shift). A 224×224 image yields a 28×28×192 grid.

use alloc::vec;
use alloc::vec::Vec;

use crate::color::rgb_to_ycbcr;
use crate::dct::Dct8;
use crate::error::{shape_mismatch, Result};
use crate::image::ImageRgb;
use crate::jpeg::{read_block, write_block};
use crate::tensor::Tensor;

pub const DCT_CHANNELS: usize = 192;

#[derive(Clone, Debug, PartialEq)]
pub struct DctBlockGrid {
    blocks_h: usize,
    blocks_w: usize,
    /// Channel-major: `(channel, by, bx)`.
    data: Vec<f32>,
}

#[inline]
pub fn channel_of(plane: usize, u: usize, v: usize) -> usize {
    plane * 64 + u * 8 + v
}

/// Inverse of [`channel_of`]: `(plane, u, v)`.
#[inline]
pub fn coefficient_of(channel: usize) -> (usize, usize, usize) {
    (channel / 64, (channel % 64) / 8, channel % 8)
}

impl DctBlockGrid {
    pub fn new(blocks_h: usize, blocks_w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != DCT_CHANNELS * blocks_h * blocks_w {
            return Err(shape_mismatch((DCT_CHANNELS, blocks_h, blocks_w), data.len()));
        }
        Ok(Self { blocks_h, blocks_w, data })
    }

    pub fn blocks_h(&self) -> usize {
        self.blocks_h
    }

    pub fn blocks_w(&self) -> usize {
        self.blocks_w
    }

    pub fn channels(&self) -> usize {
        DCT_CHANNELS
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, channel: usize, by: usize, bx: usize) -> f32 {
        self.data[(channel * self.blocks_h + by) * self.blocks_w + bx]
    }

    /// The 192 coefficients of one block, in channel order.
    pub fn block_vector(&self, by: usize, bx: usize) -> Vec<f32> {
        (0..DCT_CHANNELS).map(|c| self.get(c, by, bx)).collect()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec([1, DCT_CHANNELS, self.blocks_h, self.blocks_w], self.data.clone())
            .expect("grid length matches dims")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [b, c, h, w] = t.dims();
        if b != 1 || c != DCT_CHANNELS {
            return Err(shape_mismatch(t.dims(), [1, DCT_CHANNELS, h, w]));
        }
        Self::new(h, w, t.data().to_vec())
    }

    /// Undoes the rearrangement and the DCT: level-shifted Y, Cb, Cr planes
    /// of size `(8 · blocks_h) × (8 · blocks_w)`.
    pub fn to_planes(&self) -> [Vec<f64>; 3] {
        let (w, h) = (self.blocks_w * 8, self.blocks_h * 8);
        let dct = Dct8::new();
        let mut planes = [vec![0f64; w * h], vec![0f64; w * h], vec![0f64; w * h]];
        for (p, plane) in planes.iter_mut().enumerate() {
            for by in 0..self.blocks_h {
                for bx in 0..self.blocks_w {
                    let mut coef = [0f64; 64];
                    for (k, c) in coef.iter_mut().enumerate() {
                        *c = self.get(p * 64 + k, by, bx) as f64;
                    }
                    write_block(plane, w, bx, by, &dct.inverse(&coef), 0.0);
                }
            }
        }
        planes
    }
}

/// YCbCr conversion, level shift, per-block DCT, then frequency-major
/// rearrangement. Images whose sides are not multiples of 8 are
/// edge-replicated first.
pub fn gather_rearrange_dct(img: &ImageRgb) -> DctBlockGrid {
    let padded = img.pad_to_multiple(8);
    let ycc = rgb_to_ycbcr(&padded);
    let (bw, bh) = (ycc.width / 8, ycc.height / 8);
    let dct = Dct8::new();
    let mut data = vec![0f32; DCT_CHANNELS * bh * bw];
    for (p, plane) in ycc.planes.iter().enumerate() {
        for by in 0..bh {
            for bx in 0..bw {
                let coef = dct.forward(&read_block(plane, ycc.width, bx, by, -128.0));
                for (k, &c) in coef.iter().enumerate() {
                    data[((p * 64 + k) * bh + by) * bw + bx] = c as f32;
                }
            }
        }
    }
    DctBlockGrid {
        blocks_h: bh,
        blocks_w: bw,
        data,
    }
}
