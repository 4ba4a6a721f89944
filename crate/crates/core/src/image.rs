//! 8-bit RGB images and the pixel-domain helpers the codec needs.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, shape_mismatch, Result};
use crate::tensor::Tensor;

/// Interleaved 8-bit RGB, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ImageRgb {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl ImageRgb {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(invalid(alloc::format!("image dims must be positive, got {width}x{height}")));
        }
        if data.len() != width * height * 3 {
            return Err(shape_mismatch((width, height, 3), data.len()));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = vec![0u8; width * height * 3];
        for px in data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Edge-replicates to the next multiple of `m` in both dims.
    pub fn pad_to_multiple(&self, m: usize) -> ImageRgb {
        let w = self.width.div_ceil(m) * m;
        let h = self.height.div_ceil(m) * m;
        if w == self.width && h == self.height {
            return self.clone();
        }
        let mut out = ImageRgb::filled(w, h, [0, 0, 0]);
        for y in 0..h {
            for x in 0..w {
                out.set_pixel(x, y, self.pixel(x.min(self.width - 1), y.min(self.height - 1)));
            }
        }
        out
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<ImageRgb> {
        if width == 0 || height == 0 || x0 + width > self.width || y0 + height > self.height {
            return Err(invalid(alloc::format!(
                "crop {width}x{height}+{x0}+{y0} outside {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(width * height * 3);
        for y in y0..y0 + height {
            let start = (y * self.width + x0) * 3;
            data.extend_from_slice(&self.data[start..start + width * 3]);
        }
        Ok(ImageRgb { width, height, data })
    }

    /// `(1, 3, H, W)` tensor with values scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let (w, h) = (self.width, self.height);
        let mut t = Tensor::zeros([1, 3, h, w]);
        for c in 0..3 {
            let plane = t.plane_mut(0, c);
            for (i, v) in plane.iter_mut().enumerate() {
                *v = self.data[i * 3 + c] as f32 / 255.0;
            }
        }
        t
    }

    pub fn mean_abs_diff(&self, other: &ImageRgb) -> Result<f64> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(shape_mismatch((self.width, self.height), (other.width, other.height)));
        }
        let s: u64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a as i32 - b as i32).unsigned_abs() as u64)
            .sum();
        Ok(s as f64 / self.data.len() as f64)
    }

    pub fn max_abs_diff(&self, other: &ImageRgb) -> Result<u8> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(shape_mismatch((self.width, self.height), (other.width, other.height)));
        }
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a.abs_diff(b)).max().unwrap_or(0))
    }

    /// Peak signal-to-noise ratio in dB; `f64::INFINITY` for identical images.
    pub fn psnr(&self, other: &ImageRgb) -> Result<f64> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(shape_mismatch((self.width, self.height), (other.width, other.height)));
        }
        let se: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum();
        if se == 0.0 {
            return Ok(f64::INFINITY);
        }
        let mse = se / self.data.len() as f64;
        Ok(10.0 * libm::log10(255.0 * 255.0 / mse))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pad_replicates_edges_and_crop_restores() {
        let mut img = ImageRgb::filled(5, 3, [1, 2, 3]);
        img.set_pixel(4, 2, [9, 9, 9]);
        let p = img.pad_to_multiple(8);
        assert_eq!((p.width(), p.height()), (8, 8));
        assert_eq!(p.pixel(7, 7), [9, 9, 9]);
        assert_eq!(p.pixel(7, 0), [1, 2, 3]);
        assert_eq!(p.crop(0, 0, 5, 3).unwrap(), img);
        assert!(img.crop(1, 0, 5, 3).is_err());
    }

    #[test]
    fn rejects_bad_buffers() {
        assert!(ImageRgb::new(0, 4, vec![]).is_err());
        assert!(ImageRgb::new(2, 2, vec![0; 11]).is_err());
    }

    #[test]
    fn psnr_identical_is_infinite() {
        let a = ImageRgb::filled(8, 8, [10, 20, 30]);
        assert!(a.psnr(&a).unwrap().is_infinite());
        let b = ImageRgb::filled(8, 8, [11, 20, 30]);
        assert!((a.psnr(&b).unwrap() - 10.0 * libm::log10(255.0 * 255.0 * 3.0)).abs() < 1e-9);
    }
}
