//! Full-range BT.601 (JFIF) colour conversion.

use alloc::vec;
use alloc::vec::Vec;

use crate::image::ImageRgb;

/// Three real-valued planes: Y, Cb, Cr.
#[derive(Clone, Debug, PartialEq)]
pub struct YCbCrImage {
    pub width: usize,
    pub height: usize,
    pub planes: [Vec<f64>; 3],
}

pub fn rgb_to_ycbcr(img: &ImageRgb) -> YCbCrImage {
    let n = img.width() * img.height();
    let mut planes = [vec![0f64; n], vec![0f64; n], vec![0f64; n]];
    for (i, px) in img.data().chunks_exact(3).enumerate() {
        let (r, g, b) = (px[0] as f64, px[1] as f64, px[2] as f64);
        planes[0][i] = 0.299 * r + 0.587 * g + 0.114 * b;
        planes[1][i] = 128.0 - 0.168_736 * r - 0.331_264 * g + 0.5 * b;
        planes[2][i] = 128.0 + 0.5 * r - 0.418_688 * g - 0.081_312 * b;
    }
    YCbCrImage {
        width: img.width(),
        height: img.height(),
        planes,
    }
}

#[inline]
fn to_u8(v: f64) -> u8 {
    libm::round(v).clamp(0.0, 255.0) as u8
}

/// Inverse transform, rounded and clamped to 8 bits.
pub fn ycbcr_to_rgb(img: &YCbCrImage) -> ImageRgb {
    let n = img.width * img.height;
    let mut data = Vec::with_capacity(n * 3);
    for i in 0..n {
        let y = img.planes[0][i];
        let cb = img.planes[1][i] - 128.0;
        let cr = img.planes[2][i] - 128.0;
        data.push(to_u8(y + 1.402 * cr));
        data.push(to_u8(y - 0.344_136 * cb - 0.714_136 * cr));
        data.push(to_u8(y + 1.772 * cb));
    }
    ImageRgb::new(img.width, img.height, data).expect("plane sizes match image dims")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn black_and_white() {
        let black = rgb_to_ycbcr(&ImageRgb::filled(1, 1, [0, 0, 0]));
        assert_eq!([black.planes[0][0], black.planes[1][0], black.planes[2][0]], [0.0, 128.0, 128.0]);
        let white = rgb_to_ycbcr(&ImageRgb::filled(1, 1, [255, 255, 255]));
        assert!((white.planes[0][0] - 255.0).abs() < 1e-9);
        assert!((white.planes[1][0] - 128.0).abs() < 1e-9);
        assert!((white.planes[2][0] - 128.0).abs() < 1e-9);
    }

    #[test]
    fn round_trip_within_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data = (0..64 * 64 * 3).map(|_| rng.gen()).collect();
        let img = ImageRgb::new(64, 64, data).unwrap();
        let back = ycbcr_to_rgb(&rgb_to_ycbcr(&img));
        assert!(back.max_abs_diff(&img).unwrap() <= 1);
    }
}
