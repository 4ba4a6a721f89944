//! Baseline JPEG quantisation round trip.
//!
//! Only the lossy part of the codec is modelled: YCbCr 4:4:4, level shift,
//! blockwise DCT, quantise/dequantise, inverse DCT. Entropy coding is
//! lossless and omitted.

use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::color::{rgb_to_ycbcr, ycbcr_to_rgb, YCbCrImage};
use crate::dct::{Block, Dct8};
use crate::error::{invalid, Result};
use crate::image::ImageRgb;

/// Quality factors used for multi-pass degradation.
pub const MULTI_QF_SET: [u8; 5] = [25, 18, 15, 10, 7];
pub const MAX_COMPRESS_TIMES: usize = 5;

/// ITU-T T.81 Annex K.1 luminance table, row-major.
pub const BASE_LUMA: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// ITU-T T.81 Annex K.1 chrominance table, row-major.
pub const BASE_CHROMA: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, //
    18, 21, 26, 66, 99, 99, 99, 99, //
    24, 26, 56, 99, 99, 99, 99, 99, //
    47, 66, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99,
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantTable {
    pub qf: u8,
    pub luma: [u16; 64],
    pub chroma: [u16; 64],
}

/// IJG quality scaling of the Annex K tables.
pub fn quant_table_for(qf: u8) -> Result<QuantTable> {
    if !(1..=100).contains(&qf) {
        return Err(invalid(alloc::format!("quality factor {qf} outside [1, 100]")));
    }
    let q = qf as u32;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let scaled = |base: &[u16; 64]| {
        let mut out = [0u16; 64];
        for (o, &b) in out.iter_mut().zip(base) {
            *o = ((b as u32 * scale + 50) / 100).clamp(1, 255) as u16;
        }
        out
    };
    Ok(QuantTable {
        qf,
        luma: scaled(&BASE_LUMA),
        chroma: scaled(&BASE_CHROMA),
    })
}

/// Copies the 8×8 block at block coordinates `(bx, by)` of a plane.
pub(crate) fn read_block(plane: &[f64], width: usize, bx: usize, by: usize, shift: f64) -> Block {
    let mut b = [0f64; 64];
    for r in 0..8 {
        let row = (by * 8 + r) * width + bx * 8;
        for c in 0..8 {
            b[r * 8 + c] = plane[row + c] + shift;
        }
    }
    b
}

pub(crate) fn write_block(plane: &mut [f64], width: usize, bx: usize, by: usize, block: &Block, shift: f64) {
    for r in 0..8 {
        let row = (by * 8 + r) * width + bx * 8;
        for c in 0..8 {
            plane[row + c] = block[r * 8 + c] + shift;
        }
    }
}

fn quantise_plane(plane: &mut [f64], width: usize, height: usize, table: &[u16; 64], dct: &Dct8) {
    for by in 0..height / 8 {
        for bx in 0..width / 8 {
            let mut coef = dct.forward(&read_block(plane, width, bx, by, -128.0));
            for (c, &q) in coef.iter_mut().zip(table) {
                let q = q as f64;
                *c = libm::round(*c / q) * q;
            }
            let mut px = dct.inverse(&coef);
            for v in px.iter_mut() {
                *v = (*v + 128.0).clamp(0.0, 255.0);
            }
            write_block(plane, width, bx, by, &px, 0.0);
        }
    }
}

/// One JPEG quantisation round trip at quality `qf`.
pub fn jpeg_compress(img: &ImageRgb, qf: u8) -> Result<ImageRgb> {
    let table = quant_table_for(qf)?;
    let padded = img.pad_to_multiple(8);
    let YCbCrImage { width, height, mut planes } = rgb_to_ycbcr(&padded);
    let dct = Dct8::new();
    for (i, plane) in planes.iter_mut().enumerate() {
        let t = if i == 0 { &table.luma } else { &table.chroma };
        quantise_plane(plane, width, height, t, &dct);
    }
    let out = ycbcr_to_rgb(&YCbCrImage { width, height, planes });
    if (width, height) == (img.width(), img.height()) {
        Ok(out)
    } else {
        out.crop(0, 0, img.width(), img.height())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiCompressed {
    pub image: ImageRgb,
    /// Quality factor of each pass, in application order.
    pub qfs: Vec<u8>,
}

/// Draws the per-pass quality factors for [`jpeg_compress_multi`].
pub fn draw_qfs<R: Rng + ?Sized>(times: usize, rng: &mut R) -> Result<Vec<u8>> {
    if !(1..=MAX_COMPRESS_TIMES).contains(&times) {
        return Err(invalid(alloc::format!(
            "compression times {times} outside [1, {MAX_COMPRESS_TIMES}]"
        )));
    }
    Ok((0..times).map(|_| MULTI_QF_SET[rng.gen_range(0..MULTI_QF_SET.len())]).collect())
}

/// `times` successive passes, each at a quality drawn uniformly from
/// [`MULTI_QF_SET`] by a generator seeded with `seed`.
pub fn jpeg_compress_multi(img: &ImageRgb, times: usize, seed: u64) -> Result<MultiCompressed> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let qfs = draw_qfs(times, &mut rng)?;
    let mut image = img.clone();
    for &qf in &qfs {
        image = jpeg_compress(&image, qf)?;
    }
    Ok(MultiCompressed { image, qfs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quality_law() {
        let t50 = quant_table_for(50).unwrap();
        assert_eq!(t50.luma, BASE_LUMA);
        assert_eq!(t50.chroma, BASE_CHROMA);
        let t100 = quant_table_for(100).unwrap();
        assert!(t100.luma.iter().chain(&t100.chroma).all(|&v| v == 1));
        assert_eq!(quant_table_for(10).unwrap().luma[0], 80);
        let t1 = quant_table_for(1).unwrap();
        assert!(t1.luma.iter().all(|&v| v == 255));
        assert!(quant_table_for(0).is_err());
        assert!(quant_table_for(101).is_err());
    }

    #[test]
    fn multi_rejects_out_of_range_times() {
        let img = ImageRgb::filled(8, 8, [1, 2, 3]);
        assert!(jpeg_compress_multi(&img, 0, 1).is_err());
        assert!(jpeg_compress_multi(&img, 6, 1).is_err());
    }

    #[test]
    fn single_pass_multi_matches_direct() {
        let img = ImageRgb::filled(16, 8, [200, 30, 90]);
        let m = jpeg_compress_multi(&img, 1, 42).unwrap();
        assert_eq!(m.image, jpeg_compress(&img, m.qfs[0]).unwrap());
    }

    #[test]
    fn odd_sizes_are_cropped_back() {
        let img = ImageRgb::filled(13, 9, [90, 100, 110]);
        let out = jpeg_compress(&img, 30).unwrap();
        assert_eq!((out.width(), out.height()), (13, 9));
    }
}
