use std::f64::consts::PI;

use afd_core::color::{rgb_to_ycbcr, ycbcr_to_rgb};
use afd_core::dct::{dct8x8, idct8x8, Block};
use afd_core::dct_grid::{channel_of, coefficient_of, gather_rearrange_dct, DCT_CHANNELS};
use afd_core::image::ImageRgb;
use afd_core::jpeg::{jpeg_compress, jpeg_compress_multi, quant_table_for, BASE_CHROMA, BASE_LUMA};
use afd_core::synth::{grating_classes, render_grating};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Textbook double sum with the `1/√2` weight at frequency 0.
fn dct_oracle(x: &Block) -> Block {
    let c = |k: usize| if k == 0 { 1.0 / 2f64.sqrt() } else { 1.0 };
    let mut out = [0f64; 64];
    for u in 0..8 {
        for v in 0..8 {
            let mut s = 0.0;
            for i in 0..8 {
                for j in 0..8 {
                    s += x[i * 8 + j] * ((2 * i + 1) as f64 * u as f64 * PI / 16.0).cos() * ((2 * j + 1) as f64 * v as f64 * PI / 16.0).cos();
                }
            }
            out[u * 8 + v] = 0.25 * c(u) * c(v) * s;
        }
    }
    out
}

fn block_strategy() -> impl Strategy<Value = Block> {
    prop::array::uniform32(-128.0f64..128.0)
        .prop_flat_map(|a| prop::array::uniform32(-128.0f64..128.0).prop_map(move |b| (a, b)))
        .prop_map(|(a, b)| {
            let mut x = [0f64; 64];
            x[..32].copy_from_slice(&a);
            x[32..].copy_from_slice(&b);
            x
        })
}

fn noise_image(w: usize, h: usize, seed: u64) -> ImageRgb {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageRgb::new(w, h, (0..w * h * 3).map(|_| rng.gen()).collect()).unwrap()
}

/// Twenty natural-ish images: gratings of every class plus smooth noise.
fn image_set() -> Vec<ImageRgb> {
    let classes = grating_classes(10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    (0..20).map(|i| render_grating(classes[i % 10], 32, &mut rng)).collect()
}

fn mean_psnr(images: &[ImageRgb], f: impl Fn(&ImageRgb) -> ImageRgb) -> f64 {
    images.iter().map(|img| img.psnr(&f(img)).unwrap()).sum::<f64>() / images.len() as f64
}

proptest! {
    #[test]
    fn dct_matches_double_loop(x in block_strategy()) {
        let fast = dct8x8(&x);
        for (a, b) in fast.iter().zip(dct_oracle(&x).iter()) {
            prop_assert!((a - b).abs() < 1e-8, "{} vs {}", a, b);
        }
    }

    #[test]
    fn dct_preserves_energy(x in block_strategy()) {
        let e_in: f64 = x.iter().map(|v| v * v).sum();
        let e_out: f64 = dct8x8(&x).iter().map(|v| v * v).sum();
        prop_assert!((e_in - e_out).abs() <= 1e-6 * e_in.max(1e-12));
    }

    #[test]
    fn idct_inverts(x in block_strategy()) {
        let back = idct8x8(&dct8x8(&x));
        for (a, b) in back.iter().zip(x.iter()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_block_is_pure_dc(v in -128i32..=127) {
        let c = dct8x8(&[v as f64; 64]);
        prop_assert_eq!(c[0], 8.0 * v as f64);
        prop_assert!(c[1..].iter().all(|&x| x.abs() < 1e-12));
    }

    #[test]
    fn rearrangement_is_a_bijection(p in 0usize..3, u in 0usize..8, v in 0usize..8) {
        let ch = channel_of(p, u, v);
        prop_assert!(ch < DCT_CHANNELS);
        prop_assert_eq!(coefficient_of(ch), (p, u, v));
    }

    #[test]
    fn color_round_trip_within_one(seed in any::<u64>()) {
        let img = noise_image(7, 5, seed);
        let back = ycbcr_to_rgb(&rgb_to_ycbcr(&img));
        prop_assert!(img.max_abs_diff(&back).unwrap() <= 1);
    }

    #[test]
    fn constant_image_stays_constant(rgb in any::<[u8; 3]>(), qf in 1u8..=100) {
        let img = ImageRgb::filled(16, 8, rgb);
        let out = jpeg_compress(&img, qf).unwrap();
        let first = out.pixel(0, 0);
        for y in 0..8 {
            for x in 0..16 {
                let p = out.pixel(x, y);
                for c in 0..3 {
                    prop_assert!((p[c] as i32 - first[c] as i32).abs() <= 1);
                }
            }
        }
    }
}

#[test]
fn constant_block_dc_is_exact() {
    for v in [-128.0, -3.5, 0.0, 1.0, 127.0] {
        assert_eq!(dct8x8(&[v; 64])[0], 8.0 * v);
    }
}

#[test]
fn quality_law() {
    let t50 = quant_table_for(50).unwrap();
    assert_eq!((t50.luma, t50.chroma), (BASE_LUMA, BASE_CHROMA));
    let t100 = quant_table_for(100).unwrap();
    assert!(t100.luma.iter().chain(&t100.chroma).all(|&q| q == 1));
    assert_eq!(quant_table_for(10).unwrap().luma[0], 80);
    assert!(quant_table_for(0).is_err() && quant_table_for(101).is_err());
}

#[test]
fn near_lossless_at_qf_100() {
    for seed in 0..20 {
        let img = noise_image(24, 16, seed);
        assert!(img.max_abs_diff(&jpeg_compress(&img, 100).unwrap()).unwrap() <= 2);
    }
}

#[test]
fn second_pass_changes_less() {
    for (i, img) in image_set().iter().enumerate() {
        let once = jpeg_compress(img, 20).unwrap();
        let twice = jpeg_compress(&once, 20).unwrap();
        assert!(once.mean_abs_diff(&twice).unwrap() < img.mean_abs_diff(&once).unwrap(), "image {i}");
    }
}

#[test]
fn psnr_falls_with_quality() {
    let set = image_set();
    let mut last = f64::INFINITY;
    for qf in [95, 75, 60, 50, 25, 18, 15, 10, 7, 3] {
        let p = mean_psnr(&set, |img| jpeg_compress(img, qf).unwrap());
        assert!(p <= last, "qf {qf}: {p} > {last}");
        last = p;
    }
}

#[test]
fn repeated_compression_degrades_more() {
    let set = image_set();
    let once = mean_psnr(&set, |img| jpeg_compress_multi(img, 1, 9).unwrap().image);
    let five = mean_psnr(&set, |img| jpeg_compress_multi(img, 5, 9).unwrap().image);
    assert!(five < once, "{five} >= {once}");
}

#[test]
fn multi_compression_is_reproducible_and_checked() {
    let img = noise_image(16, 16, 1);
    let a = jpeg_compress_multi(&img, 3, 42).unwrap();
    assert_eq!(a, jpeg_compress_multi(&img, 3, 42).unwrap());
    let one = jpeg_compress_multi(&img, 1, 42).unwrap();
    assert_eq!(one.image, jpeg_compress(&img, one.qfs[0]).unwrap());
    assert!(jpeg_compress_multi(&img, 0, 1).is_err() && jpeg_compress_multi(&img, 6, 1).is_err());
}

#[test]
fn grid_layout_and_inverse() {
    let img = noise_image(224, 224, 5);
    let grid = gather_rearrange_dct(&img);
    assert_eq!((grid.blocks_h(), grid.blocks_w(), grid.channels()), (28, 28, 192));

    let img = noise_image(24, 16, 6);
    let grid = gather_rearrange_dct(&img);
    let ycc = rgb_to_ycbcr(&img);
    for (by, bx) in [(0, 0), (1, 2), (0, 1)] {
        for p in 0..3 {
            let mut block = [0f64; 64];
            for i in 0..8 {
                for j in 0..8 {
                    block[i * 8 + j] = ycc.planes[p][(by * 8 + i) * 24 + bx * 8 + j] - 128.0;
                }
            }
            let coef = dct_oracle(&block);
            for u in 0..8 {
                for v in 0..8 {
                    let got = grid.get(channel_of(p, u, v), by, bx) as f64;
                    assert!((got - coef[u * 8 + v]).abs() < 1e-3 * coef[u * 8 + v].abs().max(1.0));
                }
            }
        }
    }
    let planes = grid.to_planes();
    for p in 0..3 {
        for (a, b) in planes[p].iter().zip(&ycc.planes[p]) {
            assert!((a - (b - 128.0)).abs() < 1e-4);
        }
    }

    let flat = gather_rearrange_dct(&ImageRgb::filled(16, 16, [90, 140, 200]));
    for ch in 0..DCT_CHANNELS {
        let nonzero = (0..2).any(|by| (0..2).any(|bx| flat.get(ch, by, bx).abs() > 1e-3));
        assert_eq!(nonzero, [0, 64, 128].contains(&ch), "channel {ch}");
    }
}

#[test]
fn odd_sizes_round_trip_through_codec() {
    let img = noise_image(13, 9, 2);
    let out = jpeg_compress(&img, 50).unwrap();
    assert_eq!((out.width(), out.height()), (13, 9));
    let grid = gather_rearrange_dct(&img);
    assert_eq!((grid.blocks_h(), grid.blocks_w()), (2, 2));
}
