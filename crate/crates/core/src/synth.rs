//! Procedural labelled images: oriented sinusoidal gratings with random
//! phase, contrast, colour and noise.
//!
//! Two classes are a horizontal and a vertical grating. Larger class counts
//! cycle through evenly spaced orientations, then through a coarse and a fine
//! period.

use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::image::ImageRgb;

pub const COARSE_PERIOD: f64 = 8.0;
pub const FINE_PERIOD: f64 = 3.5;
pub const MAX_CLASSES: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GratingClass {
    /// Direction of intensity variation, radians.
    pub angle: f64,
    /// Pixels per cycle.
    pub period: f64,
}

pub fn grating_classes(count: usize) -> Result<Vec<GratingClass>> {
    if !(2..=MAX_CLASSES).contains(&count) {
        return Err(invalid(alloc::format!("class count {count} outside [2, {MAX_CLASSES}]")));
    }
    if count == 2 {
        return Ok(alloc::vec![
            GratingClass { angle: PI / 2.0, period: COARSE_PERIOD },
            GratingClass { angle: 0.0, period: COARSE_PERIOD },
        ]);
    }
    let orientations = (count + 1) / 2;
    Ok((0..count)
        .map(|i| GratingClass {
            angle: PI * (i % orientations) as f64 / orientations as f64,
            period: if i < orientations { COARSE_PERIOD } else { FINE_PERIOD },
        })
        .collect())
}

pub fn render_grating<R: Rng + ?Sized>(class: GratingClass, size: usize, rng: &mut R) -> ImageRgb {
    let angle = class.angle + rng.gen_range(-0.08..0.08);
    let period = class.period * rng.gen_range(0.92..1.08);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let contrast = rng.gen_range(30.0..70.0);
    let base: [f64; 3] = core::array::from_fn(|_| rng.gen_range(70.0..185.0));
    let gain: [f64; 3] = core::array::from_fn(|_| rng.gen_range(0.4..1.0));
    let (c, s) = (libm::cos(angle), libm::sin(angle));
    let k = 2.0 * PI / period;
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let wave = libm::sin(k * (x as f64 * c + y as f64 * s) + phase);
            for ch in 0..3 {
                let noise = rng.gen_range(-12.0..12.0);
                let v = base[ch] + contrast * gain[ch] * wave + noise;
                data.push(libm::round(v).clamp(0.0, 255.0) as u8);
            }
        }
    }
    ImageRgb::new(size, size, data).expect("buffer sized from dims")
}

/// Per-image seed so that any prefix or subset of a dataset is reproducible.
pub fn item_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `per_class` images of each class, interleaved by class, with labels.
pub fn synth_dataset(classes: usize, per_class: usize, size: usize, seed: u64) -> Result<(Vec<ImageRgb>, Vec<usize>)> {
    let kinds = grating_classes(classes)?;
    if size < 8 {
        return Err(invalid(alloc::format!("image size {size} below 8")));
    }
    let mut images = Vec::with_capacity(classes * per_class);
    let mut labels = Vec::with_capacity(classes * per_class);
    for i in 0..per_class * classes {
        let label = i % classes;
        let mut rng = ChaCha8Rng::seed_from_u64(item_seed(seed, i as u64));
        images.push(render_grating(kinds[label], size, &mut rng));
        labels.push(label);
    }
    Ok((images, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_plans() {
        let two = grating_classes(2).unwrap();
        assert_eq!(two[0].angle, PI / 2.0);
        assert_eq!(two[1].angle, 0.0);
        let ten = grating_classes(10).unwrap();
        assert_eq!(ten.iter().filter(|c| c.period == FINE_PERIOD).count(), 5);
        assert!(grating_classes(1).is_err());
    }

    #[test]
    fn deterministic_and_labelled() {
        let (a, la) = synth_dataset(3, 4, 16, 9).unwrap();
        let (b, lb) = synth_dataset(3, 4, 16, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_eq!(la, [0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2]);
        let (c, _) = synth_dataset(3, 2, 16, 9).unwrap();
        assert_eq!(&a[..6], &c[..]);
    }
}
