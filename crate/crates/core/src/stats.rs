//! Drift statistics between clean and compressed 8×8 blocks: the angle
//! between their DCT coefficient vectors and the mean per-position angle
//! between their shallow feature responses.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::ToyBackbone;
use crate::color::rgb_to_ycbcr;
use crate::dct::Dct8;
use crate::error::{invalid, shape_mismatch, Error, Result};
use crate::image::ImageRgb;
use crate::jpeg::{jpeg_compress, read_block};
use crate::tensor::Tensor;

/// Vectors with a smaller Euclidean norm are treated as degenerate.
pub const NORM_FLOOR: f64 = 1e-8;
pub const DEFAULT_BINS: usize = 30;
/// Narrowest DA bin, two degrees. Keeps near-lossless samples in one bin.
pub const MIN_BIN_WIDTH: f64 = core::f64::consts::PI / 90.0;

/// Angle between two vectors, `None` if either norm is below [`NORM_FLOOR`].
/// Uses `2·atan2(|â − b̂|, |â + b̂|)` on the unit vectors, which is exact at 0
/// and π where the arccos of the cosine is not.
pub fn vector_angle(a: &[f64], b: &[f64]) -> Option<f64> {
    debug_assert_eq!(a.len(), b.len());
    let na = libm::sqrt(a.iter().map(|x| x * x).sum());
    let nb = libm::sqrt(b.iter().map(|x| x * x).sum());
    if na < NORM_FLOOR || nb < NORM_FLOOR {
        return None;
    }
    let (mut diff, mut sum) = (0f64, 0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (u, v) = (x / na, y / nb);
        diff += (u - v) * (u - v);
        sum += (u + v) * (u + v);
    }
    Some(2.0 * libm::atan2(libm::sqrt(diff), libm::sqrt(sum)))
}

/// Angle between the 192-coefficient DCT vectors of two blocks.
pub fn da(clean_dct: &[f64], comp_dct: &[f64]) -> Result<Option<f64>> {
    if clean_dct.len() != comp_dct.len() {
        return Err(shape_mismatch(clean_dct.len(), comp_dct.len()));
    }
    Ok(vector_angle(clean_dct, comp_dct))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FaResult {
    pub angle: f64,
    /// Positions left out because a vector was degenerate.
    pub excluded: usize,
}

/// Mean angle over spatial positions between `(1, C, 8, 8)` feature maps,
/// each position contributing its C-vector.
pub fn fa(clean_feat: &Tensor, comp_feat: &Tensor) -> Result<FaResult> {
    let [b, c, h, w] = clean_feat.dims();
    if clean_feat.dims() != comp_feat.dims() || b != 1 {
        return Err(shape_mismatch(clean_feat.dims(), comp_feat.dims()));
    }
    let mut sum = 0f64;
    let mut used = 0usize;
    let mut va = alloc::vec![0f64; c];
    let mut vb = alloc::vec![0f64; c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                va[ch] = clean_feat.at(0, ch, y, x) as f64;
                vb[ch] = comp_feat.at(0, ch, y, x) as f64;
            }
            if let Some(a) = vector_angle(&va, &vb) {
                sum += a;
                used += 1;
            }
        }
    }
    if used == 0 {
        return Err(Error::Degenerate(alloc::format!("all {} feature positions have near-zero norm", h * w)));
    }
    Ok(FaResult {
        angle: sum / used as f64,
        excluded: h * w - used,
    })
}

/// Level-shifted YCbCr DCT of an 8×8 block in channel order
/// `plane * 64 + u * 8 + v`, in double precision.
pub fn block_dct_vector(block: &ImageRgb) -> Result<Vec<f64>> {
    if block.width() != 8 || block.height() != 8 {
        return Err(shape_mismatch((block.width(), block.height()), (8, 8)));
    }
    let ycc = rgb_to_ycbcr(block);
    let dct = Dct8::new();
    let mut out = Vec::with_capacity(192);
    for plane in &ycc.planes {
        out.extend_from_slice(&dct.forward(&read_block(plane, 8, 0, 0, -128.0)));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockPair {
    pub clean: ImageRgb,
    pub compressed: ImageRgb,
    pub qf: u8,
    pub image: usize,
    /// Top-left pixel of the block, both multiples of 8.
    pub x: usize,
    pub y: usize,
}

/// `n` blocks drawn uniformly (image first, then block position) with their
/// counterparts from the same position of the compressed image.
pub fn sample_pairs(images: &[ImageRgb], qf: u8, n: usize, seed: u64) -> Result<Vec<BlockPair>> {
    if images.is_empty() || n == 0 {
        return Err(invalid("sampling needs at least one image and n >= 1"));
    }
    if let Some(i) = images.iter().position(|i| i.width() < 8 || i.height() < 8) {
        return Err(invalid(alloc::format!("image {i} is smaller than one 8x8 block")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<(usize, usize, usize)> = (0..n)
        .map(|_| {
            let i = rng.gen_range(0..images.len());
            let (bw, bh) = (images[i].width() / 8, images[i].height() / 8);
            (i, rng.gen_range(0..bw) * 8, rng.gen_range(0..bh) * 8)
        })
        .collect();
    let mut compressed: Vec<Option<ImageRgb>> = alloc::vec![None; images.len()];
    let mut pairs = Vec::with_capacity(n);
    for (i, x, y) in picks {
        if compressed[i].is_none() {
            compressed[i] = Some(jpeg_compress(&images[i], qf)?);
        }
        let comp = compressed[i].as_ref().expect("filled above");
        pairs.push(BlockPair {
            clean: images[i].crop(x, y, 8, 8)?,
            compressed: comp.crop(x, y, 8, 8)?,
            qf,
            image: i,
            x,
            y,
        });
    }
    Ok(pairs)
}

/// DA and FA of one pair, `None` if either is degenerate.
pub fn pair_angles(pair: &BlockPair, model: &ToyBackbone) -> Result<Option<(f64, f64)>> {
    let Some(d) = da(&block_dct_vector(&pair.clean)?, &block_dct_vector(&pair.compressed)?)? else {
        return Ok(None);
    };
    let f = fa(&model.per_block_features(&pair.clean)?, &model.per_block_features(&pair.compressed)?);
    match f {
        Ok(r) => Ok(Some((d, r.angle))),
        Err(Error::Degenerate(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurveRow {
    pub da_bin_center: f64,
    pub mean_fa: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DriftCurve {
    pub qf: u8,
    pub rows: Vec<CurveRow>,
    /// Pairs left out because DA or FA was degenerate.
    pub skipped: usize,
    /// Mean FA over every valid pair.
    pub mean_fa: f64,
    pub pairs_used: usize,
}

/// Bins pairs by DA into `bins` equal-width bins spanning `[0, max DA]`
/// (at least [`MIN_BIN_WIDTH`] wide) and averages FA per bin.
pub fn drift_curve(pairs: &[BlockPair], model: &ToyBackbone, bins: usize) -> Result<DriftCurve> {
    if bins < 2 {
        return Err(invalid(alloc::format!("bins must be at least 2, got {bins}")));
    }
    let qf = pairs.first().map_or(0, |p| p.qf);
    let mut samples = Vec::with_capacity(pairs.len());
    let mut skipped = 0usize;
    for p in pairs {
        match pair_angles(p, model)? {
            Some(s) => samples.push(s),
            None => skipped += 1,
        }
    }
    if samples.is_empty() {
        return Err(Error::Degenerate(alloc::format!("no valid block pairs out of {}", pairs.len())));
    }
    Ok(curve_from_samples(qf, &samples, bins, skipped))
}

/// Binning step of [`drift_curve`] on precomputed `(da, fa)` samples.
pub fn curve_from_samples(qf: u8, samples: &[(f64, f64)], bins: usize, skipped: usize) -> DriftCurve {
    let max_da = samples.iter().fold(0f64, |m, s| m.max(s.0));
    let width = (max_da / bins as f64).max(MIN_BIN_WIDTH);
    let mut sums = alloc::vec![0f64; bins];
    let mut counts = alloc::vec![0usize; bins];
    let mut total = 0f64;
    for &(d, f) in samples {
        let bin = ((d / width) as usize).min(bins - 1);
        sums[bin] += f;
        counts[bin] += 1;
        total += f;
    }
    let rows = (0..bins)
        .filter(|&i| counts[i] > 0)
        .map(|i| CurveRow {
            da_bin_center: (i as f64 + 0.5) * width,
            mean_fa: sums[i] / counts[i] as f64,
            count: counts[i],
        })
        .collect();
    DriftCurve {
        qf,
        rows,
        skipped,
        mean_fa: total / samples.len() as f64,
        pairs_used: samples.len(),
    }
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = alloc::vec![0f64; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with tied ranks averaged. `None` for fewer than
/// two points or a constant input.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0f64, 0f64, 0f64);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / libm::sqrt(sxx * syy))
}

impl DriftCurve {
    pub fn spearman(&self) -> Option<f64> {
        let xs: Vec<f64> = self.rows.iter().map(|r| r.da_bin_center).collect();
        let ys: Vec<f64> = self.rows.iter().map(|r| r.mean_fa).collect();
        spearman(&xs, &ys)
    }
}

pub const CURVE_CSV_HEADER: &str = "qf,da_bin_center,mean_fa,count";

pub fn curves_to_csv(curves: &[DriftCurve]) -> String {
    let mut s = String::from(CURVE_CSV_HEADER);
    s.push('\n');
    for c in curves {
        for r in &c.rows {
            let _ = writeln!(s, "{},{:.6},{:.6},{}", c.qf, r.da_bin_center, r.mean_fa, r.count);
        }
    }
    s
}
