//! Small trainable classifier providing shallow feature taps and a
//! classification head.
//!
//! ```text
//! (pixel − 127.5)/64 → conv1 (3→32, 3×3, stride 2) ─D1→ ReLU ─D2→ block1 (32→32) ─D3→
//!   downsample2 → block2 (32→64) ─D4→ global average pool → head (64→K)
//! ```

use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adam::{adam_step_model, AdamState};
use crate::conv::{conv2d, conv2d_backward, conv2d_backward_params, ConvKernel};
use crate::error::{invalid, shape_mismatch, Error, Result};
use crate::image::ImageRgb;
use crate::params::{join, ParamMut, ParamRef, Parameterized};
use crate::repconv::RepConvBlock;
use crate::tensor::{
    downsample2, downsample2_backward, global_avg_pool, global_avg_pool_backward, relu, relu_backward,
    softmax_cross_entropy, Tensor,
};

pub const STEM_CHANNELS: usize = 32;
pub const DEEP_CHANNELS: usize = 64;
pub const MIN_IMAGE_SIDE: usize = 32;
pub const MAX_IMAGE_SIDE: usize = 224;
pub const PIXEL_CENTER: f32 = 127.5;
pub const PIXEL_SCALE: f32 = 1.0 / 64.0;

/// Normalised `(1, 3, H, W)` network input of an image.
pub fn image_input(img: &ImageRgb) -> Tensor {
    let (w, h) = (img.width(), img.height());
    let mut t = Tensor::zeros([1, 3, h, w]);
    for c in 0..3 {
        for (i, v) in t.plane_mut(0, c).iter_mut().enumerate() {
            *v = (img.data()[i * 3 + c] as f32 - PIXEL_CENTER) * PIXEL_SCALE;
        }
    }
    t
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TapDepth {
    D1,
    D2,
    D3,
    D4,
}

impl TapDepth {
    pub const ALL: [TapDepth; 4] = [TapDepth::D1, TapDepth::D2, TapDepth::D3, TapDepth::D4];

    pub fn channels(self) -> usize {
        match self {
            TapDepth::D4 => DEEP_CHANNELS,
            _ => STEM_CHANNELS,
        }
    }

    /// Feature side length for a square input of side `image_side`.
    pub fn feature_side(self, image_side: usize) -> usize {
        let half = (image_side + 1) / 2;
        match self {
            TapDepth::D4 => half / 2,
            _ => half,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TapDepth::D1 => "D1",
            TapDepth::D2 => "D2",
            TapDepth::D3 => "D3",
            TapDepth::D4 => "D4",
        }
    }
}

impl fmt::Display for TapDepth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TapDepth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "D1" | "d1" | "1" => Ok(TapDepth::D1),
            "D2" | "d2" | "2" => Ok(TapDepth::D2),
            "D3" | "d3" | "3" => Ok(TapDepth::D3),
            "D4" | "d4" | "4" => Ok(TapDepth::D4),
            other => Err(invalid(alloc::format!("unknown tap depth {other:?} (expected D1-D4)"))),
        }
    }
}

/// Trainable parameters of the backbone. [`ToyBackbone`] wraps a frozen copy.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub conv1: ConvKernel,
    pub block1: RepConvBlock,
    pub block2: RepConvBlock,
    pub head: ConvKernel,
}

impl BackboneParams {
    pub fn random<R: Rng + ?Sized>(num_classes: usize, rng: &mut R) -> Self {
        Self {
            conv1: ConvKernel::random(STEM_CHANNELS, 3, 3, 2, 1, rng),
            block1: RepConvBlock::random(STEM_CHANNELS, STEM_CHANNELS, STEM_CHANNELS, rng),
            block2: RepConvBlock::random(STEM_CHANNELS, STEM_CHANNELS, DEEP_CHANNELS, rng),
            head: ConvKernel::random(num_classes, DEEP_CHANNELS, 1, 1, 0, rng),
        }
    }

    /// All-zero parameters with the right shapes, used as a load target.
    pub fn zeros(num_classes: usize) -> Self {
        Self {
            conv1: ConvKernel::zeros(STEM_CHANNELS, 3, 3, 2, 1),
            block1: RepConvBlock::zeros(STEM_CHANNELS, STEM_CHANNELS, STEM_CHANNELS),
            block2: RepConvBlock::zeros(STEM_CHANNELS, STEM_CHANNELS, DEEP_CHANNELS),
            head: ConvKernel::zeros(num_classes, DEEP_CHANNELS, 1, 1, 0),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.head.out_channels()
    }

    fn validate(&self) -> Result<()> {
        let c1 = &self.conv1;
        if c1.in_channels() != 3 || c1.out_channels() != STEM_CHANNELS || c1.kernel_size() != (3, 3) {
            return Err(invalid("conv1 must be 3→32 with a 3×3 kernel"));
        }
        self.block1.validate()?;
        self.block2.validate()?;
        if self.block1.in_channels() != STEM_CHANNELS
            || self.block1.out_channels() != STEM_CHANNELS
            || self.block2.in_channels() != STEM_CHANNELS
            || self.block2.out_channels() != DEEP_CHANNELS
            || self.head.in_channels() != DEEP_CHANNELS
            || self.head.kernel_size() != (1, 1)
        {
            return Err(invalid("backbone block channels do not chain"));
        }
        if self.num_classes() < 2 {
            return Err(invalid("backbone head needs at least 2 classes"));
        }
        Ok(())
    }
}

impl Parameterized for BackboneParams {
    fn params(&self, prefix: &str) -> Vec<ParamRef<'_>> {
        let mut v = self.conv1.params(&join(prefix, "conv1"));
        v.extend(self.block1.params(&join(prefix, "block1")));
        v.extend(self.block2.params(&join(prefix, "block2")));
        v.extend(self.head.params(&join(prefix, "head")));
        v
    }

    fn params_mut(&mut self, prefix: &str) -> Vec<ParamMut<'_>> {
        let mut v = self.conv1.params_mut(&join(prefix, "conv1"));
        v.extend(self.block1.params_mut(&join(prefix, "block1")));
        v.extend(self.block2.params_mut(&join(prefix, "block2")));
        v.extend(self.head.params_mut(&join(prefix, "head")));
        v
    }
}

/// Frozen backbone. Offers no way to change its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyBackbone {
    params: BackboneParams,
}

impl ToyBackbone {
    pub fn freeze(params: BackboneParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { params })
    }

    pub fn params(&self) -> &BackboneParams {
        &self.params
    }

    pub fn num_classes(&self) -> usize {
        self.params.num_classes()
    }

    pub fn checksum(&self) -> u64 {
        self.params.checksum()
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Activations at `depth` for a `(B, 3, H, W)` input from [`image_input`].
    pub fn extract_features(&self, input: &Tensor, depth: TapDepth) -> Result<Tensor> {
        if input.channels() != 3 {
            return Err(shape_mismatch(input.dims(), [input.batch(), 3, input.height(), input.width()]));
        }
        let d1 = conv2d(input, &self.params.conv1)?;
        if depth == TapDepth::D1 {
            return Ok(d1);
        }
        self.advance(TapDepth::D1, d1, depth)
    }

    pub fn extract_image(&self, img: &ImageRgb, depth: TapDepth) -> Result<Tensor> {
        self.extract_features(&image_input(img), depth)
    }

    /// Runs the layers between tap `from` and tap `to`.
    fn advance(&self, from: TapDepth, mut x: Tensor, to: TapDepth) -> Result<Tensor> {
        let mut at = from;
        while at < to {
            x = match at {
                TapDepth::D1 => relu(&x),
                TapDepth::D2 => self.params.block1.forward(&x)?,
                TapDepth::D3 => self.params.block2.forward(&downsample2(&x)?)?,
                TapDepth::D4 => unreachable!(),
            };
            at = TapDepth::ALL[at as usize + 1];
        }
        Ok(x)
    }

    /// Class scores `(B, K, 1, 1)` from features taken at `depth`.
    pub fn classify_from(&self, depth: TapDepth, features: &Tensor) -> Result<Tensor> {
        let want = depth.channels();
        let [b, c, h, w] = features.dims();
        if c != want || h == 0 || w == 0 {
            return Err(shape_mismatch(features.dims(), [b, want, h, w]));
        }
        let deep = self.advance(depth, features.clone(), TapDepth::D4)?;
        conv2d(&global_avg_pool(&deep), &self.params.head)
    }

    pub fn classify(&self, input: &Tensor) -> Result<Tensor> {
        let d2 = self.extract_features(input, TapDepth::D2)?;
        self.classify_from(TapDepth::D2, &d2)
    }

    pub fn classify_image(&self, img: &ImageRgb) -> Result<Vec<f32>> {
        Ok(self.classify(&image_input(img))?.into_data())
    }

    /// conv1 at stride 1, padding 1, then ReLU, on an isolated 8×8 block:
    /// one 32-vector per pixel position, `(1, 32, 8, 8)`.
    pub fn per_block_features(&self, block: &ImageRgb) -> Result<Tensor> {
        if block.width() != 8 || block.height() != 8 {
            return Err(shape_mismatch((block.width(), block.height()), (8, 8)));
        }
        let k = self.params.conv1.with_geometry(1, 1);
        Ok(relu(&conv2d(&image_input(block), &k)?))
    }
}

pub fn argmax(scores: &[f32]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Argmax per batch row of `(B, K, 1, 1)` scores.
pub fn predictions(scores: &Tensor) -> Vec<usize> {
    let k = scores.channels();
    scores.data().chunks(k).map(argmax).collect()
}

/// Mean cross-entropy of the batch and its parameter gradient.
pub fn backbone_loss_and_grad(params: &BackboneParams, input: &Tensor, labels: &[usize]) -> Result<(f32, BackboneParams)> {
    let pre1 = conv2d(input, &params.conv1)?;
    let act1 = relu(&pre1);
    let (a3, c3) = params.block1.forward_train(&act1)?;
    let down = downsample2(&a3)?;
    let (a4, c4) = params.block2.forward_train(&down)?;
    let pooled = global_avg_pool(&a4);
    let logits = conv2d(&pooled, &params.head)?;
    let (loss, g_logits) = softmax_cross_entropy(&logits, labels)?;

    let g_head = conv2d_backward(&pooled, &params.head, &g_logits)?;
    let g_a4 = global_avg_pool_backward(&g_head.input, a4.height(), a4.width());
    let (g_down, g_block2) = params.block2.backward(&c4, &g_a4)?;
    let (g_act1, g_block1) = params.block1.backward(&c3, &downsample2_backward(&g_down))?;
    let g_pre1 = relu_backward(&pre1, &g_act1)?;
    let g_conv1 = conv2d_backward_params(input, &params.conv1, &g_pre1)?;
    Ok((
        loss,
        BackboneParams {
            conv1: g_conv1.kernel,
            block1: g_block1,
            block2: g_block2,
            head: g_head.kernel,
        },
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for BackboneTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch: 16,
            lr: 2e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f32,
    pub train_accuracy: f64,
}

/// Checks labels and image sizes; returns the class count.
fn validate_dataset(images: &[ImageRgb], labels: &[usize]) -> Result<usize> {
    if images.len() != labels.len() {
        return Err(shape_mismatch(images.len(), labels.len()));
    }
    let Some(first) = images.first() else {
        return Err(invalid("empty training set"));
    };
    let side = first.width();
    if !(MIN_IMAGE_SIDE..=MAX_IMAGE_SIDE).contains(&side) || side % 8 != 0 {
        return Err(invalid(alloc::format!(
            "image side {side} must be a multiple of 8 in [{MIN_IMAGE_SIDE}, {MAX_IMAGE_SIDE}]"
        )));
    }
    if let Some(img) = images.iter().find(|i| i.width() != side || i.height() != side) {
        return Err(shape_mismatch((side, side), (img.width(), img.height())));
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    if classes < 2 {
        return Err(invalid("training needs at least 2 classes"));
    }
    let mut counts = alloc::vec![0usize; classes];
    for &l in labels {
        counts[l] += 1;
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(invalid(alloc::format!("class {empty} has no images")));
    }
    Ok(classes)
}

/// Cross-entropy training with Adam over shuffled minibatches. The result is
/// frozen and depends only on the data and `config.seed`.
pub fn backbone_train(
    images: &[ImageRgb],
    labels: &[usize],
    config: &BackboneTrainConfig,
) -> Result<(ToyBackbone, Vec<EpochLog>)> {
    let classes = validate_dataset(images, labels)?;
    if config.epochs == 0 || config.batch == 0 {
        return Err(invalid("epochs and batch must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = BackboneParams::random(classes, &mut rng);
    let mut adam = AdamState::new(config.lr);
    let tensors: Vec<Tensor> = images.iter().map(image_input).collect();
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0f64;
        for chunk in order.chunks(config.batch) {
            let batch: Vec<Tensor> = chunk.iter().map(|&i| tensors[i].clone()).collect();
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (loss, grads) = backbone_loss_and_grad(&params, &Tensor::stack(&batch)?, &batch_labels)?;
            if !loss.is_finite() {
                return Err(Error::NumericFailure {
                    iteration: epoch,
                    lr: config.lr,
                });
            }
            total += loss as f64 * chunk.len() as f64;
            adam_step_model(&mut params, &grads, &mut adam)?;
        }
        let model = ToyBackbone::freeze(params.clone())?;
        log.push(EpochLog {
            epoch,
            loss: (total / images.len() as f64) as f32,
            train_accuracy: accuracy(&model, &tensors, labels)?,
        });
    }
    Ok((ToyBackbone::freeze(params)?, log))
}

fn accuracy(model: &ToyBackbone, inputs: &[Tensor], labels: &[usize]) -> Result<f64> {
    let mut hits = 0usize;
    for chunk in (0..inputs.len()).collect::<Vec<_>>().chunks(64) {
        let batch: Vec<Tensor> = chunk.iter().map(|&i| inputs[i].clone()).collect();
        let preds = predictions(&model.classify(&Tensor::stack(&batch)?)?);
        hits += chunk.iter().zip(preds).filter(|(&i, p)| labels[i] == *p).count();
    }
    Ok(hits as f64 / inputs.len() as f64)
}

/// Top-1 of the backbone on images, without degradation.
pub fn backbone_accuracy(model: &ToyBackbone, images: &[ImageRgb], labels: &[usize]) -> Result<f64> {
    if images.len() != labels.len() || images.is_empty() {
        return Err(shape_mismatch(images.len(), labels.len()));
    }
    let inputs: Vec<Tensor> = images.iter().map(image_input).collect();
    accuracy(model, &inputs, labels)
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "epoch {} loss {:.4} acc {:.4}", self.epoch, self.loss, self.train_accuracy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(seed: u64) -> ToyBackbone {
        ToyBackbone::freeze(BackboneParams::random(3, &mut ChaCha8Rng::seed_from_u64(seed))).unwrap()
    }

    #[test]
    fn tap_shapes() {
        let m = model(1);
        let x = Tensor::uniform([1, 3, 32, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(2)).map(f32::abs);
        assert_eq!(m.extract_features(&x, TapDepth::D1).unwrap().dims(), [1, 32, 16, 16]);
        assert_eq!(m.extract_features(&x, TapDepth::D3).unwrap().dims(), [1, 32, 16, 16]);
        assert_eq!(m.extract_features(&x, TapDepth::D4).unwrap().dims(), [1, 64, 8, 8]);
        assert_eq!(TapDepth::D4.feature_side(32), 8);
        assert_eq!(m.classify(&x).unwrap().dims(), [1, 3, 1, 1]);
    }

    #[test]
    fn d2_is_relu_of_d1() {
        let m = model(3);
        let x = Tensor::uniform([2, 3, 16, 16], 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        let d1 = m.extract_features(&x, TapDepth::D1).unwrap();
        assert_eq!(m.extract_features(&x, TapDepth::D2).unwrap(), relu(&d1));
    }

    #[test]
    fn tap_depth_parses() {
        for d in TapDepth::ALL {
            assert_eq!(d.as_str().parse::<TapDepth>().unwrap(), d);
        }
        assert!("D5".parse::<TapDepth>().is_err());
    }

    #[test]
    fn rejects_bad_datasets() {
        let imgs = alloc::vec![ImageRgb::filled(32, 32, [0, 0, 0]); 3];
        let cfg = BackboneTrainConfig::default();
        assert!(backbone_train(&imgs, &[0, 0, 0], &cfg).is_err());
        assert!(backbone_train(&imgs, &[0, 2, 2], &cfg).is_err());
        assert!(backbone_train(&imgs, &[0, 1], &cfg).is_err());
        let small = alloc::vec![ImageRgb::filled(16, 16, [0, 0, 0]); 2];
        assert!(backbone_train(&small, &[0, 1], &cfg).is_err());
    }
}
