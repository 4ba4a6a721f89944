//! Joint training of the drift estimator and the enhancement network on
//! feature pairs, and Top-1 evaluation through the frozen backbone.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adam::{adam_step_model, AdamState};
use crate::backbone::{image_input, predictions, TapDepth, ToyBackbone};
use crate::dct_grid::gather_rearrange_dct;
use crate::error::{invalid, shape_mismatch, Error, Result};
use crate::fde::{block_fill_factor, FdeCache, FdeNet};
use crate::fenet::{fe_to_deploy, FeCache, FeNet, FE_WIDTH};
use crate::image::ImageRgb;
use crate::jpeg::{jpeg_compress, jpeg_compress_multi, MAX_COMPRESS_TIMES, MULTI_QF_SET};
use crate::params::{join, ParamMut, ParamRef, Parameterized};
use crate::synth::item_seed;
use crate::tensor::{mse_loss, mse_loss_grad, upsample_nearest, upsample_nearest_backward, Tensor};

/// How a clean image is degraded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Degradation {
    Clean,
    Qf(u8),
    /// One pass at a quality drawn uniformly from the set.
    QfSet(Vec<u8>),
    /// `times` passes, each at a quality drawn uniformly from [`MULTI_QF_SET`].
    Times(usize),
}

impl Degradation {
    pub fn validate(&self) -> Result<()> {
        match self {
            Degradation::Clean => Ok(()),
            Degradation::Qf(q) => check_qf(*q),
            Degradation::QfSet(set) if set.is_empty() => Err(invalid("empty quality factor set")),
            Degradation::QfSet(set) => set.iter().try_for_each(|&q| check_qf(q)),
            Degradation::Times(t) if (1..=MAX_COMPRESS_TIMES).contains(t) => Ok(()),
            Degradation::Times(t) => Err(invalid(alloc::format!(
                "compression times {t} outside [1, {MAX_COMPRESS_TIMES}]"
            ))),
        }
    }

    /// Degraded image and the quality factors applied, in order.
    pub fn apply<R: Rng + ?Sized>(&self, img: &ImageRgb, rng: &mut R) -> Result<(ImageRgb, Vec<u8>)> {
        match self {
            Degradation::Clean => Ok((img.clone(), Vec::new())),
            Degradation::Qf(q) => Ok((jpeg_compress(img, *q)?, alloc::vec![*q])),
            Degradation::QfSet(set) => {
                if set.is_empty() {
                    return Err(invalid("empty quality factor set"));
                }
                let q = set[rng.gen_range(0..set.len())];
                Ok((jpeg_compress(img, q)?, alloc::vec![q]))
            }
            Degradation::Times(t) => {
                let m = jpeg_compress_multi(img, *t, rng.gen())?;
                Ok((m.image, m.qfs))
            }
        }
    }
}

impl core::fmt::Display for Degradation {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Degradation::Clean => f.write_str("clean"),
            Degradation::Qf(q) => write!(f, "qf:{q}"),
            Degradation::QfSet(set) => {
                f.write_str("set:")?;
                for (i, q) in set.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{q}")?;
                }
                Ok(())
            }
            Degradation::Times(t) => write!(f, "times:{t}"),
        }
    }
}

/// Parses `clean`, `qf:N`, `set:A,B,...` or `times:T`.
impl core::str::FromStr for Degradation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || invalid(alloc::format!("bad degradation {s:?} (expected clean, qf:N, set:A,B,.. or times:T)"));
        let (kind, arg) = s.trim().split_once(':').unwrap_or((s.trim(), ""));
        let d = match kind {
            "clean" if arg.is_empty() => Degradation::Clean,
            "qf" => Degradation::Qf(arg.parse().map_err(|_| bad())?),
            "set" => Degradation::QfSet(
                arg.split(',')
                    .map(|q| q.trim().parse().map_err(|_| bad()))
                    .collect::<Result<Vec<u8>>>()?,
            ),
            "times" => Degradation::Times(arg.parse().map_err(|_| bad())?),
            _ => return Err(bad()),
        };
        d.validate()?;
        Ok(d)
    }
}

fn check_qf(q: u8) -> Result<()> {
    if (1..=100).contains(&q) {
        Ok(())
    } else {
        Err(invalid(alloc::format!("quality factor {q} outside [1, 100]")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: f32,
    pub lr_after: f32,
    /// First iteration that uses `lr_after`.
    pub lr_drop_at: usize,
    pub batch: usize,
    pub patch: usize,
    /// Size of the random patch pool cropped from the training images.
    pub patches: usize,
    pub degradation: Degradation,
    pub tap: TapDepth,
    pub fe_width: usize,
    pub log_every: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Full-scale recipe: 15000 iterations over 224 px patches and the QF set.
    pub fn full() -> Self {
        Self {
            iterations: 15_000,
            lr: 1e-4,
            lr_after: 2e-5,
            lr_drop_at: 7_500,
            batch: 32,
            patch: 224,
            patches: 20_000,
            degradation: Degradation::QfSet(MULTI_QF_SET.to_vec()),
            tap: TapDepth::D2,
            fe_width: FE_WIDTH,
            log_every: 100,
            seed: 0,
        }
    }

    /// Desk-scale recipe: 500 iterations over 200 patches of 32 px at QF 10.
    pub fn desk() -> Self {
        Self {
            iterations: 500,
            lr: 1e-3,
            lr_after: 2e-4,
            lr_drop_at: 250,
            batch: 8,
            patch: 32,
            patches: 200,
            degradation: Degradation::Qf(10),
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch == 0 || self.patches == 0 || self.log_every == 0 || self.fe_width == 0 {
            return Err(invalid("iterations, batch, patches, log interval and width must be positive"));
        }
        let unit = if self.tap == TapDepth::D4 { 16 } else { 8 };
        if self.patch == 0 || self.patch % unit != 0 {
            return Err(invalid(alloc::format!(
                "patch {} must be a positive multiple of {unit} for tap {}",
                self.patch,
                self.tap
            )));
        }
        if !(self.lr.is_finite() && self.lr > 0.0 && self.lr_after.is_finite() && self.lr_after > 0.0) {
            return Err(invalid("learning rates must be positive and finite"));
        }
        self.degradation.validate()
    }

    pub fn lr_at(&self, iteration: usize) -> f32 {
        if iteration < self.lr_drop_at {
            self.lr
        } else {
            self.lr_after
        }
    }
}

/// The enhancement module: drift estimator, enhancement network and the tap
/// it was trained for.
#[derive(Clone, Debug, PartialEq)]
pub struct AfdModule {
    pub fde: FdeNet,
    pub fe: FeNet,
    pub tap: TapDepth,
}

pub struct AfdCache {
    fde: FdeCache,
    fe: FeCache,
    factor: usize,
}

impl AfdModule {
    pub fn new<R: Rng + ?Sized>(tap: TapDepth, width: usize, rng: &mut R) -> Self {
        Self {
            fde: FdeNet::random(rng),
            fe: FeNet::new(tap.channels(), width, rng),
            tap,
        }
    }

    pub fn is_deploy(&self) -> bool {
        self.fe.is_deploy()
    }

    pub fn to_deploy(&self) -> Result<Self> {
        Ok(Self {
            fde: self.fde.clone(),
            fe: fe_to_deploy(&self.fe)?,
            tap: self.tap,
        })
    }

    /// Drift map `(B, 1, bh, bw)` for rearranged DCT grids `(B, 192, bh, bw)`.
    pub fn drift_map(&self, dct: &Tensor) -> Result<Tensor> {
        self.fde.forward(dct)
    }

    pub fn enhance(&self, degraded: &Tensor, dct: &Tensor) -> Result<Tensor> {
        Ok(self.forward_train(degraded, dct)?.0)
    }

    pub fn forward_train(&self, degraded: &Tensor, dct: &Tensor) -> Result<(Tensor, AfdCache)> {
        if degraded.batch() != dct.batch() {
            return Err(shape_mismatch(degraded.dims(), dct.dims()));
        }
        let factor = block_fill_factor(dct.height(), dct.width(), degraded.height(), degraded.width())?;
        let (fdm, fde) = self.fde.forward_train(dct)?;
        let fdm_up = upsample_nearest(&fdm, factor)?;
        let (out, fe) = self.fe.forward_train(degraded, &fdm_up)?;
        Ok((out, AfdCache { fde, fe, factor }))
    }

    pub fn backward(&self, cache: &AfdCache, grad_out: &Tensor) -> Result<AfdModule> {
        let fe = self.fe.backward(&cache.fe, grad_out)?;
        let g_fdm = upsample_nearest_backward(&fe.fdm_up, cache.factor)?;
        let fde = self.fde.backward(&cache.fde, &g_fdm)?;
        Ok(AfdModule {
            fde,
            fe: fe.params,
            tap: self.tap,
        })
    }

    /// Analytic FLOPs for one `feature_h × feature_w` map over a
    /// `blocks_h × blocks_w` DCT grid.
    pub fn flops(&self, feature_h: usize, feature_w: usize, blocks_h: usize, blocks_w: usize) -> u64 {
        self.fde.flops(blocks_h, blocks_w) + self.fe.flops(feature_h, feature_w)
    }
}

impl Parameterized for AfdModule {
    fn params(&self, prefix: &str) -> Vec<ParamRef<'_>> {
        let mut v = self.fde.params(&join(prefix, "fde"));
        v.extend(self.fe.params(&join(prefix, "fe")));
        v
    }

    fn params_mut(&mut self, prefix: &str) -> Vec<ParamMut<'_>> {
        let mut v = self.fde.params_mut(&join(prefix, "fde"));
        v.extend(self.fe.params_mut(&join(prefix, "fe")));
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainPair {
    pub degraded: Tensor,
    pub clean: Tensor,
    /// Rearranged DCT of the degraded patch, `(1, 192, bh, bw)`.
    pub dct: Tensor,
    pub qfs: Vec<u8>,
}

/// Infinite stream of training pairs drawn from a fixed pool of random
/// patches. Clean features are computed once per patch.
pub struct PairStream<'a> {
    backbone: &'a ToyBackbone,
    patches: Vec<ImageRgb>,
    clean: Vec<Tensor>,
    degradation: Degradation,
    tap: TapDepth,
    rng: ChaCha8Rng,
    skipped: usize,
}

/// Crops `config.patches` random `config.patch`-sized patches. Images smaller
/// than a patch are skipped and counted.
pub fn make_pairs<'a>(
    clean_images: &[ImageRgb],
    backbone: &'a ToyBackbone,
    config: &TrainConfig,
    mut rng: ChaCha8Rng,
) -> Result<PairStream<'a>> {
    config.validate()?;
    let p = config.patch;
    let eligible: Vec<&ImageRgb> = clean_images.iter().filter(|i| i.width() >= p && i.height() >= p).collect();
    let skipped = clean_images.len() - eligible.len();
    if eligible.is_empty() {
        return Err(invalid(alloc::format!(
            "no training image is at least {p}x{p} ({skipped} skipped)"
        )));
    }
    let mut patches = Vec::with_capacity(config.patches);
    for _ in 0..config.patches {
        let img = eligible[rng.gen_range(0..eligible.len())];
        let x = rng.gen_range(0..=img.width() - p);
        let y = rng.gen_range(0..=img.height() - p);
        patches.push(img.crop(x, y, p, p)?);
    }
    let clean = patches
        .iter()
        .map(|c| backbone.extract_image(c, config.tap))
        .collect::<Result<Vec<_>>>()?;
    Ok(PairStream {
        backbone,
        patches,
        clean,
        degradation: config.degradation.clone(),
        tap: config.tap,
        rng,
        skipped,
    })
}

impl PairStream<'_> {
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn patches(&self) -> &[ImageRgb] {
        &self.patches
    }

    fn pair_at<R: Rng + ?Sized>(&self, index: usize, rng: &mut R) -> Result<TrainPair> {
        let (degraded_img, qfs) = self.degradation.apply(&self.patches[index], rng)?;
        Ok(TrainPair {
            degraded: self.backbone.extract_image(&degraded_img, self.tap)?,
            clean: self.clean[index].clone(),
            dct: gather_rearrange_dct(&degraded_img).to_tensor(),
            qfs,
        })
    }

    /// One pair per pool patch, degraded with a generator seeded by `seed`.
    pub fn pool_pairs(&self, seed: u64) -> Result<Vec<TrainPair>> {
        (0..self.patches.len())
            .map(|i| self.pair_at(i, &mut ChaCha8Rng::seed_from_u64(item_seed(seed, i as u64))))
            .collect()
    }
}

impl Iterator for PairStream<'_> {
    type Item = Result<TrainPair>;

    fn next(&mut self) -> Option<Self::Item> {
        let index = self.rng.gen_range(0..self.patches.len());
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng.gen());
        Some(self.pair_at(index, &mut rng))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub loss: f32,
    pub lr: f32,
}

pub const TRAIN_LOG_HEADER: &str = "iteration,loss,lr";

pub fn log_to_csv(rows: &[LogRow]) -> alloc::string::String {
    use core::fmt::Write;
    let mut s = alloc::string::String::from(TRAIN_LOG_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{:.6},{:e}", r.iteration, r.loss, r.lr);
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub module: AfdModule,
    pub log: Vec<LogRow>,
}

fn stack_batch(pairs: &[TrainPair]) -> Result<(Tensor, Tensor, Tensor)> {
    let deg: Vec<Tensor> = pairs.iter().map(|p| p.degraded.clone()).collect();
    let clean: Vec<Tensor> = pairs.iter().map(|p| p.clean.clone()).collect();
    let dct: Vec<Tensor> = pairs.iter().map(|p| p.dct.clone()).collect();
    Ok((Tensor::stack(&deg)?, Tensor::stack(&clean)?, Tensor::stack(&dct)?))
}

/// Adam on the feature MSE, with both networks updated jointly. The loss of
/// each iteration that is a multiple of `log_every`, and of the last one, is
/// logged.
pub fn train_afd<I>(stream: &mut I, config: &TrainConfig) -> Result<TrainOutcome>
where
    I: Iterator<Item = Result<TrainPair>>,
{
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(item_seed(config.seed, u64::MAX));
    let mut module = AfdModule::new(config.tap, config.fe_width, &mut rng);
    let mut adam = AdamState::new(config.lr);
    let mut log = Vec::new();
    for iteration in 0..config.iterations {
        let batch = stream
            .by_ref()
            .take(config.batch)
            .collect::<Result<Vec<_>>>()?;
        if batch.len() < config.batch {
            return Err(invalid("training stream ended early"));
        }
        let (deg, clean, dct) = stack_batch(&batch)?;
        let lr = config.lr_at(iteration);
        let (out, cache) = module.forward_train(&deg, &dct)?;
        let loss = mse_loss(&out, &clean)?;
        if !loss.is_finite() {
            return Err(Error::NumericFailure { iteration, lr });
        }
        if iteration % config.log_every == 0 || iteration + 1 == config.iterations {
            log.push(LogRow { iteration, loss, lr });
        }
        let grads = module.backward(&cache, &mse_loss_grad(&out, &clean)?)?;
        adam.lr = lr;
        adam_step_model(&mut module, &grads, &mut adam)?;
    }
    if !module.params("").iter().all(|p| p.data.iter().all(|v| v.is_finite())) {
        return Err(Error::NumericFailure {
            iteration: config.iterations,
            lr: config.lr_at(config.iterations),
        });
    }
    Ok(TrainOutcome { module, log })
}

/// Mean feature MSE over pairs: of the degraded features when `module` is
/// `None`, of the enhanced ones otherwise.
pub fn feature_mse(module: Option<&AfdModule>, pairs: &[TrainPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(invalid("no pairs to evaluate"));
    }
    let mut total = 0f64;
    for chunk in pairs.chunks(32) {
        let (deg, clean, dct) = stack_batch(chunk)?;
        let pred = match module {
            Some(m) => m.enhance(&deg, &dct)?,
            None => deg,
        };
        total += mse_loss(&pred, &clean)? as f64 * chunk.len() as f64;
    }
    Ok(total / pairs.len() as f64)
}

/// Degradation applied at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    Clean,
    Qf(u8),
    /// Multi-pass compression. Image `i` draws its qualities from a generator
    /// seeded by `(seed, i)`, so runs with fewer passes apply a prefix of the
    /// same sequence.
    Times { times: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub top1: f64,
    pub predictions: Vec<usize>,
}

pub fn degrade_for_eval(img: &ImageRgb, index: usize, mode: EvalMode) -> Result<ImageRgb> {
    match mode {
        EvalMode::Clean => Ok(img.clone()),
        EvalMode::Qf(q) => jpeg_compress(img, q),
        EvalMode::Times { times, seed } => Ok(jpeg_compress_multi(img, times, item_seed(seed, index as u64))?.image),
    }
}

/// Top-1 of the backbone on degraded images, with the tap features passed
/// through `afd` when given.
pub fn eval_accuracy(
    backbone: &ToyBackbone,
    afd: Option<&AfdModule>,
    images: &[ImageRgb],
    labels: &[usize],
    mode: EvalMode,
) -> Result<EvalResult> {
    if images.len() != labels.len() {
        return Err(shape_mismatch(images.len(), labels.len()));
    }
    if images.is_empty() {
        return Err(invalid("no evaluation images"));
    }
    let tap = afd.map_or(TapDepth::D2, |m| m.tap);
    let mut preds = Vec::with_capacity(images.len());
    for (c, chunk) in images.chunks(32).enumerate() {
        let degraded = chunk
            .iter()
            .enumerate()
            .map(|(i, img)| degrade_for_eval(img, c * 32 + i, mode))
            .collect::<Result<Vec<_>>>()?;
        let inputs: Vec<Tensor> = degraded.iter().map(image_input).collect();
        let mut feats = backbone.extract_features(&Tensor::stack(&inputs)?, tap)?;
        if let Some(m) = afd {
            let grids: Vec<Tensor> = degraded.iter().map(|d| gather_rearrange_dct(d).to_tensor()).collect();
            feats = m.enhance(&feats, &Tensor::stack(&grids)?)?;
        }
        preds.extend(predictions(&backbone.classify_from(tap, &feats)?));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(EvalResult {
        top1: hits as f64 / images.len() as f64,
        predictions: preds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneParams;
    use crate::synth::synth_dataset;

    fn backbone() -> ToyBackbone {
        ToyBackbone::freeze(BackboneParams::random(4, &mut ChaCha8Rng::seed_from_u64(7))).unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            iterations: 3,
            batch: 2,
            patch: 16,
            patches: 4,
            fe_width: 8,
            log_every: 1,
            ..TrainConfig::desk()
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::full().validate().is_ok());
        assert!(TrainConfig::desk().validate().is_ok());
        assert!(TrainConfig { patch: 20, ..TrainConfig::desk() }.validate().is_err());
        assert!(TrainConfig { batch: 0, ..TrainConfig::desk() }.validate().is_err());
        assert!(TrainConfig { patch: 24, tap: TapDepth::D4, ..TrainConfig::desk() }.validate().is_err());
        assert!(TrainConfig { degradation: Degradation::Times(6), ..TrainConfig::desk() }.validate().is_err());
        let p = TrainConfig::full();
        assert_eq!((p.lr_at(7_499), p.lr_at(7_500)), (1e-4, 2e-5));
    }

    #[test]
    fn degradation_text_round_trip() {
        for d in [
            Degradation::Clean,
            Degradation::Qf(10),
            Degradation::QfSet(alloc::vec![25, 18, 7]),
            Degradation::Times(5),
        ] {
            assert_eq!(alloc::format!("{d}").parse::<Degradation>().unwrap(), d);
        }
        for bad in ["qf:0", "times:6", "set:", "jpeg", "clean:1"] {
            assert!(bad.parse::<Degradation>().is_err(), "{bad}");
        }
    }

    #[test]
    fn small_images_are_skipped_and_counted() {
        let bb = backbone();
        let (mut imgs, _) = synth_dataset(2, 2, 16, 1).unwrap();
        imgs.push(ImageRgb::filled(8, 8, [0, 0, 0]));
        let s = make_pairs(&imgs, &bb, &tiny_config(), ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(s.skipped(), 1);
        let only_small = [ImageRgb::filled(8, 8, [0, 0, 0])];
        assert!(make_pairs(&only_small, &bb, &tiny_config(), ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn first_logged_loss_is_degraded_mse() {
        let bb = backbone();
        let (imgs, _) = synth_dataset(2, 2, 16, 1).unwrap();
        let cfg = tiny_config();
        let mut s = make_pairs(&imgs, &bb, &cfg, ChaCha8Rng::seed_from_u64(3)).unwrap();
        let first: Vec<TrainPair> = make_pairs(&imgs, &bb, &cfg, ChaCha8Rng::seed_from_u64(3))
            .unwrap()
            .take(2)
            .collect::<Result<_>>()
            .unwrap();
        let (deg, clean, _) = stack_batch(&first).unwrap();
        let out = train_afd(&mut s, &cfg).unwrap();
        assert_eq!(out.log[0].loss, mse_loss(&deg, &clean).unwrap());
        assert_eq!(out.log.len(), 3);
    }

    #[test]
    fn eval_checks_label_count() {
        let bb = backbone();
        let (imgs, labels) = synth_dataset(2, 2, 16, 1).unwrap();
        assert!(eval_accuracy(&bb, None, &imgs, &labels[..3], EvalMode::Clean).is_err());
    }
}
