//! `afd` command line.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
//! Every flag may also be given in a `--config` file as `name=value`
//! (one per line, `#` comments); flags on the command line win.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use afd_core::backbone::{backbone_train, BackboneTrainConfig, TapDepth};
use afd_core::dct_grid::gather_rearrange_dct;
use afd_core::jpeg::{jpeg_compress, jpeg_compress_multi};
use afd_core::params::Parameterized;
use afd_core::stats::{curves_to_csv, drift_curve, sample_pairs};
use afd_core::synth::synth_dataset;
use afd_core::tensor::Tensor;
use afd_core::trainer::{
    eval_accuracy, feature_mse, log_to_csv, make_pairs, train_afd, AfdModule, Degradation, EvalMode, TrainConfig,
};
use clap::{ArgAction, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::dataset::{load_class_tree, load_images, write_class_tree};
use crate::dctg::encode_dctg;
use crate::error::{write_file, AfdError, Result, EXIT_OK, EXIT_USAGE};
use crate::imageio::{encode_pgm, read_image, write_image, GrayImage};
use crate::manifest::{default_manifest_path, Manifest};

#[derive(Parser, Debug)]
#[command(
    name = "afd",
    version,
    about = "JPEG degradation, DCT drift statistics and feature de-drifting pipelines",
    subcommand_required = true,
    arg_required_else_help = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Read default flag values from a key=value file (flags on the command line override it)
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Write the run manifest here instead of next to the primary output
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Simulate JPEG compression of an image, once at a fixed quality or several times at random qualities
    Compress(CompressArgs),
    /// Write the rearranged blockwise DCT of an image as a DCTG file
    Dct(DctArgs),
    /// Sample clean/compressed block pairs and write the DCT-angle vs feature-angle curve as CSV
    Stats(StatsArgs),
    /// Train the small classification backbone on a directory-per-class image tree
    TrainBackbone(TrainBackboneArgs),
    /// Train the drift estimator and enhancement network against a frozen backbone
    TrainAfd(TrainAfdArgs),
    /// Fuse every multi-branch block of a checkpoint's enhancement network for deployment
    Fuse(FuseArgs),
    /// Dump degraded, enhanced and clean feature maps and the drift map of one image as PGM grids
    Enhance(EnhanceArgs),
    /// Top-1 accuracy table over quality factors and compression counts, with and without enhancement
    Eval(EvalArgs),
    /// Generate a labelled synthetic grating dataset as a directory-per-class PNG tree
    Synth(SynthArgs),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QfList(pub Vec<u8>);

fn parse_qf_list(s: &str) -> std::result::Result<QfList, String> {
    let qfs = s
        .split(',')
        .map(|q| match q.trim().parse::<u8>() {
            Ok(v) if (1..=100).contains(&v) => Ok(v),
            _ => Err(format!("{q:?} is not a quality factor in 1-100")),
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(QfList(qfs))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TimesList(pub Vec<usize>);

fn parse_times_list(s: &str) -> std::result::Result<TimesList, String> {
    let ts = s
        .split(',')
        .map(|t| match t.trim().parse::<usize>() {
            Ok(v) if (1..=5).contains(&v) => Ok(v),
            _ => Err(format!("{t:?} is not a compression count in 1-5")),
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(TimesList(ts))
}

fn parse_tap(s: &str) -> std::result::Result<TapDepth, String> {
    s.parse().map_err(|e: afd_core::Error| e.to_string())
}

fn parse_degradation(s: &str) -> std::result::Result<Degradation, String> {
    s.parse().map_err(|e: afd_core::Error| e.to_string())
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct CompressArgs {
    /// Input image (PNG, PPM or PGM)
    pub input: PathBuf,
    /// Output image; format chosen by extension (.png, .ppm, .pgm)
    pub output: PathBuf,
    /// Quality factor of a single compression pass (1-100)
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=100), conflicts_with = "times")]
    pub qf: Option<u8>,
    /// Number of passes (1-5), each at a quality drawn from {25,18,15,10,7}; needs --seed
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..=5))]
    pub times: Option<u64>,
    /// Seed for the quality draws of --times
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct DctArgs {
    /// Input image (PNG, PPM or PGM); sides that are not multiples of 8 are edge-padded
    pub input: PathBuf,
    /// Output DCTG file
    pub output: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct StatsArgs {
    /// Directory of clean images (searched recursively)
    #[arg(long, value_name = "DIR")]
    pub images: PathBuf,
    /// Checkpoint holding the backbone whose first convolution gives the block features
    #[arg(long, value_name = "CKPT")]
    pub backbone: PathBuf,
    /// Comma-separated quality factors, one curve each
    #[arg(long, value_parser = parse_qf_list, default_value = "10,25,50,60")]
    pub qf: QfList,
    /// Block pairs sampled per quality factor
    #[arg(long, default_value_t = 10_000, value_parser = clap::value_parser!(u64).range(1..))]
    pub pairs: u64,
    /// Number of equal-width DCT-angle bins (at least 2)
    #[arg(long, default_value_t = 30, value_parser = clap::value_parser!(u64).range(2..))]
    pub bins: u64,
    /// Sampling seed; the same block positions are used for every quality factor
    #[arg(long)]
    pub seed: u64,
    /// Output CSV (qf,da_bin_center,mean_fa,count)
    #[arg(long, value_name = "CSV")]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct TrainBackboneArgs {
    /// Directory-per-class image tree of square images, sides a multiple of 8 in 32-224
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Passes over the training set
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    pub epochs: u64,
    /// Minibatch size
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u64).range(1..))]
    pub batch: u64,
    /// Adam learning rate
    #[arg(long, default_value_t = 2e-3)]
    pub lr: f32,
    /// Seed for initialisation and shuffling
    #[arg(long)]
    pub seed: u64,
    /// Output checkpoint
    #[arg(long, value_name = "CKPT")]
    pub out: PathBuf,
    /// Optional per-epoch log CSV (epoch,loss,train_accuracy)
    #[arg(long, value_name = "CSV")]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct TrainAfdArgs {
    /// Directory of clean training images (searched recursively, labels unused)
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Checkpoint holding the frozen backbone
    #[arg(long, value_name = "CKPT")]
    pub backbone: PathBuf,
    /// Base recipe: desk (500 iterations, 200 patches of 32 px, QF 10) or full (15000 iterations, 224 px, QF set)
    #[arg(long, default_value = "desk", value_parser = ["desk", "full"])]
    pub preset: String,
    /// Training iterations
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Learning rate before --lr-drop-at
    #[arg(long)]
    pub lr: Option<f32>,
    /// Learning rate from --lr-drop-at on
    #[arg(long)]
    pub lr_after: Option<f32>,
    /// Iteration at which the learning rate drops
    #[arg(long)]
    pub lr_drop_at: Option<usize>,
    /// Pairs per iteration
    #[arg(long)]
    pub batch: Option<usize>,
    /// Patch side in pixels (multiple of 8, of 16 for tap D4)
    #[arg(long)]
    pub patch: Option<usize>,
    /// Number of random patches cropped from the training images
    #[arg(long)]
    pub patches: Option<usize>,
    /// Degradation: clean, qf:N, set:A,B,.. (one random QF per pair) or times:T
    #[arg(long, value_parser = parse_degradation)]
    pub degrade: Option<Degradation>,
    /// Backbone tap whose features are enhanced (D1-D4)
    #[arg(long, value_parser = parse_tap)]
    pub tap: Option<TapDepth>,
    /// Channel width of the enhancement network
    #[arg(long)]
    pub width: Option<usize>,
    /// Log the loss every this many iterations
    #[arg(long)]
    pub log_every: Option<usize>,
    /// Seed for patch sampling, degradation and initialisation
    #[arg(long)]
    pub seed: u64,
    /// Output checkpoint (backbone and enhancement module)
    #[arg(long, value_name = "CKPT")]
    pub out: PathBuf,
    /// Optional training log CSV (iteration,loss,lr)
    #[arg(long, value_name = "CSV")]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct FuseArgs {
    /// Checkpoint with a training-mode enhancement module
    pub input: PathBuf,
    /// Output checkpoint with every block fused and the deploy flag set
    pub output: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct EnhanceArgs {
    /// Input image
    pub input: PathBuf,
    /// Checkpoint holding the backbone
    #[arg(long, value_name = "CKPT")]
    pub backbone: PathBuf,
    /// Checkpoint holding the enhancement module
    #[arg(long, value_name = "CKPT")]
    pub afd: PathBuf,
    /// Compress the input at this quality first (1-100); otherwise the input is taken as degraded
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=100))]
    pub qf: Option<u8>,
    /// Fuse the enhancement network before running it
    #[arg(long, action = ArgAction::SetTrue)]
    pub deploy: bool,
    /// Output directory for degraded.pgm, enhanced.pgm, clean.pgm and fdm.pgm
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct EvalArgs {
    /// Directory-per-class test image tree
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Checkpoint holding the backbone
    #[arg(long, value_name = "CKPT")]
    pub backbone: PathBuf,
    /// Checkpoint holding an enhancement module; adds the "afd" variant
    #[arg(long, value_name = "CKPT")]
    pub afd: Option<PathBuf>,
    /// Fuse the enhancement network before evaluating
    #[arg(long, action = ArgAction::SetTrue)]
    pub deploy: bool,
    /// Comma-separated quality factors of single-pass rows
    #[arg(long, value_parser = parse_qf_list, default_value = "25,18,15,10,7")]
    pub qf: QfList,
    /// Comma-separated compression counts (1-5) of multi-pass rows; needs --seed
    #[arg(long, value_parser = parse_times_list)]
    pub times: Option<TimesList>,
    /// Add a row for uncompressed images
    #[arg(long, action = ArgAction::SetTrue)]
    pub clean: bool,
    /// Seed for the multi-pass quality draws
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output CSV (variant,mode,level,top1)
    #[arg(long, value_name = "CSV")]
    pub out: PathBuf,
    /// Optional per-image CSV (variant,mode,level,index,label,prediction)
    #[arg(long, value_name = "CSV")]
    pub predictions: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct SynthArgs {
    /// Number of classes (2-16)
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    /// Images per class
    #[arg(long, default_value_t = 100)]
    pub per_class: usize,
    /// Image side in pixels
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    /// Generation seed
    #[arg(long)]
    pub seed: u64,
    /// Output directory (class_XX/img_XXXXX.png)
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

/// Parses a `name=value` config file. Names may use `-` or `_`.
pub fn parse_config(text: &str, context: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| AfdError::Usage(format!("{context}:{}: expected name=value", n + 1)))?;
        out.push((k.trim().replace('_', "-"), v.trim().to_string()));
    }
    Ok(out)
}

fn find_config(args: &[OsString]) -> Option<(usize, PathBuf)> {
    let sub = args.iter().skip(1).position(|a| !a.to_string_lossy().starts_with('-'))? + 1;
    let mut iter = args[sub + 1..].iter();
    while let Some(a) = iter.next() {
        let s = a.to_string_lossy();
        if s == "--" {
            break;
        }
        if s == "--config" {
            return iter.next().map(|p| (sub, PathBuf::from(p)));
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some((sub, PathBuf::from(p)));
        }
    }
    None
}

/// Inserts flags from the `--config` file right after the subcommand so that
/// later command-line occurrences override them.
pub fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some((sub, path)) = find_config(&args) else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(&path).map_err(|e| AfdError::io(&path, e))?;
    let entries = parse_config(&text, &path.display().to_string())?;
    let root = Cli::command();
    let name = args[sub].to_string_lossy().into_owned();
    let Some(cmd) = root.find_subcommand(&name) else {
        return Ok(args);
    };
    let mut injected = Vec::new();
    for (key, value) in entries {
        let arg = cmd
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()) && key != "config")
            .ok_or_else(|| AfdError::Usage(format!("{}: unknown setting {key:?} for {name}", path.display())))?;
        if arg.get_action().takes_values() {
            injected.push(OsString::from(format!("--{key}={value}")));
        } else {
            match value.as_str() {
                "true" | "1" | "yes" => injected.push(OsString::from(format!("--{key}"))),
                "false" | "0" | "no" => {}
                _ => return Err(AfdError::Usage(format!("{}: {key} expects true or false", path.display()))),
            }
        }
    }
    let mut out = args[..=sub].to_vec();
    out.extend(injected);
    out.extend_from_slice(&args[sub + 1..]);
    Ok(out)
}

fn manifest_path(common: &Common, output: &Path, is_dir: bool) -> PathBuf {
    common
        .manifest
        .clone()
        .unwrap_or_else(|| default_manifest_path(output, is_dir))
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let matches = match Cli::command().try_get_matches_from(&args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return EXIT_USAGE;
        }
    };
    let mut manifest = Manifest::new("");
    if let Some((name, sub)) = matches.subcommand() {
        manifest.command = name.to_string();
        let cmd = Cli::command();
        let known: Vec<String> = cmd
            .find_subcommand(name)
            .map(|c| c.get_arguments().map(|a| a.get_id().to_string()).collect())
            .unwrap_or_default();
        for id in sub.ids().map(|i| i.as_str().to_string()).filter(|i| known.contains(i)) {
            if let Some(raw) = sub.get_raw(&id) {
                let vals: Vec<String> = raw.map(|v| v.to_string_lossy().into_owned()).collect();
                manifest.set(&id, vals.join(","));
            }
        }
    }
    match dispatch(cli.command, &mut manifest) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command, manifest: &mut Manifest) -> Result<()> {
    match command {
        Command::Compress(a) => compress(a, manifest),
        Command::Dct(a) => dct(a, manifest),
        Command::Stats(a) => stats(a, manifest),
        Command::TrainBackbone(a) => train_backbone_cmd(a, manifest),
        Command::TrainAfd(a) => train_afd_cmd(a, manifest),
        Command::Fuse(a) => fuse(a, manifest),
        Command::Enhance(a) => enhance(a, manifest),
        Command::Eval(a) => eval(a, manifest),
        Command::Synth(a) => synth(a, manifest),
    }
}

fn compress(a: CompressArgs, manifest: &mut Manifest) -> Result<()> {
    let img = read_image(&a.input)?;
    manifest.input("input", &a.input)?;
    let out = match (a.qf, a.times) {
        (Some(q), None) => jpeg_compress(&img, q)?,
        (None, Some(t)) => {
            let seed = a.seed.ok_or_else(|| AfdError::Usage("--times needs --seed".into()))?;
            let m = jpeg_compress_multi(&img, t as usize, seed)?;
            let qfs: Vec<String> = m.qfs.iter().map(u8::to_string).collect();
            manifest.set("applied-qfs", qfs.join(","));
            m.image
        }
        _ => return Err(AfdError::Usage("exactly one of --qf or --times is required".into())),
    };
    write_image(&a.output, &out)?;
    manifest.write(&manifest_path(&a.common, &a.output, false))
}

fn dct(a: DctArgs, manifest: &mut Manifest) -> Result<()> {
    let img = read_image(&a.input)?;
    manifest.input("input", &a.input)?;
    write_file(&a.output, &encode_dctg(&gather_rearrange_dct(&img)))?;
    manifest.write(&manifest_path(&a.common, &a.output, false))
}

fn stats(a: StatsArgs, manifest: &mut Manifest) -> Result<()> {
    let (images, _) = load_images(&a.images)?;
    manifest.input("images", &a.images)?;
    let backbone = Checkpoint::load(&a.backbone)?.backbone()?;
    manifest.input("backbone", &a.backbone)?;
    let mut curves = Vec::new();
    for &qf in &a.qf.0 {
        let pairs = sample_pairs(&images, qf, a.pairs as usize, a.seed)?;
        let curve = drift_curve(&pairs, &backbone, a.bins as usize)?;
        let rho = curve.spearman().map_or("n/a".to_string(), |r| format!("{r:.4}"));
        println!(
            "qf={qf} pairs={} skipped={} mean_fa={:.6} spearman={rho}",
            curve.pairs_used, curve.skipped, curve.mean_fa
        );
        curves.push(curve);
    }
    write_file(&a.out, curves_to_csv(&curves).as_bytes())?;
    manifest.write(&manifest_path(&a.common, &a.out, false))
}

fn train_backbone_cmd(a: TrainBackboneArgs, manifest: &mut Manifest) -> Result<()> {
    let set = load_class_tree(&a.data)?;
    manifest.input("data", &a.data)?;
    let config = BackboneTrainConfig {
        epochs: a.epochs as usize,
        batch: a.batch as usize,
        lr: a.lr,
        seed: a.seed,
    };
    let (model, log) = backbone_train(&set.images, &set.labels, &config)?;
    let mut csv = String::from("epoch,loss,train_accuracy\n");
    for row in &log {
        csv.push_str(&format!("{},{:.6},{:.6}\n", row.epoch, row.loss, row.train_accuracy));
        println!("{row}");
    }
    let mut meta = BTreeMap::new();
    meta.insert("classes".to_string(), set.class_names.join(","));
    meta.insert("backbone.epochs".to_string(), a.epochs.to_string());
    meta.insert("backbone.batch".to_string(), a.batch.to_string());
    meta.insert("backbone.lr".to_string(), a.lr.to_string());
    meta.insert("backbone.seed".to_string(), a.seed.to_string());
    Checkpoint::from_models(Some(&model), None, meta).save(&a.out)?;
    if let Some(path) = &a.log {
        write_file(path, csv.as_bytes())?;
    }
    manifest.write(&manifest_path(&a.common, &a.out, false))
}

fn train_config(a: &TrainAfdArgs) -> Result<TrainConfig> {
    let base = if a.preset == "full" { TrainConfig::full() } else { TrainConfig::desk() };
    let config = TrainConfig {
        iterations: a.iterations.unwrap_or(base.iterations),
        lr: a.lr.unwrap_or(base.lr),
        lr_after: a.lr_after.unwrap_or(base.lr_after),
        lr_drop_at: a.lr_drop_at.unwrap_or(base.lr_drop_at),
        batch: a.batch.unwrap_or(base.batch),
        patch: a.patch.unwrap_or(base.patch),
        patches: a.patches.unwrap_or(base.patches),
        degradation: a.degrade.clone().unwrap_or(base.degradation),
        tap: a.tap.unwrap_or(base.tap),
        fe_width: a.width.unwrap_or(base.fe_width),
        log_every: a.log_every.unwrap_or(base.log_every),
        seed: a.seed,
    };
    config.validate().map_err(|e| AfdError::Usage(e.to_string()))?;
    Ok(config)
}

pub fn train_config_metadata(c: &TrainConfig) -> BTreeMap<String, String> {
    [
        ("train.iterations", c.iterations.to_string()),
        ("train.lr", c.lr.to_string()),
        ("train.lr_after", c.lr_after.to_string()),
        ("train.lr_drop_at", c.lr_drop_at.to_string()),
        ("train.batch", c.batch.to_string()),
        ("train.patch", c.patch.to_string()),
        ("train.patches", c.patches.to_string()),
        ("train.degrade", c.degradation.to_string()),
        ("train.tap", c.tap.to_string()),
        ("train.log_every", c.log_every.to_string()),
        ("train.seed", c.seed.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

fn train_afd_cmd(a: TrainAfdArgs, manifest: &mut Manifest) -> Result<()> {
    let config = train_config(&a)?;
    for (k, v) in train_config_metadata(&config) {
        manifest.set(&format!("resolved.{k}"), v);
    }
    let (images, _) = load_images(&a.data)?;
    manifest.input("data", &a.data)?;
    let source = Checkpoint::load(&a.backbone)?;
    let backbone = source.backbone()?;
    manifest.input("backbone", &a.backbone)?;
    let mut stream = make_pairs(&images, &backbone, &config, ChaCha8Rng::seed_from_u64(config.seed))?;
    if stream.skipped() > 0 {
        eprintln!("skipped {} images smaller than {} px", stream.skipped(), config.patch);
    }
    let pool = stream.pool_pairs(config.seed)?;
    let before = feature_mse(None, &pool)?;
    let outcome = train_afd(&mut stream, &config)?;
    let after = feature_mse(Some(&outcome.module), &pool)?;
    println!(
        "feature_mse_before={before:.6} feature_mse_after={after:.6} ratio={:.4}",
        after / before
    );
    let mut meta = source.metadata.clone();
    meta.extend(train_config_metadata(&config));
    Checkpoint::from_models(Some(&backbone), Some(&outcome.module), meta).save(&a.out)?;
    if let Some(path) = &a.log {
        write_file(path, log_to_csv(&outcome.log).as_bytes())?;
    }
    manifest.write(&manifest_path(&a.common, &a.out, false))
}

fn fuse(a: FuseArgs, manifest: &mut Manifest) -> Result<()> {
    let ckpt = Checkpoint::load(&a.input)?;
    manifest.input("input", &a.input)?;
    let module = ckpt.afd()?;
    let fused = module.to_deploy()?;
    let backbone = if ckpt.has_backbone() { Some(ckpt.backbone()?) } else { None };
    println!(
        "fe_params train={} deploy={} afd_params train={} deploy={}",
        module.fe.param_count(),
        fused.fe.param_count(),
        module.param_count(),
        fused.param_count()
    );
    Checkpoint::from_models(backbone.as_ref(), Some(&fused), ckpt.metadata.clone()).save(&a.output)?;
    manifest.write(&manifest_path(&a.common, &a.output, false))
}

fn load_afd(path: &Path, deploy: bool) -> Result<AfdModule> {
    let module = Checkpoint::load(path)?.afd()?;
    if deploy {
        Ok(module.to_deploy()?)
    } else {
        Ok(module)
    }
}

/// Channels tiled row-major into a near-square grid, values mapped linearly
/// from `[lo, hi]` to `[0, 255]`.
pub fn feature_grid(t: &Tensor, lo: f32, hi: f32) -> GrayImage {
    let [_, c, h, w] = t.dims();
    let cols = (1..=c).find(|k| k * k >= c).unwrap_or(1);
    let rows = c.div_ceil(cols);
    let (width, height) = (cols * w, rows * h);
    let mut data = vec![0u8; width * height];
    let span = if hi > lo { hi - lo } else { 1.0 };
    for ch in 0..c {
        let (gy, gx) = (ch / cols * h, ch % cols * w);
        for (i, &v) in t.plane(0, ch).iter().enumerate() {
            let level = ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8;
            data[(gy + i / w) * width + gx + i % w] = level;
        }
    }
    GrayImage { width, height, data }
}

fn enhance(a: EnhanceArgs, manifest: &mut Manifest) -> Result<()> {
    let img = read_image(&a.input)?;
    manifest.input("input", &a.input)?;
    let backbone = Checkpoint::load(&a.backbone)?.backbone()?;
    manifest.input("backbone", &a.backbone)?;
    let module = load_afd(&a.afd, a.deploy)?;
    manifest.input("afd", &a.afd)?;
    let degraded = match a.qf {
        Some(q) => jpeg_compress(&img, q)?,
        None => img.clone(),
    };
    let clean = backbone.extract_image(&img, module.tap)?;
    let feats = backbone.extract_image(&degraded, module.tap)?;
    let dct = gather_rearrange_dct(&degraded).to_tensor();
    let enhanced = module.enhance(&feats, &dct)?;
    let fdm = module.drift_map(&dct)?;
    let all = [&clean, &feats, &enhanced];
    let lo = all.iter().flat_map(|t| t.data()).fold(f32::INFINITY, |m, &v| m.min(v));
    let hi = all.iter().flat_map(|t| t.data()).fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    let dir = &a.out_dir;
    write_file(&dir.join("clean.pgm"), &encode_pgm(&feature_grid(&clean, lo, hi)))?;
    write_file(&dir.join("degraded.pgm"), &encode_pgm(&feature_grid(&feats, lo, hi)))?;
    write_file(&dir.join("enhanced.pgm"), &encode_pgm(&feature_grid(&enhanced, lo, hi)))?;
    write_file(&dir.join("fdm.pgm"), &encode_pgm(&feature_grid(&fdm, 0.0, 1.0)))?;
    println!(
        "mse_degraded={:.6} mse_enhanced={:.6}",
        afd_core::tensor::mse_loss(&feats, &clean)?,
        afd_core::tensor::mse_loss(&enhanced, &clean)?
    );
    manifest.write(&manifest_path(&a.common, dir, true))
}

fn eval(a: EvalArgs, manifest: &mut Manifest) -> Result<()> {
    let set = load_class_tree(&a.data)?;
    manifest.input("data", &a.data)?;
    let backbone = Checkpoint::load(&a.backbone)?.backbone()?;
    manifest.input("backbone", &a.backbone)?;
    let module = match &a.afd {
        Some(p) => {
            let m = load_afd(p, a.deploy)?;
            manifest.input("afd", p)?;
            Some(m)
        }
        None => None,
    };
    let mut modes: Vec<(String, String, EvalMode)> = Vec::new();
    if a.clean {
        modes.push(("clean".into(), "0".into(), EvalMode::Clean));
    }
    for &q in &a.qf.0 {
        modes.push(("qf".into(), q.to_string(), EvalMode::Qf(q)));
    }
    if let Some(ts) = &a.times {
        let seed = a.seed.ok_or_else(|| AfdError::Usage("--times needs --seed".into()))?;
        for &t in &ts.0 {
            modes.push(("times".into(), t.to_string(), EvalMode::Times { times: t, seed }));
        }
    }
    let mut variants: Vec<(&str, Option<&AfdModule>)> = vec![("none", None)];
    if let Some(m) = &module {
        variants.push(("afd", Some(m)));
    }
    let mut table = String::from("variant,mode,level,top1\n");
    let mut preds = String::from("variant,mode,level,index,label,prediction\n");
    for (variant, m) in &variants {
        for (mode, level, em) in &modes {
            let r = eval_accuracy(&backbone, *m, &set.images, &set.labels, *em)?;
            table.push_str(&format!("{variant},{mode},{level},{:.6}\n", r.top1));
            println!("{variant} {mode}={level} top1={:.4}", r.top1);
            for (i, (p, l)) in r.predictions.iter().zip(&set.labels).enumerate() {
                preds.push_str(&format!("{variant},{mode},{level},{i},{l},{p}\n"));
            }
        }
    }
    write_file(&a.out, table.as_bytes())?;
    if let Some(p) = &a.predictions {
        write_file(p, preds.as_bytes())?;
    }
    manifest.write(&manifest_path(&a.common, &a.out, false))
}

fn synth(a: SynthArgs, manifest: &mut Manifest) -> Result<()> {
    let (images, labels) =
        synth_dataset(a.classes, a.per_class, a.size, a.seed).map_err(|e| AfdError::Usage(e.to_string()))?;
    write_class_tree(&a.out_dir, &images, &labels)?;
    manifest.write(&manifest_path(&a.common, &a.out_dir, true))
}
