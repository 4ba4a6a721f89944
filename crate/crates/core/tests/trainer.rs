use afd_core::backbone::{BackboneParams, ToyBackbone};
use afd_core::error::Error;
use afd_core::synth::synth_dataset;
use afd_core::tensor::Tensor;
use afd_core::trainer::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn backbone() -> ToyBackbone {
    ToyBackbone::freeze(BackboneParams::random(4, &mut ChaCha8Rng::seed_from_u64(11))).unwrap()
}

fn small_config(degradation: Degradation) -> TrainConfig {
    TrainConfig {
        iterations: 6,
        batch: 4,
        patch: 16,
        patches: 24,
        fe_width: 8,
        log_every: 2,
        degradation,
        seed: 5,
        ..TrainConfig::desk()
    }
}

fn variance(t: &Tensor) -> f64 {
    let n = t.len() as f64;
    let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    t.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n
}

#[test]
fn near_lossless_pairs_are_close_to_clean() {
    let bb = backbone();
    let (images, _) = synth_dataset(4, 4, 32, 1).unwrap();
    let cfg = small_config(Degradation::Qf(100));
    let stream = make_pairs(&images, &bb, &cfg, ChaCha8Rng::seed_from_u64(2)).unwrap();
    let pairs = stream.pool_pairs(3).unwrap();
    let var = pairs.iter().map(|p| variance(&p.clean)).sum::<f64>() / pairs.len() as f64;
    let mse = feature_mse(None, &pairs).unwrap();
    assert!(mse < 1e-2 * var, "{mse} vs {var}");
    assert!(pairs.iter().all(|p| p.qfs == [100] && p.dct.dims() == [1, 192, 2, 2]));
}

#[test]
fn stream_is_reproducible() {
    let bb = backbone();
    let (images, _) = synth_dataset(3, 3, 32, 2).unwrap();
    let cfg = small_config(Degradation::QfSet(vec![10, 25, 50]));
    let take = |seed| -> Vec<TrainPair> {
        make_pairs(&images, &bb, &cfg, ChaCha8Rng::seed_from_u64(seed))
            .unwrap()
            .take(10)
            .collect::<Result<_, _>>()
            .unwrap()
    };
    assert_eq!(take(4), take(4));
    assert_ne!(take(4), take(5));
}

#[test]
fn repeated_compression_drifts_further() {
    let bb = backbone();
    let (images, _) = synth_dataset(4, 4, 32, 3).unwrap();
    let mse = |d| {
        let cfg = small_config(d);
        let stream = make_pairs(&images, &bb, &cfg, ChaCha8Rng::seed_from_u64(6)).unwrap();
        feature_mse(None, &stream.pool_pairs(7).unwrap()).unwrap()
    };
    let (once, five) = (mse(Degradation::Times(1)), mse(Degradation::Times(5)));
    assert!(five > once, "{five} <= {once}");
}

#[test]
fn training_is_deterministic_and_logged() {
    let bb = backbone();
    let (images, _) = synth_dataset(3, 3, 32, 4).unwrap();
    let cfg = small_config(Degradation::Qf(10));
    let run = || {
        let mut s = make_pairs(&images, &bb, &cfg, ChaCha8Rng::seed_from_u64(8)).unwrap();
        train_afd(&mut s, &cfg).unwrap()
    };
    let a = run();
    assert_eq!(a, run());
    let iters: Vec<usize> = a.log.iter().map(|r| r.iteration).collect();
    assert_eq!(iters, [0, 2, 4, 5]);
    let csv = log_to_csv(&a.log);
    assert!(csv.starts_with("iteration,loss,lr\n0,"));
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn training_reduces_feature_error() {
    let bb = backbone();
    let (images, _) = synth_dataset(4, 6, 32, 5).unwrap();
    let cfg = TrainConfig { iterations: 60, batch: 4, patch: 16, patches: 48, fe_width: 8, seed: 1, ..TrainConfig::desk() };
    let mut s = make_pairs(&images, &bb, &cfg, ChaCha8Rng::seed_from_u64(9)).unwrap();
    let pool = s.pool_pairs(10).unwrap();
    let before = feature_mse(None, &pool).unwrap();
    let out = train_afd(&mut s, &cfg).unwrap();
    assert!(feature_mse(Some(&out.module), &pool).unwrap() < before);
}

#[test]
fn non_finite_loss_aborts() {
    let bb = backbone();
    let (images, _) = synth_dataset(2, 2, 32, 6).unwrap();
    let cfg = small_config(Degradation::Qf(10));
    let stream = make_pairs(&images, &bb, &cfg, ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut poisoned = stream.map(|p| {
        p.map(|mut pair| {
            pair.degraded = pair.degraded.map(|_| f32::NAN);
            pair
        })
    });
    match train_afd(&mut poisoned, &cfg) {
        Err(Error::NumericFailure { iteration, .. }) => assert_eq!(iteration, 0),
        other => panic!("expected numeric failure, got {other:?}"),
    }
}

#[test]
fn short_stream_is_an_error() {
    let cfg = small_config(Degradation::Qf(10));
    assert!(train_afd(&mut std::iter::empty(), &cfg).is_err());
}
