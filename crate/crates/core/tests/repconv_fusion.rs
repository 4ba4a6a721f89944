use afd_core::conv::{conv2d, ConvKernel};
use afd_core::repconv::*;
use afd_core::tensor::{relu, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_input(c: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let (b, h, w) = (rng.gen_range(1..3), rng.gen_range(3..10), rng.gen_range(3..10));
    Tensor::uniform([b, c, h, w], 1.0, rng)
}

/// Sum of the three branches, each computed on its own.
fn branch_oracle(block: &RepConvBlock, x: &Tensor) -> Tensor {
    let b1 = conv2d(&conv2d(x, &block.b1_pointwise).unwrap(), &block.b1_spatial).unwrap();
    let b2 = conv2d(&conv2d(x, &block.b2_spatial).unwrap(), &block.b2_pointwise).unwrap();
    let b3 = conv2d(x, &block.b3_pointwise).unwrap();
    b1.add(&b2).unwrap().add(&b3).unwrap()
}

fn identity_1x1(c: usize) -> ConvKernel {
    let mut k = ConvKernel::zeros(c, c, 1, 1, 0);
    for i in 0..c {
        k.weights_mut().set(i, i, 0, 0, 1.0);
    }
    k
}

#[test]
fn fused_block_matches_branches_over_50_seeds() {
    let mut worst = 0f32;
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, d, e) = (rng.gen_range(1..9), rng.gen_range(1..9), rng.gen_range(1..9));
        let block = RepConvBlock::random(c, d, e, &mut rng);
        let fused = fuse_block(&block).unwrap();
        for _ in 0..30 {
            let x = random_input(c, &mut rng);
            let pre = block.pre_activation(&x).unwrap();
            let fused_pre = conv2d(&x, &fused).unwrap();
            worst = worst.max(pre.max_abs_diff(&fused_pre));
            worst = worst.max(block.forward(&x).unwrap().max_abs_diff(&fused_forward(&fused, &x).unwrap()));
            assert!(pre.max_abs_diff(&branch_oracle(&block, &x)) < 1e-5);
        }
    }
    assert!(worst < 1e-4, "max deviation {worst}");
}

#[test]
fn border_pixels_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let block = RepConvBlock::random(3, 4, 5, &mut rng);
        let fused = fuse_block(&block).unwrap();
        let x = Tensor::uniform([1, 3, 6, 7], 2.0, &mut rng);
        let a = block.pre_activation(&x).unwrap();
        let b = conv2d(&x, &fused).unwrap();
        for ch in 0..5 {
            for y in 0..6 {
                for xx in [0, 6] {
                    assert!((a.at(0, ch, y, xx) - b.at(0, ch, y, xx)).abs() < 1e-5);
                }
            }
            for xx in 0..7 {
                for y in [0, 5] {
                    assert!((a.at(0, ch, y, xx) - b.at(0, ch, y, xx)).abs() < 1e-5);
                }
            }
        }
    }
}

#[test]
fn sequential_pointwise_then_spatial() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let k1 = ConvKernel::random(4, 3, 1, 1, 1, &mut rng);
    let k3 = ConvKernel::random(2, 4, 3, 1, 0, &mut rng);
    let x = Tensor::uniform([1, 3, 6, 6], 1.0, &mut rng);
    let fused = fuse_seq_1x1_then_3x3(&k1, &k3).unwrap();
    let seq = conv2d(&conv2d(&x, &k1).unwrap(), &k3).unwrap();
    assert!(conv2d(&x, &fused).unwrap().max_abs_diff(&seq) < 1e-5);

    let plain = ConvKernel::random(3, 3, 3, 1, 1, &mut rng);
    assert_eq!(fuse_seq_1x1_then_3x3(&identity_1x1(3), &plain).unwrap().weights(), plain.weights());

    let zero3 = ConvKernel::zeros(2, 4, 3, 1, 0);
    let f = fuse_seq_1x1_then_3x3(&k1, &zero3).unwrap();
    assert!(f.weights().data().iter().all(|&v| v == 0.0));
    assert_eq!(f.bias(), zero3.bias());
}

#[test]
fn sequential_spatial_then_pointwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let k3 = ConvKernel::random(4, 3, 3, 1, 1, &mut rng);
    let k1 = ConvKernel::random(2, 4, 1, 1, 0, &mut rng);
    let x = Tensor::uniform([1, 3, 6, 6], 1.0, &mut rng);
    let fused = fuse_seq_3x3_then_1x1(&k3, &k1).unwrap();
    let seq = conv2d(&conv2d(&x, &k3).unwrap(), &k1).unwrap();
    assert!(conv2d(&x, &fused).unwrap().max_abs_diff(&seq) < 1e-5);

    let k3 = ConvKernel::random(3, 3, 3, 1, 1, &mut rng);
    assert_eq!(fuse_seq_3x3_then_1x1(&k3, &identity_1x1(3)).unwrap().weights(), k3.weights());

    let mut doubler = identity_1x1(3);
    doubler.weights_mut().set(1, 1, 0, 0, 2.0);
    let f = fuse_seq_3x3_then_1x1(&k3, &doubler).unwrap();
    for ci in 0..3 {
        for t in 0..9 {
            assert_eq!(f.weights().at(1, ci, t / 3, t % 3), 2.0 * k3.weights().at(1, ci, t / 3, t % 3));
            assert_eq!(f.weights().at(0, ci, t / 3, t % 3), k3.weights().at(0, ci, t / 3, t % 3));
        }
    }
}

#[test]
fn centre_embedding() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let k1 = ConvKernel::random(3, 2, 1, 1, 0, &mut rng);
    let k3 = pad_1x1_to_3x3(&k1).unwrap();
    for e in 0..3 {
        for c in 0..2 {
            for t in 0..9 {
                let want = if t == 4 { k1.weights().at(e, c, 0, 0) } else { 0.0 };
                assert_eq!(k3.weights().at(e, c, t / 3, t % 3), want);
            }
        }
    }
    let x = Tensor::uniform([2, 2, 5, 4], 1.0, &mut rng);
    assert!(conv2d(&x, &k3).unwrap().max_abs_diff(&conv2d(&x, &k1).unwrap()) < 1e-6);
    let z = pad_1x1_to_3x3(&ConvKernel::zeros(2, 2, 1, 1, 0)).unwrap();
    assert!(z.weights().data().iter().all(|&v| v == 0.0));
}

#[test]
fn parallel_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ks: Vec<ConvKernel> = (0..3).map(|_| ConvKernel::random(2, 3, 3, 1, 1, &mut rng)).collect();
    assert_eq!(fuse_parallel(&ks[..1]).unwrap(), ks[0]);
    let x = Tensor::uniform([1, 3, 5, 5], 1.0, &mut rng);
    let mut oracle = conv2d(&x, &ks[0]).unwrap();
    for k in &ks[1..] {
        oracle = oracle.add(&conv2d(&x, k).unwrap()).unwrap();
    }
    assert!(conv2d(&x, &fuse_parallel(&ks).unwrap()).unwrap().max_abs_diff(&oracle) < 1e-5);

    let mut neg = ks[0].clone();
    let w = neg.weights().map(|v| -v);
    *neg.weights_mut() = w;
    neg.bias_mut().iter_mut().for_each(|b| *b = -*b);
    let z = fuse_parallel(&[ks[0].clone(), neg]).unwrap();
    assert!(z.weights().data().iter().chain(z.bias()).all(|&v| v == 0.0));
}

#[test]
fn identity_branch_fuses_to_centred_identity() {
    let mut block = RepConvBlock::zeros(3, 2, 3);
    block.b3_pointwise = identity_1x1(3);
    let k = fuse_block(&block).unwrap();
    for e in 0..3 {
        for c in 0..3 {
            for t in 0..9 {
                let want = if t == 4 && e == c { 1.0 } else { 0.0 };
                assert_eq!(k.weights().at(e, c, t / 3, t % 3), want);
            }
        }
    }
    let x = Tensor::uniform([1, 3, 4, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(5));
    assert_eq!(block.forward(&x).unwrap(), relu(&x));
}

#[test]
fn fusing_a_fused_kernel_is_a_no_op() {
    let block = RepConvBlock::random(3, 3, 3, &mut ChaCha8Rng::seed_from_u64(6));
    let k = fuse_block(&block).unwrap();
    assert_eq!(fuse_parallel(std::slice::from_ref(&k)).unwrap(), k);
}

fn fused_flops(c: usize, e: usize, h: usize, w: usize) -> u64 {
    ConvKernel::zeros(e, c, 3, 1, 1).flops(h, w)
}

proptest! {
    #[test]
    fn fused_is_cheaper_when_middle_is_not_narrowest(c in 1usize..64, e in 1usize..64, extra in 0usize..64, h in 1usize..32, w in 1usize..32) {
        let d = c.min(e) + extra;
        let block = RepConvBlock::zeros(c, d, e);
        prop_assert!(fused_flops(c, e, h, w) < block.flops(h, w));
    }

    #[test]
    fn fusion_matches_on_random_geometry(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, d, e) = (rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..6));
        let block = RepConvBlock::random(c, d, e, &mut rng);
        let x = random_input(c, &mut rng);
        let fused = fuse_block(&block).unwrap();
        prop_assert!(block.forward(&x).unwrap().max_abs_diff(&fused_forward(&fused, &x).unwrap()) < 1e-4);
    }
}

/// A one-channel middle makes the branches cheaper than a full 3×3, so the
/// FLOP ordering holds only for `D ≥ min(C, E)`.
#[test]
fn narrow_middle_counterexample() {
    let block = RepConvBlock::zeros(8, 1, 8);
    assert!(fused_flops(8, 8, 16, 16) > block.flops(16, 16));
}

#[test]
fn channel_mismatch_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let k1 = ConvKernel::random(4, 3, 1, 1, 1, &mut rng);
    let k3 = ConvKernel::random(2, 5, 3, 1, 0, &mut rng);
    assert!(fuse_seq_1x1_then_3x3(&k1, &k3).is_err());
    assert!(fuse_parallel(&[]).is_err());
    let mut block = RepConvBlock::random(3, 3, 3, &mut rng);
    block.b2_pointwise = ConvKernel::random(2, 3, 1, 1, 0, &mut rng);
    assert!(fuse_block(&block).is_err());
}
