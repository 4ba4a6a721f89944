use std::collections::BTreeMap;

use afd::checkpoint::{Checkpoint, NamedTensor};
use afd::dctg::{decode_dctg, encode_dctg};
use afd_core::backbone::{BackboneParams, TapDepth, ToyBackbone};
use afd_core::dct_grid::gather_rearrange_dct;
use afd_core::image::ImageRgb;
use afd_core::trainer::AfdModule;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sample(deploy: bool) -> Checkpoint {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let backbone = ToyBackbone::freeze(BackboneParams::random(3, &mut rng)).unwrap();
    let mut module = AfdModule::new(TapDepth::D3, 8, &mut rng);
    module.fe.head = afd_core::conv::ConvKernel::random(32, 8, 1, 1, 0, &mut rng);
    if deploy {
        module = module.to_deploy().unwrap();
    }
    let meta = BTreeMap::from([("seed".to_string(), "1".to_string())]);
    Checkpoint::from_models(Some(&backbone), Some(&module), meta)
}

#[test]
fn round_trip_is_bit_exact() {
    for deploy in [false, true] {
        let ckpt = sample(deploy);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.afdm");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, ckpt);
        assert_eq!(loaded.encode(), std::fs::read(&path).unwrap());

        let module = loaded.afd().unwrap();
        assert_eq!((module.tap, module.is_deploy()), (TapDepth::D3, deploy));
        let again = Checkpoint::from_models(Some(&loaded.backbone().unwrap()), Some(&module), loaded.metadata.clone());
        assert_eq!(again.encode(), ckpt.encode());
    }
}

#[test]
fn backbone_only_checkpoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let backbone = ToyBackbone::freeze(BackboneParams::random(4, &mut rng)).unwrap();
    let ckpt = Checkpoint::from_models(Some(&backbone), None, BTreeMap::new());
    let back = Checkpoint::decode(&ckpt.encode(), "t").unwrap();
    assert_eq!(back.backbone().unwrap().params(), backbone.params());
    assert!(back.afd().is_err());
}

#[test]
fn unknown_and_duplicate_names_are_rejected() {
    let mut ckpt = sample(false);
    ckpt.tensors.push(NamedTensor { name: "afd.extra".into(), dims: vec![1], data: vec![0.0] });
    let err = Checkpoint::decode(&ckpt.encode(), "t").unwrap_err();
    assert!(err.to_string().contains("unknown tensor name"), "{err}");

    let mut ckpt = sample(false);
    let first = ckpt.tensors[0].clone();
    ckpt.tensors.push(first);
    assert!(Checkpoint::decode(&ckpt.encode(), "t").is_err());

    let mut ckpt = sample(false);
    ckpt.tensors[0].name = "unrelated".into();
    assert!(Checkpoint::decode(&ckpt.encode(), "t").is_err());
}

#[test]
fn corrupt_bytes_are_rejected() {
    let bytes = sample(true).encode();
    for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(Checkpoint::decode(&bytes[..cut], "t").is_err(), "cut {cut}");
    }
    let mut long = bytes.clone();
    long.push(0);
    assert!(Checkpoint::decode(&long, "t").is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::decode(&bad, "t").is_err());
    let mut bad = bytes;
    bad[4] = 9;
    assert!(Checkpoint::decode(&bad, "t").is_err());
}

#[test]
fn mismatched_dims_are_rejected() {
    let mut ckpt = sample(false);
    let t = &mut ckpt.tensors[0];
    t.dims[0] += 1;
    t.data.extend(std::iter::repeat(0.0).take(t.data.len() / (t.dims[0] - 1)));
    assert!(Checkpoint::decode(&ckpt.encode(), "t").is_err());
}

proptest! {
    #[test]
    fn dctg_round_trip(seed in any::<u64>(), w in 1usize..40, h in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = ImageRgb::new(w, h, (0..w * h * 3).map(|_| rng.gen()).collect()).unwrap();
        let grid = gather_rearrange_dct(&img);
        let bytes = encode_dctg(&grid);
        prop_assert_eq!(&bytes[..4], b"DCTG");
        let words: Vec<u32> = bytes[4..20].chunks(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
        prop_assert_eq!(&words[1..], &[grid.blocks_h() as u32, grid.blocks_w() as u32, 192]);
        prop_assert_eq!(bytes.len(), 20 + 4 * 192 * grid.blocks_h() * grid.blocks_w());
        let first = f32::from_le_bytes(bytes[20..24].try_into().unwrap());
        prop_assert_eq!(first, grid.get(0, 0, 0));
        let back = decode_dctg(&bytes, "t").unwrap();
        prop_assert_eq!(encode_dctg(&back), bytes.clone());
        prop_assert!(decode_dctg(&bytes[..bytes.len() - 1], "t").is_err());
    }
}
