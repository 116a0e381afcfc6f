//! Checkpoint and CIFAR binary I/O.

use lnlora_core::data::{read_cifar100_binary, read_cifar10_binary};
use lnlora_core::vit::{ViTConfig, ViTParams};
use lnlora_core::{inject_adapters, AdapterConfig, Checkpoint, Error};
use proptest::prelude::*;

const PLANE: usize = 32 * 32;

/// A CIFAR-10 record whose pixel at (row, col) in channel c is
/// `(row + 2·col + 50·c) mod 256`.
fn cifar_record(label: u8, label_bytes: usize) -> Vec<u8> {
    let mut rec = vec![0u8; label_bytes - 1];
    rec.push(label);
    for c in 0..3 {
        for p in 0..PLANE {
            let (row, col) = (p / 32, p % 32);
            rec.push(((row + 2 * col + 50 * c) % 256) as u8);
        }
    }
    rec
}

fn expected_pixel(row: usize, col: usize, c: usize) -> f64 {
    ((row + 2 * col + 50 * c) % 256) as f64 / 255.0
}

#[test]
fn cifar10_fixture_decodes_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("data_batch_1.bin");
    let b = dir.path().join("data_batch_2.bin");
    std::fs::write(&a, [cifar_record(3, 1), cifar_record(9, 1)].concat()).unwrap();
    std::fs::write(&b, cifar_record(0, 1)).unwrap();
    let set = read_cifar10_binary(&[&a, &b]).unwrap();
    assert_eq!(set.labels, vec![3, 9, 0]);
    assert_eq!(set.images.shape(), &[3, 32, 32, 3]);
    let d = set.images.data();
    for n in 0..3 {
        for row in [0, 5, 31] {
            for col in [0, 17, 31] {
                for c in 0..3 {
                    let idx = ((n * 32 + row) * 32 + col) * 3 + c;
                    assert_eq!(d[idx], expected_pixel(row, col, c));
                }
            }
        }
    }
}

#[test]
fn cifar100_uses_the_fine_label() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("train.bin");
    let mut rec = cifar_record(87, 2);
    rec[0] = 13;
    std::fs::write(&p, rec).unwrap();
    let set = read_cifar100_binary(&[&p]).unwrap();
    assert_eq!(set.labels, vec![87]);
    assert_eq!(set.num_classes, 100);
}

#[test]
fn cifar_errors_never_yield_partial_sets() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.bin");
    std::fs::write(&good, cifar_record(1, 1)).unwrap();

    let trunc = dir.path().join("trunc.bin");
    let mut bytes = [cifar_record(1, 1), cifar_record(2, 1)].concat();
    bytes.pop();
    std::fs::write(&trunc, bytes).unwrap();
    match read_cifar10_binary(&[&good, &trunc]) {
        Err(Error::Format(m)) => assert!(m.contains("trunc.bin")),
        other => panic!("expected format error, got {other:?}"),
    }

    let bad = dir.path().join("bad.bin");
    std::fs::write(&bad, [cifar_record(4, 1), cifar_record(10, 1)].concat()).unwrap();
    assert!(matches!(
        read_cifar10_binary(&[&good, &bad]),
        Err(Error::CorruptRecord {
            index: 2,
            label: 10,
            max: 9
        })
    ));

    let missing = dir.path().join("missing.bin");
    assert!(matches!(read_cifar10_binary(&[&missing]), Err(Error::Io { .. })));
}

#[test]
fn vit_small_checkpoint_round_trip_is_bitwise() {
    let params = ViTParams::init(ViTConfig::vit_small(10), 3).unwrap();
    let ck = Checkpoint::from_vit(&params);
    let bytes = ck.encode().unwrap();
    let back = Checkpoint::decode(&bytes).unwrap();
    assert_eq!(back.encode().unwrap(), bytes);
    assert_eq!(back.to_vit().unwrap(), params);
}

fn small_checkpoint() -> Checkpoint {
    let arch = ViTConfig {
        image_size: 4,
        channels: 1,
        patch_size: 2,
        embed_dim: 4,
        depth: 1,
        num_heads: 1,
        mlp_ratio: 1,
        num_classes: 2,
    };
    let mut base = ViTParams::init(arch, 1).unwrap();
    let digest = Checkpoint::from_vit(&base).digest().unwrap();
    let ad = inject_adapters(&mut base, &AdapterConfig::full_lora_at(1), 2).unwrap();
    Checkpoint::from_adapters(&ad, &digest)
}

#[test]
fn every_truncation_is_rejected() {
    let bytes = small_checkpoint().encode().unwrap();
    for len in 0..bytes.len() {
        match Checkpoint::decode(&bytes[..len]) {
            Err(Error::NotACheckpoint | Error::Truncated { .. } | Error::MalformedCheckpoint(_)) => {}
            other => panic!("prefix of {len} bytes: {other:?}"),
        }
    }
    assert!(Checkpoint::decode(&bytes).is_ok());
}

#[test]
fn file_round_trip_and_overwrite_protection() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    let ck = small_checkpoint();
    ck.write(&path, false).unwrap();
    assert!(ck.write(&path, false).is_err());
    ck.write(&path, true).unwrap();
    assert_eq!(Checkpoint::read(&path).unwrap(), ck);
    assert_eq!(lnlora_core::checkpoint::digest_bytes(&std::fs::read(&path).unwrap()), ck.digest().unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    /// Flipping any byte either still decodes (payload bytes are arbitrary
    /// f64s) or fails with a typed error; decoding never panics.
    #[test]
    fn corrupted_bytes_fail_cleanly(pos in any::<prop::sample::Index>(), xor in 1u8..=255) {
        let mut bytes = small_checkpoint().encode().unwrap();
        let i = pos.index(bytes.len());
        bytes[i] ^= xor;
        let _ = Checkpoint::decode(&bytes);
    }
}
