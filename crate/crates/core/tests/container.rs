use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssvep_adapt::alignment::compute_reference;
use ssvep_adapt::container::*;
use ssvep_adapt::nnet::{Architecture, ModelParams};
use ssvep_adapt::preprocess::{EpochSet, Stage};
use ssvep_adapt::Error;

fn epochs(seed: u64, n: usize, nb: usize, nc: usize, np: usize, labeled: bool) -> EpochSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * nb * nc * np).map(|_| rng.gen_range(-5.0..5.0)).collect();
    let labels = labeled.then(|| (0..n).map(|i| i % 4).collect());
    let stage = if nb == 1 { Stage::Raw } else { Stage::Banded };
    EpochSet::new(data, [n, nb, nc, np], labels, 250.0, format!("S{seed}"), stage).unwrap()
}

fn header_len(bytes: &[u8]) -> usize {
    u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn epochs_round_trip_byte_identically(
        seed in 0u64..1000, n in 1usize..6, nb in 1usize..4, nc in 1usize..5, np in 1usize..40, labeled: bool,
    ) {
        let set = epochs(seed, n, nb, nc, np, labeled);
        let bytes = encode_epochs(&set).unwrap();
        let back = decode_epochs(&bytes).unwrap();
        prop_assert_eq!(&back, &set);
        prop_assert_eq!(encode_epochs(&back).unwrap(), bytes);
    }

    #[test]
    fn truncation_is_reported(seed in 0u64..100, cut in 1usize..200) {
        let bytes = encode_epochs(&epochs(seed, 2, 2, 3, 10, true)).unwrap();
        let cut = cut.min(bytes.len() - 1);
        let short = &bytes[..bytes.len() - cut];
        prop_assert!(decode_epochs(short).is_err());
    }
}

#[test]
fn reference_round_trips() {
    let set = epochs(3, 8, 2, 3, 30, false);
    let r = compute_reference(&set).unwrap();
    let bytes = encode_reference(&r).unwrap();
    let back = decode_reference(&bytes).unwrap();
    assert_eq!(back, r);
    assert_eq!(encode_reference(&back).unwrap(), bytes);
    assert_eq!(peek_kind(&bytes).unwrap(), Kind::Reference);
}

#[test]
fn checkpoint_round_trips() {
    let mut arch = Architecture::new(3, 9, 250, 8);
    arch.input_scale = 0.37;
    let p = ModelParams::init(arch, 12).unwrap();
    let bytes = encode_checkpoint(&p).unwrap();
    let back = decode_checkpoint(&bytes).unwrap();
    assert_eq!(back, p);
    assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    let via_artifact = encode_artifact(&decode_artifact(&bytes).unwrap()).unwrap();
    assert_eq!(via_artifact, bytes);
}

#[test]
fn payload_size_follows_the_shape() {
    let n = 4;
    let set = epochs(1, n, 3, 9, 250, false);
    let bytes = encode_epochs(&set).unwrap();
    assert_eq!(&bytes[..8], MAGIC);
    let payload = bytes.len() - 12 - header_len(&bytes);
    assert_eq!(payload, 8 * n * 3 * 9 * 250);
    let labeled = encode_epochs(&epochs(1, n, 3, 9, 250, true)).unwrap();
    assert_eq!(labeled.len() - 12 - header_len(&labeled), 8 * n * 3 * 9 * 250 + 4 * n);
}

#[test]
fn malformed_inputs_are_errors() {
    let bytes = encode_epochs(&epochs(2, 2, 2, 2, 5, true)).unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_epochs(&bad), Err(Error::BadMagic)));
    assert!(matches!(decode_epochs(&bytes[..bytes.len() - 3]), Err(Error::TruncatedPayload(_))));
    let mut long = bytes.clone();
    long.push(0);
    assert!(decode_epochs(&long).is_err());
    assert!(decode_reference(&bytes).is_err());
    assert!(decode_epochs(&bytes[..5]).is_err());
}

#[test]
fn files_round_trip() {
    let dir = std::env::temp_dir().join(format!("ssvep-container-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("e.ssvep");
    let set = epochs(9, 3, 2, 2, 7, true);
    save(&path, &Artifact::Epochs(set.clone())).unwrap();
    assert_eq!(load_epochs(&path).unwrap(), set);
    assert!(load_checkpoint(&path).is_err());
    std::fs::remove_dir_all(&dir).unwrap();
}
