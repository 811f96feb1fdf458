use std::path::PathBuf;

use pmdef::checkpoint::{decode_batch, decode_model, encode_batch, encode_model};
use pmdef::idx::{parse_cifar_bytes, parse_idx, parse_idx_bytes, write_cifar_bytes, write_idx_bytes, CIFAR_RECORD};
use pmdef::Error;
use pmdef_core::attacks::{run_attack, AttackConfig, AttackKind, TargetMode};
use pmdef_core::nn::{build_model, ModelSpec};
use pmdef_core::Tensor;
use proptest::prelude::*;

fn mnist_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/mnist5k")
}

#[test]
fn bundled_mnist_subset_parses() {
    let dir = mnist_dir();
    let train = parse_idx(&dir.join("train-images-idx3-ubyte.gz"), &dir.join("train-labels-idx1-ubyte.gz")).unwrap();
    let test = parse_idx(&dir.join("t10k-images-idx3-ubyte.gz"), &dir.join("t10k-labels-idx1-ubyte.gz")).unwrap();
    assert_eq!(train.images.shape(), &[4000, 28, 28, 1]);
    assert_eq!(test.images.shape(), &[1000, 28, 28, 1]);
    for d in [&train, &test] {
        let mut counts = [0usize; 10];
        d.labels.iter().for_each(|&l| counts[l] += 1);
        assert!(counts.iter().all(|&c| c == d.len() / 10), "{counts:?}");
    }
    // Re-serialise and re-parse: identical tensors.
    let (img, lab) = write_idx_bytes(&test).unwrap();
    assert_eq!(parse_idx_bytes(&img, &lab, &test.name).unwrap(), test);
}

#[test]
fn swapped_idx_files_are_a_magic_error() {
    let dir = mnist_dir();
    let r = parse_idx(&dir.join("t10k-labels-idx1-ubyte.gz"), &dir.join("t10k-images-idx3-ubyte.gz"));
    assert!(matches!(r, Err(Error::BadMagic { .. })), "{r:?}");
}

#[test]
fn missing_idx_file_is_named() {
    let r = parse_idx(&mnist_dir().join("absent-images"), &mnist_dir().join("absent-labels"));
    match r {
        Err(Error::MissingFile(p)) => assert!(p.ends_with("absent-images")),
        other => panic!("{other:?}"),
    }
}

fn idx_fixture(n: usize, rows: usize, cols: usize, pixels: &[u8], labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let mut img = vec![0, 0, 8, 3];
    for d in [n, rows, cols] {
        img.extend((d as u32).to_be_bytes());
    }
    img.extend_from_slice(pixels);
    let mut lab = vec![0, 0, 8, 1];
    lab.extend((labels.len() as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    (img, lab)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn idx_round_trip_is_exact(n in 1usize..6, rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
        let mut s = seed;
        let mut next = || { s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); (s >> 33) as u8 };
        let pixels: Vec<u8> = (0..n * rows * cols).map(|_| next()).collect();
        let labels: Vec<u8> = (0..n).map(|_| next() % 10).collect();
        let (img, lab) = idx_fixture(n, rows, cols, &pixels, &labels);
        let d = parse_idx_bytes(&img, &lab, "p").unwrap();
        let (img2, lab2) = write_idx_bytes(&d).unwrap();
        prop_assert_eq!(&img2, &img);
        prop_assert_eq!(&lab2, &lab);
        prop_assert_eq!(parse_idx_bytes(&img2, &lab2, "p").unwrap(), d);
    }

    #[test]
    fn corrupted_idx_is_rejected_not_truncated(cut in 0usize..40, flip in 0usize..40) {
        let pixels: Vec<u8> = (0..2 * 3 * 3).map(|i| i as u8 * 13).collect();
        let (img, lab) = idx_fixture(2, 3, 3, &pixels, &[4, 9]);
        // Any shortened image file is an error.
        if cut < img.len() {
            prop_assert!(parse_idx_bytes(&img[..cut], &lab, "p").is_err());
        }
        // A flipped header byte either fails or changes nothing a parser could miss.
        let mut bad = img.clone();
        if flip < 16 {
            bad[flip] ^= 0x40;
            prop_assert!(parse_idx_bytes(&bad, &lab, "p").is_err());
        }
    }

    #[test]
    fn cifar_round_trip_and_truncation(labels in proptest::collection::vec(0u8..10, 1..4), cut in 1usize..CIFAR_RECORD) {
        let mut bytes = Vec::new();
        for (k, &l) in labels.iter().enumerate() {
            bytes.push(l);
            bytes.extend((0..3072).map(|i| ((i * 7 + k * 31) % 256) as u8));
        }
        let d = parse_cifar_bytes(&bytes, "c").unwrap();
        prop_assert_eq!(d.images.shape(), &[labels.len(), 32, 32, 3]);
        prop_assert_eq!(&write_cifar_bytes(&d).unwrap(), &bytes);
        let short = &bytes[..bytes.len() - cut];
        let is_truncated = matches!(parse_cifar_bytes(short, "c"), Err(Error::Truncated { .. }) | Err(Error::Format { .. }));
        prop_assert!(is_truncated);
    }

    #[test]
    fn corrupted_checkpoints_never_load_silently(cut in 0usize..4000, pos in 0usize..4000, bit in 0u8..8) {
        let m = build_model(ModelSpec::dense_autoencoder("ae", &[3, 3, 1], 5, 2, true), 7).unwrap();
        let bytes = encode_model(&m, None).unwrap();
        let cut = cut % bytes.len();
        prop_assert!(decode_model(&bytes[..cut], "p").is_err());
        let mut bad = bytes.clone();
        let pos = pos % bytes.len();
        bad[pos] ^= 1 << bit;
        prop_assert!(decode_model(&bad, "p").is_err());
    }
}

#[test]
fn adversarial_batch_file_round_trip() {
    let clf = build_model(ModelSpec::mlp_classifier("c", &[2, 2, 1], &[4], 3), 5).unwrap();
    let x = Tensor::new(vec![3, 2, 2, 1], (0..12).map(|i| i as f64 / 11.0).collect()).unwrap();
    for attack in [AttackKind::Fgsm { epsilon: 0.1 }, AttackKind::slide_default()] {
        let cfg = AttackConfig::new(attack, TargetMode::GreyBox, 3);
        let batch = run_attack(&cfg, &clf, &x, Some(&[0, 1, 2])).unwrap();
        let bytes = encode_batch(&batch).unwrap();
        assert_eq!(decode_batch(&bytes, "b").unwrap(), batch);
        assert!(matches!(decode_model(&bytes, "b"), Err(Error::BadMagic { .. })));
    }
}
