use std::path::{Path, PathBuf};

use lmser::data::{apply_mask, load_idx, load_mnist, masked_mse, split_paths, Batcher, MaskSpec, Split};
use lmser::{Error, Tensor};
use proptest::prelude::*;

fn idx_images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
    let mut b = vec![0, 0, 8, 3];
    for d in [n, rows, cols] {
        b.extend_from_slice(&d.to_be_bytes());
    }
    b.extend_from_slice(pixels);
    b
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut b = vec![0, 0, 8, 1];
    b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    b.extend_from_slice(labels);
    b
}

fn write_pair(dir: &Path, images: &[u8], labels: &[u8]) -> (PathBuf, PathBuf) {
    let (ip, lp) = (dir.join("img"), dir.join("lab"));
    std::fs::write(&ip, images).unwrap();
    std::fs::write(&lp, labels).unwrap();
    (ip, lp)
}

#[test]
fn decodes_header_and_scales_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = write_pair(dir.path(), &idx_images(2, 2, 3, &[0, 255, 51, 102, 0, 0, 255, 255, 255, 0, 1, 2]), &idx_labels(&[7, 3]));
    let ds = load_idx(&ip, &lp).unwrap();
    assert_eq!(ds.images.shape(), &[2, 1, 2, 3]);
    assert_eq!(ds.labels, vec![7, 3]);
    assert_eq!(ds.images.data()[0], 0.0);
    assert_eq!(ds.images.data()[1], 1.0);
    assert_eq!(ds.images.data()[2], 0.2);
}

#[test]
fn wrong_magic_names_both_values() {
    let dir = tempfile::tempdir().unwrap();
    let mut img = idx_images(1, 1, 1, &[0]);
    img[3] = 1;
    let (ip, lp) = write_pair(dir.path(), &img, &idx_labels(&[0]));
    match load_idx(&ip, &lp) {
        Err(Error::Format(msg)) => assert!(msg.contains("2049") && msg.contains("2051"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn truncation_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let full = idx_images(2, 2, 2, &[1; 8]);
    for cut in [2, 10, full.len() - 1] {
        let (ip, lp) = write_pair(dir.path(), &full[..cut], &idx_labels(&[0, 1]));
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format(_))), "cut {cut}");
    }
    let (ip, lp) = write_pair(dir.path(), &full, &idx_labels(&[0, 1])[..9]);
    assert!(matches!(load_idx(&ip, &lp), Err(Error::Format(_))));
}

#[test]
fn count_mismatch_is_a_consistency_error() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = write_pair(dir.path(), &idx_images(2, 1, 1, &[1, 2]), &idx_labels(&[0, 1, 2]));
    assert!(matches!(load_idx(&ip, &lp), Err(Error::Consistency(_))));
}

fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("LMSER_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    let (img, _) = split_paths(&dir, Split::Test);
    if img.exists() {
        Some(dir)
    } else {
        eprintln!("MNIST not found under {}; skipping", dir.display());
        None
    }
}

#[test]
fn published_mnist_files() {
    let Some(dir) = mnist_dir() else { return };
    let (img, _) = split_paths(&dir, Split::Test);
    let head = std::fs::read(&img).unwrap();
    assert_eq!(&head[..4], &[0, 0, 8, 3]);
    assert_eq!(u32::from_be_bytes(head[..4].try_into().unwrap()), 2051);

    let test = load_mnist(&dir, Split::Test).unwrap();
    assert_eq!(test.len(), 10_000);
    assert_eq!(test.image_shape(), &[1, 28, 28]);
    assert!(test.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert_eq!(&test.labels[..5], &[7, 2, 1, 0, 4]);
    assert_eq!(load_mnist(&dir, Split::Test).unwrap(), test);

    let train = load_mnist(&dir, Split::Train).unwrap();
    assert_eq!(train.len(), 60_000);
    let hist = train.label_histogram(10);
    assert!(hist.iter().all(|&c| (5000..=7000).contains(&c)), "{hist:?}");
    assert!(matches!(load_mnist(&dir, Split::Train).map(|d| d.len()), Ok(60_000)));
}

#[test]
fn default_mask_is_the_upper_band() {
    let m = MaskSpec::default();
    assert_eq!((m.row0, m.col0, m.height, m.width, m.fill), (0, 0, 9, 28, 0.0));
}

fn mask_case() -> impl Strategy<Value = (MaskSpec, u64)> {
    (0usize..8, 0usize..8, 0usize..9, 0usize..9, any::<u64>())
        .prop_filter("in bounds", |(r, c, h, w, _)| r + h <= 8 && c + w <= 8)
        .prop_map(|(row0, col0, height, width, seed)| {
            (MaskSpec { row0, col0, height, width, fill: 0.25 }, seed)
        })
}

proptest! {
    #[test]
    fn mask_touches_only_its_region((mask, seed) in mask_case()) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::uniform(vec![3, 1, 8, 8], 0.0, 1.0, &mut rng);
        let y = apply_mask(&x, &mask).unwrap();
        for (i, (a, b)) in x.data().iter().zip(y.data()).enumerate() {
            let (r, c) = ((i / 8) % 8, i % 8);
            if mask.contains(r, c) {
                prop_assert_eq!(*b, 0.25);
            } else {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        prop_assert_eq!(apply_mask(&y, &mask).unwrap(), y.clone());
    }

    #[test]
    fn epochs_visit_every_index_once(n in 1usize..60, batch in 1usize..16, seed in any::<u64>()) {
        let mut b = Batcher::new(n, batch, seed).unwrap();
        for _ in 0..2 {
            let epoch = b.epoch();
            let sizes: Vec<usize> = epoch.iter().map(Vec::len).collect();
            prop_assert!(sizes[..sizes.len() - 1].iter().all(|&s| s == batch));
            let mut all = epoch.concat();
            all.sort();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }
}

#[test]
fn masked_mse_only_counts_the_region() {
    let a = Tensor::zeros(vec![1, 1, 4, 4]);
    let mut b = Tensor::zeros(vec![1, 1, 4, 4]);
    b.data_mut()[0] = 1.0; // inside
    b.data_mut()[15] = 5.0; // outside
    let mask = MaskSpec { row0: 0, col0: 0, height: 2, width: 2, fill: 0.0 };
    assert_eq!(masked_mse(&a, &b, &mask).unwrap(), 0.25);
}
