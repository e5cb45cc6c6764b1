mod common;

use std::fs;
use std::path::Path;

use common::{randn, rng};
use ofa_core::data::{
    load_dataset, make_batches, resize_batch, split_indices, DataConfig, DataSource, Normalization, SyntheticSpec,
    BASE_RESOLUTION,
};
use ofa_core::tensor::Tensor;
use proptest::prelude::*;

fn synthetic(n_classes: usize, train: usize, test: usize, val_fraction: f64) -> DataConfig {
    DataConfig {
        source: DataSource::Synthetic(SyntheticSpec {
            n_classes,
            train_per_class: train,
            test_per_class: test,
            ..SyntheticSpec::default()
        }),
        val_fraction,
        split_seed: 3,
        augment: false,
    }
}

#[test]
fn synthetic_data_is_deterministic() {
    let cfg = synthetic(4, 10, 5, 0.2);
    let (a, b) = (load_dataset(&cfg).unwrap(), load_dataset(&cfg).unwrap());
    assert_eq!(a.train, b.train);
    assert_eq!(a.test, b.test);
    assert_eq!(a.normalization, b.normalization);
    assert_eq!((a.train.len(), a.val.len(), a.test.len()), (32, 8, 20));
    assert_eq!(a.train.resolution, BASE_RESOLUTION);
    let mut other = cfg.clone();
    other.split_seed = 4;
    assert_ne!(load_dataset(&other).unwrap().train, a.train);
}

#[test]
fn normalized_train_split_is_standardized() {
    let s = load_dataset(&synthetic(8, 20, 5, 0.0)).unwrap();
    let after = Normalization::from_dataset(&s.train);
    for c in 0..3 {
        assert!(after.mean[c].abs() < 0.05, "channel {c} mean {}", after.mean[c]);
        assert!((after.std[c] - 1.0).abs() < 0.05, "channel {c} std {}", after.std[c]);
    }
}

#[test]
fn every_class_is_present() {
    let s = load_dataset(&synthetic(5, 6, 3, 0.0)).unwrap();
    for c in 0..5 {
        assert_eq!(s.train.labels.iter().filter(|&&l| l == c).count(), 6);
        assert_eq!(s.test.labels.iter().filter(|&&l| l == c).count(), 3);
    }
}

#[test]
fn split_partitions_items() {
    let (train, val) = split_indices(100, 0.15, 9).unwrap();
    assert_eq!((train.len(), val.len()), (85, 15));
    let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..100).collect::<Vec<_>>());
    assert_eq!(split_indices(100, 0.15, 9).unwrap(), (train, val));
    assert!(split_indices(10, 1.0, 0).is_err());
    assert_eq!(split_indices(10, 0.0, 0).unwrap().1, Vec::<usize>::new());
}

#[test]
fn batches_cover_each_epoch_once() {
    let b = make_batches(850, 200, 1, 0);
    assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![200, 200, 200, 200, 50]);
    let mut all: Vec<usize> = b.concat();
    all.sort_unstable();
    assert_eq!(all, (0..850).collect::<Vec<_>>());
    assert_eq!(make_batches(850, 200, 1, 0), b);
    assert_ne!(make_batches(850, 200, 1, 1), b);
}

#[test]
fn resize_identity_constant_and_shape() {
    let x = randn(&[2, 3, 64, 64], &mut rng(1));
    assert_eq!(resize_batch(&x, 64).unwrap(), x);
    for r in [48, 56] {
        let y = resize_batch(&x, r).unwrap();
        assert_eq!(y.shape(), &[2, 3, r, r]);
        let c = Tensor::new(vec![1, 3, 64, 64], vec![0.37; 3 * 64 * 64]).unwrap();
        assert!(resize_batch(&c, r).unwrap().data().iter().all(|&v| v == 0.37));
    }
    assert!(resize_batch(&x, 32).is_err());
}

#[test]
fn linear_ramps_stay_linear() {
    let ramp: Vec<f32> = (0..64 * 64).map(|i| (i % 64) as f32).collect();
    let x = Tensor::new(vec![1, 3, 64, 64], ramp.repeat(3)).unwrap();
    let y = resize_batch(&x, 48).unwrap();
    // output pixel o samples input (o + 0.5) * 64 / 48 - 0.5; borders clamp
    assert!((y.data()[10 * 48 + 5] - (5.5 * 64.0 / 48.0 - 0.5)).abs() < 1e-4);
    let row = &y.data()[10 * 48..11 * 48];
    let step = row[2] - row[1];
    assert!(row[1..47].windows(2).all(|w| ((w[1] - w[0]) - step).abs() < 1e-4));
    assert!((step - 64.0 / 48.0).abs() < 1e-4);
}

proptest! {
    #[test]
    fn batches_partition_any_size(n in 1usize..500, bs in 1usize..64, seed in 0u64..100) {
        let b = make_batches(n, bs, seed, 0);
        prop_assert_eq!(b.len(), n.div_ceil(bs));
        let mut all = b.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }
}

fn write_ppm(path: &Path, w: usize, h: usize, rgb: [u8; 3]) {
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for _ in 0..w * h {
        bytes.extend_from_slice(&rgb);
    }
    fs::write(path, bytes).unwrap();
}

#[test]
fn directory_layout_loads() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let wnids = ["n001", "n002", "n003"];
    fs::write(root.join("wnids.txt"), wnids.join("\n") + "\n").unwrap();
    for (c, w) in wnids.iter().enumerate() {
        let d = root.join("train").join(w).join("images");
        fs::create_dir_all(&d).unwrap();
        for i in 0..4 {
            write_ppm(&d.join(format!("{w}_{i}.ppm")), 64, 64, [80 * c as u8, 40, 200]);
        }
    }
    let val = root.join("val").join("images");
    fs::create_dir_all(&val).unwrap();
    let mut ann = String::new();
    for (i, w) in ["n002", "n001", "n003", "n999"].iter().enumerate() {
        // a 32x32 image exercises the resize path
        write_ppm(&val.join(format!("val_{i}.ppm")), 32, 32, [10, 20, 30]);
        ann.push_str(&format!("val_{i}.ppm\t{w}\t0\t0\t10\t10\n"));
    }
    fs::write(root.join("val").join("val_annotations.txt"), ann).unwrap();

    let cfg = |max_classes| DataConfig {
        source: DataSource::TinyImagenet { root: root.to_path_buf(), max_classes, max_per_class: Some(3) },
        val_fraction: 0.25,
        split_seed: 0,
        augment: false,
    };
    let s = load_dataset(&cfg(None)).unwrap();
    assert_eq!(s.train.n_classes, 3);
    assert_eq!(s.train.len() + s.val.len(), 9);
    assert_eq!(s.val.len(), 2);
    assert_eq!(s.test.labels, vec![1, 0, 2]);
    assert_eq!(s.test.resolution, 64);
    // constant images normalize to constants
    let img = s.test.image(0);
    assert!(img[..64 * 64].iter().all(|&v| v == img[0]));
    let two = load_dataset(&cfg(Some(2))).unwrap();
    assert_eq!((two.train.n_classes, two.test.labels.clone()), (2, vec![1, 0]));
    let missing = DataConfig {
        source: DataSource::TinyImagenet { root: root.join("nope"), max_classes: None, max_per_class: None },
        ..cfg(None)
    };
    let err = load_dataset(&missing).unwrap_err().to_string();
    assert!(err.contains("wnids.txt"), "{err}");
}
