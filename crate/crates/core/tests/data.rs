use proptest::prelude::*;
use scl_core::data::{
    merge_tasks, simclr_aug, standard_aug, synth_generate, ImageShape, LabeledImage, MetaDataset,
    SynthConfig,
};
use scl_core::rng::stream;
use scl_core::Error;

/// Training accuracy of nearest-centroid classification in pixel space over
/// the train classes.
fn nearest_centroid_accuracy(ds: &MetaDataset) -> f64 {
    let groups = ds.by_class();
    let n = ds.shape.len();
    let centroids: Vec<(usize, Vec<f64>)> = ds
        .train_classes
        .iter()
        .map(|&c| {
            let mut m = vec![0.0; n];
            for &i in &groups[c] {
                for (a, &p) in m.iter_mut().zip(&ds.images[i].pixels) {
                    *a += p as f64;
                }
            }
            for a in &mut m {
                *a /= groups[c].len() as f64;
            }
            (c, m)
        })
        .collect();
    let mut hits = 0;
    let mut total = 0;
    for &c in &ds.train_classes {
        for &i in &groups[c] {
            let px = &ds.images[i].pixels;
            let mut best = (f64::INFINITY, usize::MAX);
            for (k, m) in &centroids {
                let d: f64 = m.iter().zip(px).map(|(a, &b)| (a - b as f64).powi(2)).sum();
                if d < best.0 {
                    best = (d, *k);
                }
            }
            hits += (best.1 == c) as usize;
            total += 1;
        }
    }
    hits as f64 / total as f64
}

#[test]
fn clean_data_is_solved_by_nearest_centroid() {
    let ds = synth_generate(&SynthConfig::new(24, 40, 16, 7).clean()).unwrap();
    assert_eq!(nearest_centroid_accuracy(&ds), 1.0);
}

#[test]
fn default_data_is_not_trivially_separable() {
    let ds = synth_generate(&SynthConfig::new(24, 40, 16, 7)).unwrap();
    let acc = nearest_centroid_accuracy(&ds);
    assert!(acc < 0.95, "{acc}");
    assert!(acc > 1.0 / 16.0, "{acc}");
}

#[test]
fn benchmark_shape() {
    let ds = synth_generate(&SynthConfig::new(24, 40, 16, 7)).unwrap();
    assert_eq!(ds.images.len(), 960);
    assert_eq!(
        (
            ds.train_classes.len(),
            ds.val_classes.len(),
            ds.test_classes.len()
        ),
        (16, 0, 8)
    );
    assert!(ds
        .images
        .iter()
        .all(|i| i.pixels.iter().all(|p| (0.0..=1.0).contains(p))));
    let merged = ds.merged_train();
    assert_eq!(merged.len(), 640);
    assert_eq!(merged.n_classes(), 16);
    assert_eq!(merged.source_labels, ds.train_classes);
}

#[test]
fn same_seed_same_bytes() {
    let cfg = SynthConfig::new(12, 5, 8, 3);
    let a = synth_generate(&cfg).unwrap().to_bytes();
    assert_eq!(a, synth_generate(&cfg).unwrap().to_bytes());
    let other = SynthConfig { seed: 4, ..cfg };
    assert_ne!(a, synth_generate(&other).unwrap().to_bytes());
}

#[test]
fn generator_rejects_bad_sizes() {
    assert!(matches!(
        synth_generate(&SynthConfig::new(24, 1, 16, 0)),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        synth_generate(&SynthConfig::new(8, 10, 16, 0)),
        Err(Error::Config(_))
    ));
}

#[test]
fn file_round_trip() {
    let ds = synth_generate(&SynthConfig::new(10, 3, 8, 1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.scld");
    ds.save(&path).unwrap();
    assert_eq!(MetaDataset::load(&path).unwrap(), ds);
    std::fs::write(&path, b"SCLD0").unwrap();
    assert!(matches!(
        MetaDataset::load(&path),
        Err(Error::Format { .. })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn augmentations_keep_shape_and_range(seed in 0u64..100_000, side in 4usize..12, channels in 1usize..4) {
        let shape = ImageShape::square(channels, side);
        let img: Vec<f64> = (0..shape.len()).map(|i| ((i * 7919 + seed as usize) % 101) as f64 / 100.0).collect();
        for f in [standard_aug, simclr_aug] {
            let a = f(&img, shape, &mut stream(seed, "aug", &[]));
            prop_assert_eq!(a.len(), img.len());
            prop_assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(&a, &f(&img, shape, &mut stream(seed, "aug", &[])));
        }
    }

    #[test]
    fn merge_preserves_size_and_densifies(sizes in proptest::collection::vec(1usize..6, 1..6), offset in 0usize..50) {
        let shape = ImageShape::square(1, 1);
        let tasks: Vec<Vec<LabeledImage>> = sizes
            .iter()
            .enumerate()
            .map(|(t, &n)| (0..n).map(|i| LabeledImage { pixels: vec![i as f32], label: offset + 3 * t }).collect())
            .collect();
        let m = merge_tasks(&tasks, shape);
        prop_assert_eq!(m.len(), sizes.iter().sum::<usize>());
        let mut labels: Vec<usize> = m.images.iter().map(|i| i.label).collect();
        labels.sort_unstable();
        labels.dedup();
        prop_assert_eq!(labels, (0..sizes.len()).collect::<Vec<_>>());
        prop_assert_eq!(merge_tasks(std::slice::from_ref(&m.images), shape).images, m.images);
    }
}
