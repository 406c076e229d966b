use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ulrseg::datakit::{
    downsample_bicubic, encode_onehot, make_splits, read_manifest, read_split,
    resample_bicubic_linear, sha256_hex, synth_generate, write_corpus, DatasetSpec,
};
use ulrseg::{ImageTensor, LabelMap};

/// Keys cubic with a = -0.5, written in expanded polynomial form.
fn keys(t: f64) -> f64 {
    let a = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (a + 2.0) * t.powi(3) - (a + 3.0) * t.powi(2) + 1.0
    } else if t < 2.0 {
        a * t.powi(3) - 5.0 * a * t.powi(2) + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

/// Direct 2-D weighted sum over every source pixel with the kernel stretched
/// by the scale factor, normalized over in-image taps, then clamped.
fn reference_downsample(img: &ImageTensor, target: usize) -> Vec<f64> {
    let n = img.height();
    let s = n as f64 / target as f64;
    let mut out = Vec::new();
    for c in 0..img.channels() {
        for i in 0..target {
            for j in 0..target {
                let (cy, cx) = ((i as f64 + 0.5) * s, (j as f64 + 0.5) * s);
                let (mut acc, mut norm) = (0.0, 0.0);
                for y in 0..n {
                    let wy = keys((y as f64 + 0.5 - cy) / s);
                    if wy == 0.0 {
                        continue;
                    }
                    for x in 0..n {
                        let w = wy * keys((x as f64 + 0.5 - cx) / s);
                        acc += w * img.at(c, y, x);
                        norm += w;
                    }
                }
                out.push((acc / norm).clamp(0.0, 1.0));
            }
        }
    }
    out
}

fn random_image(seed: u64, c: usize, side: usize) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..c * side * side).map(|_| rng.gen()).collect();
    ImageTensor::from_fn(c, side, side, |ch, y, x| data[(ch * side + y) * side + x])
}

#[test]
fn constant_image_stays_constant() {
    let img = ImageTensor::filled(3, 384, 384, 0.7);
    let out = downsample_bicubic(&img, 16).unwrap();
    assert_eq!((out.channels(), out.height(), out.width()), (3, 16, 16));
    assert!(out.tensor().data().iter().all(|v| (v - 0.7).abs() < 1e-12));
}

#[test]
fn random_full_size_image_gives_16x16() {
    let out = downsample_bicubic(&random_image(3, 3, 384), 16).unwrap();
    assert_eq!(out.tensor().shape(), &[3, 16, 16]);
}

#[test]
fn checkerboard_matches_reference_kernel() {
    let board = ImageTensor::from_fn(
        3,
        8,
        8,
        |c, y, x| if (x + y + c) % 2 == 0 { 1.0 } else { 0.0 },
    );
    for target in [1, 2, 4, 8] {
        let got = downsample_bicubic(&board, target).unwrap();
        let want = reference_downsample(&board, target);
        for (a, b) in got.tensor().data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-6, "target {target}: {a} vs {b}");
        }
    }
}

#[test]
fn random_images_match_reference_kernel() {
    for (seed, side, target) in [(1, 96, 16), (2, 32, 8), (3, 12, 4)] {
        let img = random_image(seed, 3, side);
        let got = downsample_bicubic(&img, target).unwrap();
        let want = reference_downsample(&img, target);
        for (a, b) in got.tensor().data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn indivisible_or_non_square_sizes_are_rejected() {
    let img = ImageTensor::filled(3, 10, 10, 0.5);
    let err = downsample_bicubic(&img, 3).unwrap_err().to_string();
    assert!(err.contains("not divisible"), "{err}");
    let rect = ImageTensor::filled(3, 8, 4, 0.5);
    assert!(downsample_bicubic(&rect, 2).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn resampling_is_linear_before_clamping(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let x = random_image(seed, 3, 16);
        let y = random_image(seed.wrapping_add(1), 3, 16);
        let mix = ImageTensor::from_fn(3, 16, 16, |c, i, j| a * x.at(c, i, j) + b * y.at(c, i, j));
        let dm = resample_bicubic_linear(&mix, 4).unwrap();
        let dx = resample_bicubic_linear(&x, 4).unwrap();
        let dy = resample_bicubic_linear(&y, 4).unwrap();
        for i in 0..dm.tensor().len() {
            let want = a * dx.tensor().data()[i] + b * dy.tensor().data()[i];
            prop_assert!((dm.tensor().data()[i] - want).abs() < 1e-6);
        }
    }

    #[test]
    fn splits_partition_the_corpus(seed in any::<u64>(), train in 0usize..30, val in 0usize..10, test in 0usize..10) {
        prop_assume!(train + val + test > 0);
        let mut spec = DatasetSpec::desk("unused");
        spec.split_sizes = (train, val, test);
        spec.seed = seed;
        let n = train + val + test;
        let s = make_splits(&spec, n).unwrap();
        prop_assert_eq!((s.train.len(), s.val.len(), s.test.len()), (train, val, test));
        let all: BTreeSet<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        prop_assert_eq!(all, (0..n).collect::<BTreeSet<_>>());
    }

    #[test]
    fn onehot_round_trips_through_argmax(seed in any::<u64>(), c in 2usize..=40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..42).map(|_| if rng.gen_bool(0.1) { 255 } else { rng.gen_range(0..c) as u8 }).collect();
        let label = LabelMap::new(6, 7, data).unwrap();
        let oh = encode_onehot(&label, c, 255).unwrap();
        prop_assert_eq!(oh.shape(), &[c, 6, 7]);
        for y in 0..6 {
            for x in 0..7 {
                let col: Vec<f64> = (0..c).map(|k| oh.data()[(k * 6 + y) * 7 + x]).collect();
                let sum: f64 = col.iter().sum();
                if label.get(y, x) == 255 {
                    prop_assert_eq!(sum, 0.0);
                } else {
                    prop_assert_eq!(sum, 1.0);
                    let arg = (0..c).max_by(|&a, &b| col[a].total_cmp(&col[b]).then(b.cmp(&a))).unwrap();
                    prop_assert_eq!(arg as u8, label.get(y, x));
                }
            }
        }
    }
}

#[test]
fn onehot_examples() {
    let label = LabelMap::from_rows(&[[0u8, 1], [1, 0]]).unwrap();
    let oh = encode_onehot(&label, 2, 255).unwrap();
    assert_eq!(&oh.data()[..4], &[1.0, 0.0, 0.0, 1.0]);
    assert_eq!(&oh.data()[4..], &[0.0, 1.0, 1.0, 0.0]);
    let ignored = LabelMap::filled(3, 3, 255);
    assert!(encode_onehot(&ignored, 4, 255)
        .unwrap()
        .data()
        .iter()
        .all(|&v| v == 0.0));
    let bad = LabelMap::filled(2, 2, 4);
    assert!(encode_onehot(&bad, 4, 255).is_err());
}

#[test]
fn split_examples() {
    let mut spec = DatasetSpec::desk("unused");
    spec.split_sizes = (14, 3, 3);
    spec.seed = 7;
    assert_eq!(
        make_splits(&spec, 20).unwrap(),
        make_splits(&spec, 20).unwrap()
    );
    assert!(make_splits(&spec, 21).is_err());
    let full = DatasetSpec::full_scale("unused");
    full.validate().unwrap();
    assert_eq!(full.split_sizes, (9000, 668, 667));
    let s = make_splits(&full, 10_335).unwrap();
    assert_eq!(s.train.len(), 9000);
}

#[test]
fn synthetic_corpus_contract() {
    let mut spec = DatasetSpec::desk("unused");
    spec.num_classes = 4;
    spec.split_sizes = (16, 0, 0);
    let a = synth_generate(&spec).unwrap();
    let b = synth_generate(&spec).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 16);
    let mut seen = BTreeSet::new();
    for s in &a {
        assert_eq!(s.hr.tensor().shape(), &[3, 32, 32]);
        assert_eq!(s.lr, downsample_bicubic(&s.hr, 8).unwrap());
        seen.extend(s.label.data().iter().copied());
    }
    assert_eq!(seen, BTreeSet::from([0, 1, 2, 3]));
    spec.num_classes = 41;
    assert!(synth_generate(&spec).is_err());
}

#[test]
fn corpus_files_round_trip_and_hashes_recompute() {
    let dir = tempfile::tempdir().unwrap();
    let spec = DatasetSpec::desk(dir.path());
    let corpus = synth_generate(&spec).unwrap();
    let splits = make_splits(&spec, corpus.len()).unwrap();
    let manifest =
        write_corpus(dir.path(), &corpus, &splits, serde_json::json!({"seed": 1})).unwrap();
    assert_eq!(read_manifest(dir.path()).unwrap(), manifest);
    assert_eq!(manifest.hashes.len(), 2 * corpus.len());
    for (rel, hash) in &manifest.hashes {
        let bytes = std::fs::read(dir.path().join(rel)).unwrap();
        assert_eq!(&sha256_hex(&bytes), hash, "{rel}");
    }
    let train = read_split(dir.path(), &spec, "train").unwrap();
    assert_eq!(train.len(), splits.train.len());
    for (s, &i) in train.iter().zip(&splits.train) {
        assert_eq!(s, &corpus[i]);
    }
    assert!(read_split(dir.path(), &spec, "holdout").is_err());
}
