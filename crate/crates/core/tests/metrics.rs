mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use ulrseg::metrics::{
    ari, boundary_f, boundary_pixels, covering, default_bf_tolerance, fid, lpips, miou, psnr, ssim,
    ConfusionMatrix, RegionPartition, SampleMetrics,
};
use ulrseg::{Error, ImageTensor, LabelMap};

use common::oracles::*;

fn rows(rows: &[&[u8]]) -> LabelMap {
    LabelMap::from_rows(rows).unwrap()
}

#[test]
fn label_metrics_match_brute_force_oracles() {
    let mut r = common::rng(1);
    for trial in 0..100 {
        let c = r.gen_range(1..=4);
        let (pred, gt) = if trial % 2 == 0 {
            (random_map(&mut r, 8, 8, c), random_map(&mut r, 8, 8, c))
        } else {
            (blocky_map(&mut r, 8, c), blocky_map(&mut r, 8, c))
        };
        let tol = r.gen_range(0.0..3.0);
        assert!((miou(&pred, &gt, 4, IGNORE).unwrap() - oracle_miou(&pred, &gt)).abs() < 1e-9);
        assert!(
            (ari(&pred, &gt, IGNORE).unwrap() - oracle_ari(&pred, &gt)).abs() < 1e-9,
            "trial {trial}"
        );
        assert!((covering(&pred, &gt, IGNORE).unwrap() - oracle_covering(&pred, &gt)).abs() < 1e-9);
        assert!((boundary_f(&pred, &gt, tol).unwrap() - oracle_bf(&pred, &gt, tol)).abs() < 1e-6);
        assert_eq!(boundary_pixels(&gt), oracle_boundary(&gt));
    }
}

#[test]
fn image_metrics_match_direct_formulas() {
    let mut r = common::rng(2);
    for _ in 0..10 {
        let a = random_image(&mut r, 8);
        let b = random_image(&mut r, 8);
        assert!((psnr(&a, &b, 1.0).unwrap() - oracle_psnr(&a, &b)).abs() < 1e-9);
    }
    for side in [11, 14, 16] {
        let a = random_image(&mut r, side);
        let noise = random_image(&mut r, side);
        let b = ImageTensor::from_fn(3, side, side, |c, y, x| {
            0.7 * a.at(c, y, x) + 0.3 * noise.at(c, y, x)
        });
        assert!((ssim(&a, &b, 1.0).unwrap() - oracle_ssim(&a, &b)).abs() < 1e-6);
        assert!((ssim(&a, &noise, 1.0).unwrap() - oracle_ssim(&a, &noise)).abs() < 1e-6);
    }
}

#[test]
fn miou_examples() {
    let a = rows(&[&[0, 0], &[1, 1]]);
    assert_eq!(miou(&a, &a, 2, IGNORE).unwrap(), 1.0);
    assert_eq!(
        miou(
            &LabelMap::filled(3, 3, 0),
            &LabelMap::filled(3, 3, 1),
            2,
            IGNORE
        )
        .unwrap(),
        0.0
    );
    let gt = rows(&[&[0, 1], &[1, 1]]);
    assert!((miou(&a, &gt, 2, IGNORE).unwrap() - 0.583333).abs() < 1e-6);
    // Ignored ground-truth pixels are dropped entirely.
    let gt_ignored = rows(&[&[0, 255], &[1, 1]]);
    assert_eq!(miou(&a, &gt_ignored, 2, IGNORE).unwrap(), 1.0);
    assert!(miou(&a, &LabelMap::filled(3, 2, 0), 2, IGNORE).is_err());

    let mut cm = ConfusionMatrix::new(2);
    cm.add(&a, &gt, IGNORE).unwrap();
    assert_eq!(cm.total(), 4);
    assert_eq!(
        (cm.get(0, 0), cm.get(1, 0), cm.get(1, 1), cm.get(0, 1)),
        (1, 1, 2, 0)
    );
    cm.add(&a, &gt_ignored, IGNORE).unwrap();
    assert_eq!(cm.total(), 7);
}

#[test]
fn psnr_and_ssim_examples() {
    let a = ImageTensor::filled(3, 12, 12, 0.2);
    assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
    let b = ImageTensor::filled(3, 12, 12, 0.3);
    assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
    assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-12);
    let zero = ImageTensor::filled(3, 12, 12, 0.0);
    let one = ImageTensor::filled(3, 12, 12, 1.0);
    assert!((ssim(&zero, &one, 1.0).unwrap() - 1e-4 / 1.0001).abs() < 1e-12);
    assert!(ssim(
        &ImageTensor::filled(3, 10, 10, 0.0),
        &ImageTensor::filled(3, 10, 10, 0.0),
        1.0
    )
    .is_err());
    assert!(psnr(&a, &ImageTensor::filled(3, 12, 11, 0.0), 1.0).is_err());
}

#[test]
fn ari_examples() {
    let a = rows(&[&[0, 1], &[2, 2]]);
    assert_eq!(ari(&a, &a, IGNORE).unwrap(), 1.0);
    let singletons = LabelMap::new(3, 3, (0..9).collect()).unwrap();
    assert_eq!(
        ari(&singletons, &LabelMap::filled(3, 3, 4), IGNORE).unwrap(),
        0.0
    );
    assert!(ari(
        &LabelMap::filled(1, 1, 0),
        &LabelMap::filled(1, 1, 0),
        IGNORE
    )
    .is_err());
}

#[test]
fn covering_examples() {
    let a = rows(&[&[0, 0, 1], &[2, 2, 1]]);
    assert_eq!(covering(&a, &a, IGNORE).unwrap(), 1.0);
    let halves = LabelMap::from_fn(4, 4, |_, x| u8::from(x >= 2));
    assert_eq!(
        covering(&halves, &LabelMap::filled(4, 4, 0), IGNORE).unwrap(),
        0.5
    );
    // Same class in two places is two regions.
    let split = rows(&[&[0, 1, 0]]);
    assert_eq!(RegionPartition::new(&split, None).regions.len(), 3);
    assert!(covering(&a, &LabelMap::filled(2, 2, 0), IGNORE).is_err());
}

#[test]
fn boundary_examples() {
    let edge = |col: usize| LabelMap::from_fn(10, 10, |_, x| u8::from(x >= col));
    assert_eq!(boundary_f(&edge(5), &edge(5), 1.0).unwrap(), 1.0);
    assert_eq!(boundary_f(&edge(5), &edge(6), 2.0).unwrap(), 1.0);
    assert_eq!(boundary_f(&edge(2), &edge(8), 2.0).unwrap(), 0.0);
    let flat = LabelMap::filled(10, 10, 3);
    assert_eq!(boundary_f(&flat, &flat, 0.0).unwrap(), 1.0);
    assert_eq!(boundary_f(&flat, &edge(5), 5.0).unwrap(), 0.0);
    assert!(boundary_f(&flat, &flat, -1.0).is_err());
    assert!((default_bf_tolerance(384, 384) - 0.0075 * 384.0 * 2f64.sqrt()).abs() < 1e-9);
}

#[test]
fn learned_scores_are_unavailable() {
    let a = ImageTensor::filled(3, 4, 4, 0.0);
    assert!(matches!(lpips(&a, &a), Err(Error::Unavailable(_))));
    assert!(matches!(
        fid(std::slice::from_ref(&a), std::slice::from_ref(&a)),
        Err(Error::Unavailable(_))
    ));
}

#[test]
fn sample_battery_and_mean() {
    let mut r = common::rng(3);
    let hr = random_image(&mut r, 16);
    let sr = random_image(&mut r, 16);
    let gt = blocky_map(&mut r, 16, 3);
    let pred = blocky_map(&mut r, 16, 3);
    let m = SampleMetrics::compute(&sr, &hr, &pred, &gt, 3, IGNORE, None).unwrap();
    assert_eq!(m.miou, miou(&pred, &gt, 3, IGNORE).unwrap());
    assert_eq!(
        m.bf,
        boundary_f(&pred, &gt, default_bf_tolerance(16, 16)).unwrap()
    );
    let small = SampleMetrics::compute(
        &random_image(&mut r, 8),
        &random_image(&mut r, 8),
        &blocky_map(&mut r, 8, 3),
        &blocky_map(&mut r, 8, 3),
        3,
        IGNORE,
        Some(1.0),
    )
    .unwrap();
    assert!(small.ssim.is_nan());
    let mean = SampleMetrics::mean(&[m.clone(), m.clone()]).unwrap();
    assert!((mean.ari - m.ari).abs() < 1e-15);
    assert!(SampleMetrics::mean(&[]).is_err());
    let json = serde_json::to_value(&m).unwrap();
    let keys: Vec<&str> = json
        .as_object()
        .unwrap()
        .keys()
        .map(|s| s.as_str())
        .collect();
    for k in ["miou", "psnr", "ssim", "ari", "covering", "bf"] {
        assert!(keys.contains(&k));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn region_metrics_ignore_class_renaming(seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let pred = blocky_map(&mut r, 8, 4);
        let gt = random_map(&mut r, 8, 8, 4);
        let mut perm: Vec<u8> = (0..4).collect();
        perm.shuffle(&mut r);
        let rename = |m: &LabelMap| LabelMap::new(8, 8, m.data().iter().map(|&v| perm[v as usize]).collect()).unwrap();
        let (p2, g2) = (rename(&pred), rename(&gt));
        prop_assert!((miou(&pred, &gt, 4, IGNORE).unwrap() - miou(&p2, &g2, 4, IGNORE).unwrap()).abs() < 1e-12);
        prop_assert!((ari(&pred, &gt, IGNORE).unwrap() - ari(&p2, &g2, IGNORE).unwrap()).abs() < 1e-12);
        prop_assert!((covering(&pred, &gt, IGNORE).unwrap() - covering(&p2, &g2, IGNORE).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn symmetric_metrics(seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let a = random_map(&mut r, 6, 6, 3);
        let b = blocky_map(&mut r, 6, 3);
        prop_assert!((ari(&a, &b, IGNORE).unwrap() - ari(&b, &a, IGNORE).unwrap()).abs() < 1e-12);
        prop_assert!((miou(&a, &b, 3, IGNORE).unwrap() - miou(&b, &a, 3, IGNORE).unwrap()).abs() < 1e-12);
        let fa = boundary_f(&a, &b, 1.5).unwrap();
        prop_assert!((fa - boundary_f(&b, &a, 1.5).unwrap()).abs() < 1e-12);
        for v in [fa, covering(&a, &b, IGNORE).unwrap(), miou(&a, &b, 3, IGNORE).unwrap()] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(ari(&a, &b, IGNORE).unwrap() <= 1.0 + 1e-12);
    }

    #[test]
    fn psnr_falls_as_error_grows(seed in any::<u64>(), d1 in 0.01f64..0.4, extra in 0.001f64..0.4) {
        let mut r = common::rng(seed);
        let a = random_image(&mut r, 11);
        let shifted = |d: f64| ImageTensor::from_fn(3, 11, 11, |c, y, x| a.at(c, y, x) + d);
        prop_assert!(psnr(&a, &shifted(d1), 1.0).unwrap() > psnr(&a, &shifted(d1 + extra), 1.0).unwrap());
        prop_assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-12);
    }
}
