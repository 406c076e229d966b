mod common;

use proptest::prelude::*;
use rand::Rng;
use ulrseg::afe::{
    build_extractor, feature_loss, feature_loss_parts, feature_loss_var, normalize_features,
    AfeConfig, AfeKind, FeatureExtractor, StubExtractor,
};
use ulrseg::{Error, ImageTensor};
use ulrseg_tensor::{Tensor, Var};

fn image(seed: u64, side: usize) -> ImageTensor {
    let t = Tensor::rand_uniform(&[3, side, side], 0.0, 1.0, &mut common::rng(seed));
    ImageTensor::from_fn(3, side, side, |c, y, x| t.data()[(c * side + y) * side + x])
}

/// Per-position unit vectors compared directly: `Σ|a−b|` and `1 − a·b`, averaged.
fn oracle_parts(a: &Tensor, b: &Tensor) -> (f64, f64) {
    let s = a.shape();
    let (c, plane) = (s[0], s[1] * s[2]);
    let (mut l1, mut cos) = (0.0, 0.0);
    for p in 0..plane {
        let va: Vec<f64> = (0..c).map(|k| a.data()[k * plane + p]).collect();
        let vb: Vec<f64> = (0..c).map(|k| b.data()[k * plane + p]).collect();
        let na = va.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = vb.iter().map(|v| v * v).sum::<f64>().sqrt();
        l1 += va
            .iter()
            .zip(&vb)
            .map(|(x, y)| (x / na - y / nb).abs())
            .sum::<f64>();
        cos += 1.0 - va.iter().zip(&vb).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
    }
    (l1 / plane as f64, cos / plane as f64)
}

fn per_position(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
    Tensor::randn(&[c, h, w], 1.0, &mut common::rng(seed))
}

#[test]
fn stub_extractor_contract() {
    let fx = build_extractor(&AfeConfig::default()).unwrap();
    let img = image(1, 32);
    let a = fx.extract(&img).unwrap();
    assert_eq!(a.shape(), &[32, 8, 8]);
    assert_eq!(fx.output_dims(32, 32), (32, 8, 8));
    assert_eq!(a, fx.extract(&img).unwrap());
    let again = build_extractor(&AfeConfig::default()).unwrap();
    assert_eq!(a, again.extract(&img).unwrap());
    let other = build_extractor(&AfeConfig {
        seed: 99,
        ..AfeConfig::default()
    })
    .unwrap();
    assert_ne!(a, other.extract(&img).unwrap());
}

#[test]
fn small_or_unaligned_inputs_are_rejected() {
    let fx = StubExtractor::new(16, 8, 0).unwrap();
    assert_eq!(fx.min_resolution(), 8);
    assert!(fx.extract(&image(2, 4)).is_err());
    assert!(fx.extract(&image(2, 12)).is_err());
    assert_eq!(fx.extract(&image(2, 16)).unwrap().shape(), &[16, 2, 2]);
    assert!(StubExtractor::new(16, 3, 0).is_err());
    assert!(StubExtractor::new(0, 4, 0).is_err());
    let external = build_extractor(&AfeConfig {
        kind: AfeKind::External,
        ..AfeConfig::default()
    });
    assert!(matches!(external, Err(Error::Unavailable(_))));
}

#[test]
fn feature_mean_gradient_matches_finite_differences() {
    let fx = StubExtractor::new(8, 4, 3).unwrap();
    let x = image(4, 8).to_batch();
    common::assert_grad_close(|v| fx.extract_var(v).unwrap().mean(), &x, 32, 1e-4);
}

#[test]
fn normalized_features_have_unit_norm() {
    let f = per_position(5, 4, 4, 5);
    let n = normalize_features(&f).unwrap();
    for p in 0..16 {
        let norm: f64 = (0..5)
            .map(|k| n.data()[k * 16 + p].powi(2))
            .sum::<f64>()
            .sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }
    let zero = normalize_features(&Tensor::zeros(&[3, 2, 2])).unwrap();
    assert!(zero.data().iter().all(|&v| v == 0.0));
    assert!(normalize_features(&Tensor::zeros(&[3, 2])).is_err());
}

#[test]
fn closed_cases() {
    let e1 = Tensor::new(&[2, 1, 1], vec![1.0, 0.0]);
    let e2 = Tensor::new(&[2, 1, 1], vec![0.0, 1.0]);
    let anti = Tensor::new(&[2, 1, 1], vec![-1.0, 0.0]);
    assert_eq!(feature_loss(&e1, &e1).unwrap(), 0.0);
    let p = feature_loss_parts(&e1, &e2).unwrap();
    assert!((p.l1 - 2.0).abs() < 1e-12 && (p.cos - 1.0).abs() < 1e-12);
    assert!((feature_loss(&e1, &e2).unwrap() - 3.0).abs() < 1e-12);
    let p = feature_loss_parts(&e1, &anti).unwrap();
    assert!((p.l1 - 2.0).abs() < 1e-12 && (p.cos - 2.0).abs() < 1e-12);
    assert!((feature_loss(&e1, &anti).unwrap() - 4.0).abs() < 1e-12);
    assert!(feature_loss(&e1, &Tensor::zeros(&[3, 1, 1])).is_err());
}

#[test]
fn parts_match_direct_oracle() {
    for seed in 0..10 {
        let a = per_position(6, 3, 5, seed);
        let b = per_position(6, 3, 5, seed + 100);
        let p = feature_loss_parts(&a, &b).unwrap();
        let (l1, cos) = oracle_parts(&a, &b);
        assert!((p.l1 - l1).abs() < 1e-12 && (p.cos - cos).abs() < 1e-12);
        let graph = feature_loss_var(
            &Var::constant(a.reshape(&[1, 6, 3, 5])),
            &Var::constant(b.reshape(&[1, 6, 3, 5])),
        );
        assert!((graph.unwrap().item() - p.total()).abs() < 1e-12);
    }
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut r = common::rng(6);
    let real = Var::constant(Tensor::randn(&[2, 4, 3, 3], 1.0, &mut r));
    let fake = Tensor::randn(&[2, 4, 3, 3], 1.0, &mut r);
    common::assert_grad_close(|v| feature_loss_var(&real, v).unwrap(), &fake, 72, 1e-4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_bounds_and_symmetry(seed in any::<u64>(), c in 1usize..6) {
        let a = per_position(c, 3, 3, seed);
        let b = per_position(c, 3, 3, seed.wrapping_add(1));
        let p = feature_loss_parts(&a, &b).unwrap();
        prop_assert!((0.0..=2.0 + 1e-12).contains(&p.cos));
        prop_assert!(p.l1 >= 0.0);
        let q = feature_loss_parts(&b, &a).unwrap();
        prop_assert!((p.l1 - q.l1).abs() < 1e-12 && (p.cos - q.cos).abs() < 1e-12);
    }

    #[test]
    fn zero_exactly_when_directions_agree(seed in any::<u64>()) {
        let a = per_position(4, 3, 3, seed);
        let mut r = common::rng(seed);
        let scales: Vec<f64> = (0..9).map(|_| r.gen_range(0.1..10.0)).collect();
        let mut b = a.clone();
        for k in 0..4 {
            for (p, s) in scales.iter().enumerate() {
                b.data_mut()[k * 9 + p] *= s;
            }
        }
        prop_assert!(feature_loss(&a, &b).unwrap() < 1e-12);
        let mut moved = b.clone();
        moved.data_mut()[r.gen_range(0..36)] += 0.5;
        prop_assert!(feature_loss(&a, &moved).unwrap() > 0.0);
    }
}
