mod common;

use nalgebra::DMatrix;
use rand::Rng;
use ulrseg::sad::{
    build_discriminator, discriminate, fake_pair_var, make_fake_pair, make_real_pair, matrix_dims,
    real_pair_var, spectral_normalize, DiscConfig, SpectralState, VERIFY_ITERATIONS,
};
use ulrseg::segnet::{predict_labels, SegLogits};
use ulrseg::{ImageTensor, LabelMap};
use ulrseg_tensor::{Binder, Module, Tensor, Var};

fn top_singular_value(w: &Tensor) -> f64 {
    let (r, c) = matrix_dims(w);
    DMatrix::from_row_slice(r, c, w.data())
        .singular_values()
        .max()
}

fn state_for(w: &Tensor, seed: u64) -> SpectralState {
    let (r, c) = matrix_dims(w);
    SpectralState::new(r, c, 8, &mut common::rng(seed))
}

fn normalize(w: &Tensor, iters: usize) -> Tensor {
    spectral_normalize(w, &mut state_for(w, 1), iters).unwrap()
}

fn random_image(seed: u64, side: usize) -> ImageTensor {
    let t = Tensor::rand_uniform(&[3, side, side], 0.0, 1.0, &mut common::rng(seed));
    ImageTensor::from_fn(3, side, side, |c, y, x| t.data()[(c * side + y) * side + x])
}

#[test]
fn analytic_spectral_cases() {
    let diag = Tensor::new(&[2, 2], vec![3.0, 0.0, 0.0, 1.0]);
    let out = normalize(&diag, 1);
    for (a, b) in out.data().iter().zip([1.0, 0.0, 0.0, 1.0 / 3.0]) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!((top_singular_value(&out) - 1.0).abs() < 1e-12);

    let mut eye = Tensor::zeros(&[4, 4]);
    for i in 0..4 {
        eye.data_mut()[i * 5] = 1.0;
    }
    let out = normalize(&eye, 1);
    for (a, b) in out.data().iter().zip(eye.data()) {
        assert!((a - b).abs() < 1e-12);
    }

    let zero = Tensor::zeros(&[3, 5]);
    assert_eq!(normalize(&zero, 5), zero);
    assert!(spectral_normalize(&eye, &mut state_for(&eye, 0), 0).is_err());
    let bad = Tensor::full(&[2, 2], f64::INFINITY);
    assert!(spectral_normalize(&bad, &mut state_for(&bad, 0), 1).is_err());
}

#[test]
fn random_matrices_match_the_decomposition_oracle() {
    let mut r = common::rng(2);
    for trial in 0..5 {
        let w = Tensor::randn(&[64, 64], 1.0, &mut r);
        let out = normalize(&w, 5);
        let s = top_singular_value(&out);
        assert!((0.95..=1.05).contains(&s), "trial {trial}: σ = {s}");
        // The estimate itself tracks the oracle on the raw matrix.
        let mut st = state_for(&w, 3);
        st.refresh(&w, 5);
        assert!((st.sigma() / top_singular_value(&w) - 1.0).abs() < 0.05);
    }
    // Convolution kernels flatten to (out, in·kh·kw).
    let k = Tensor::randn(&[16, 7, 3, 3], 1.0, &mut r);
    assert_eq!(matrix_dims(&k), (16, 63));
    let s = top_singular_value(&normalize(&k, 5));
    assert!((0.95..=1.05).contains(&s));
}

#[test]
fn power_iteration_state_persists_across_calls() {
    let w = Tensor::randn(&[20, 30], 1.0, &mut common::rng(4));
    let mut st = state_for(&w, 5);
    let mut last = f64::NAN;
    for _ in 0..6 {
        spectral_normalize(&w, &mut st, 1).unwrap();
        last = st.sigma();
    }
    assert!((last / top_singular_value(&w) - 1.0).abs() < 1e-6);
    let u_norm: f64 = st.u().iter().map(|v| v * v).sum::<f64>().sqrt();
    let v_norm: f64 = st.v().iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!((u_norm - 1.0).abs() < 1e-9 && (v_norm - 1.0).abs() < 1e-9);
}

#[test]
fn every_discriminator_layer_is_normalized() {
    let d = build_discriminator(&DiscConfig::toy(4), 0).unwrap();
    assert_eq!(d.normalized_weights().len(), d.num_layers());
    for w in d.normalized_weights() {
        let s = top_singular_value(&w);
        assert!((0.95..=1.05).contains(&s), "σ = {s}");
    }
    for (name, ratio) in d.normalized_sigmas() {
        assert!((0.95..=1.05).contains(&ratio), "{name}: {ratio}");
    }
    const { assert!(VERIFY_ITERATIONS >= 5) };
}

#[test]
fn one_logit_per_pair() {
    let d = build_discriminator(&DiscConfig::toy(4), 1).unwrap();
    let z = Tensor::rand_uniform(&[2, 7, 16, 16], 0.0, 1.0, &mut common::rng(6));
    let out = d.forward(&mut Binder::frozen(), &Var::constant(z)).unwrap();
    assert_eq!(out.shape(), &[2]);
    assert!(out.value().all_finite());
    let wrong = Var::constant(Tensor::zeros(&[2, 6, 16, 16]));
    assert!(d.forward(&mut Binder::frozen(), &wrong).is_err());
}

#[test]
fn zero_head_gives_even_odds() {
    let mut d = build_discriminator(&DiscConfig::toy(3), 2).unwrap();
    d.zero_head();
    let img = random_image(3, 16);
    let label = LabelMap::from_fn(16, 16, |y, x| ((y + x) % 3) as u8);
    let logit = discriminate(&d, &make_real_pair(&img, &label, 3, 255).unwrap()).unwrap();
    assert_eq!(logit, 0.0);
    assert_eq!(1.0 / (1.0 + (-logit).exp()), 0.5);
}

#[test]
fn pair_construction() {
    let img = random_image(7, 32);
    let label = LabelMap::from_fn(32, 32, |y, x| ((y / 8 + x / 8) % 4) as u8);
    let real = make_real_pair(&img, &label, 4, 255).unwrap();
    assert_eq!(real.tensor().shape(), &[7, 32, 32]);
    assert_eq!(real.channels(), 7);
    for p in 0..32 * 32 {
        let s: f64 = (3..7).map(|c| real.tensor().data()[c * 1024 + p]).sum();
        assert_eq!(s, 1.0);
    }
    assert!(make_real_pair(&img, &LabelMap::filled(16, 16, 0), 4, 255).is_err());

    let logits = SegLogits::new(Tensor::randn(&[4, 32, 32], 3.0, &mut common::rng(8))).unwrap();
    let fake = make_fake_pair(&img, &logits).unwrap();
    assert_eq!(fake.channels(), 7);
    let pred = predict_labels(&logits);
    for y in 0..32 {
        for x in 0..32 {
            let p = y * 32 + x;
            let probs: Vec<f64> = (3..7).map(|c| fake.tensor().data()[c * 1024 + p]).collect();
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let arg = (0..4).fold(0, |b, k| if probs[k] > probs[b] { k } else { b });
            assert_eq!(arg as u8, pred.get(y, x));
        }
    }
    for c in 0..3 {
        assert_eq!(
            fake.tensor().data()[c * 1024..(c + 1) * 1024],
            img.tensor().data()[c * 1024..(c + 1) * 1024]
        );
    }
    let small = SegLogits::new(Tensor::zeros(&[4, 16, 16])).unwrap();
    assert!(make_fake_pair(&img, &small).is_err());
    assert!(real_pair_var(
        &Var::constant(Tensor::zeros(&[1, 3, 8, 8])),
        &Var::constant(Tensor::zeros(&[2, 4, 8, 8]))
    )
    .is_err());
}

#[test]
fn logit_gradient_matches_finite_differences() {
    let d = build_discriminator(&DiscConfig::toy(2), 3).unwrap();
    let z = Tensor::rand_uniform(&[1, 5, 8, 8], 0.0, 1.0, &mut common::rng(9));
    common::assert_grad_close(
        |v| d.forward(&mut Binder::frozen(), v).unwrap().sum(),
        &z,
        40,
        1e-4,
    );
}

#[test]
fn fake_pair_gradient_reaches_image_and_logits() {
    let d = build_discriminator(&DiscConfig::toy(3), 4).unwrap();
    let mut r = common::rng(10);
    let sr = Tensor::rand_uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut r);
    let logits = Tensor::randn(&[1, 3, 8, 8], 1.0, &mut r);
    let l = Var::constant(logits.clone());
    let via_image = |v: &Var| {
        d.forward(&mut Binder::frozen(), &fake_pair_var(v, &l).unwrap())
            .unwrap()
            .sum()
    };
    let s = Var::constant(sr.clone());
    let via_logits = |v: &Var| {
        d.forward(&mut Binder::frozen(), &fake_pair_var(&s, v).unwrap())
            .unwrap()
            .sum()
    };
    for (f, x) in [
        (&via_image as &dyn Fn(&Var) -> Var, &sr),
        (&via_logits, &logits),
    ] {
        let leaf = Var::leaf(x.clone());
        let g = f(&leaf).backward().get(&leaf).unwrap().clone();
        assert!(g.max_abs() > 1e-8);
        common::assert_grad_close(f, x, 24, 1e-4);
    }
}

#[test]
fn lipschitz_bound_holds_on_random_probes() {
    let mut d = build_discriminator(&DiscConfig::toy(2), 5).unwrap();
    d.refresh(100);
    // A 3×3 kernel touches each input at most 9 times at stride 1 and 4 times at
    // stride 2; pooling and leaky ReLU are 1-Lipschitz.
    let blocks = d.config().conv_blocks as i32;
    let k = 3f64.powi(blocks) * 2f64.powi(blocks);
    let mut r = common::rng(11);
    for _ in 0..20 {
        let a = Tensor::rand_uniform(&[1, 5, 16, 16], 0.0, 1.0, &mut r);
        let eps = r.gen_range(1e-3..1.0);
        let b = a.zip_map(&Tensor::randn(&[1, 5, 16, 16], eps, &mut r), |x, y| x + y);
        let dist = a.zip_map(&b, |x, y| (x - y).powi(2)).sum().sqrt();
        let da = d
            .forward(&mut Binder::frozen(), &Var::constant(a))
            .unwrap()
            .item();
        let db = d
            .forward(&mut Binder::frozen(), &Var::constant(b))
            .unwrap()
            .item();
        assert!((da - db).abs() <= k * dist * (1.0 + 1e-9));
    }
}

#[test]
fn configuration_checks() {
    assert_eq!(DiscConfig::full(37).in_channels, 40);
    assert_eq!(DiscConfig::full(37).widths, vec![64, 128, 256, 512]);
    assert_eq!(DiscConfig::toy(4).rgb_only().in_channels, 3);
    let mut bad = DiscConfig::toy(4);
    bad.widths.pop();
    assert!(build_discriminator(&bad, 0).is_err());
    let mut bad = DiscConfig::toy(4);
    bad.power_iterations = 0;
    assert!(bad.validate().is_err());
    let d = build_discriminator(&DiscConfig::toy(4), 0).unwrap();
    assert!(d.params().iter().all(|p| p.value.all_finite()));
}
