//! Forward kernels against direct loops and an independent linear-algebra library.

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::SeedableRng;
use ulrseg_tensor::{Adam, ConvGeom, Param, Tensor, Var};

/// Six nested loops over the convolution definition.
fn naive_conv(x: &Tensor, w: &Tensor, b: &[f64], g: ConvGeom) -> Tensor {
    let (n, c, h, wd) = x.dims4();
    let (o, _, k, _) = w.dims4();
    let (oh, ow) = (g.out_size(h, k), g.out_size(wd, k));
    let mut out = vec![0.0; n * o * oh * ow];
    for bi in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = b[oc];
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * g.stride + ky * g.dilation) as i64 - g.padding as i64;
                                let ix =
                                    (xo * g.stride + kx * g.dilation) as i64 - g.padding as i64;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= wd as i64 {
                                    continue;
                                }
                                acc +=
                                    x.at4(bi, ic, iy as usize, ix as usize) * w.at4(oc, ic, ky, kx);
                            }
                        }
                    }
                    out[((bi * o + oc) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, o, oh, ow], out)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_matches_direct_loops(
        seed in any::<u64>(),
        n in 1usize..3,
        c in 1usize..4,
        o in 1usize..4,
        size in 3usize..9,
        k in prop::sample::select(vec![1usize, 3]),
        stride in 1usize..3,
        padding in 0usize..3,
        dilation in 1usize..3,
    ) {
        let g = ConvGeom::new(stride, padding, dilation);
        prop_assume!(size + 2 * padding > dilation * (k - 1));
        let mut rng = StdRng::seed_from_u64(seed);
        let x = Tensor::randn(&[n, c, size, size], 1.0, &mut rng);
        let w = Tensor::randn(&[o, c, k, k], 1.0, &mut rng);
        let b = Tensor::randn(&[o], 1.0, &mut rng);
        let got = Var::constant(x.clone()).conv2d(&Var::constant(w.clone()), Some(&Var::constant(b.clone())), g);
        let want = naive_conv(&x, &w, b.data(), g);
        prop_assert_eq!(got.value().shape(), want.shape());
        for (a, e) in got.value().data().iter().zip(want.data()) {
            prop_assert!((a - e).abs() < 1e-10, "{} vs {}", a, e);
        }
    }

    #[test]
    fn linear_matches_nalgebra(seed in any::<u64>(), n in 1usize..6, f in 1usize..7, o in 1usize..6) {
        let mut rng = StdRng::seed_from_u64(seed);
        let x = Tensor::randn(&[n, f], 1.0, &mut rng);
        let w = Tensor::randn(&[o, f], 1.0, &mut rng);
        let got = Var::constant(x.clone()).linear(&Var::constant(w.clone()), None);
        let xm = DMatrix::from_row_slice(n, f, x.data());
        let wm = DMatrix::from_row_slice(o, f, w.data());
        let want = xm * wm.transpose();
        for r in 0..n {
            for col in 0..o {
                prop_assert!((got.value().data()[r * o + col] - want[(r, col)]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn softmax_channels_is_a_distribution(seed in any::<u64>(), c in 1usize..6, shift in -50.0f64..50.0) {
        let mut rng = StdRng::seed_from_u64(seed);
        let x = Tensor::randn(&[2, c, 3, 3], 3.0, &mut rng);
        let p = Var::constant(x.clone()).softmax_channels();
        let shifted = Var::constant(x.map(|v| v + shift)).softmax_channels();
        let (_, _, h, w) = x.dims4();
        for b in 0..2 {
            for y in 0..h {
                for xx in 0..w {
                    let s: f64 = (0..c).map(|ch| p.value().at4(b, ch, y, xx)).sum();
                    prop_assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
        for (a, e) in p.value().data().iter().zip(shifted.value().data()) {
            prop_assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_normalized_channels_have_unit_norm(seed in any::<u64>(), c in 1usize..6) {
        let mut rng = StdRng::seed_from_u64(seed);
        let x = Tensor::randn(&[1, c, 4, 4], 2.0, &mut rng);
        let y = Var::constant(x).l2_normalize_channels(1e-12);
        for p in 0..16 {
            let norm: f64 = (0..c).map(|ch| y.value().data()[ch * 16 + p].powi(2)).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn adam_first_step_moves_each_weight_by_the_learning_rate() {
    // With bias correction the first update is lr · g/|g| for every non-zero gradient.
    let mut p = Param::new("w", Tensor::new(&[3], vec![1.0, -2.0, 0.5]));
    let grads = [("w".to_string(), Tensor::new(&[3], vec![0.3, -4.0, 1e-3]))]
        .into_iter()
        .collect();
    let mut opt = Adam::new(0.01, 0.9, 0.999);
    opt.step(vec![&mut p], &grads);
    let want = [1.0 - 0.01, -2.0 + 0.01, 0.5 - 0.01];
    for (a, e) in p.value.data().iter().zip(want) {
        assert!((a - e).abs() < 1e-6, "{a} vs {e}");
    }
    assert_eq!(opt.steps_taken(), 1);
}
