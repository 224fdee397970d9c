mod common;

use common::{max_abs_diff, naive_conv, naive_matmul, naive_secondaries, pairwise_cosine_loss, random, rng};
use linearconv::autodiff::Tape;
use linearconv::correlation::{corr_loss_value, correlation_report};
use linearconv::{Alpha, CoeffMode, Coefficients, LinearConvGeometry, LinearConvParams};

#[test]
fn conv_matches_direct_loops_over_geometry_sweep() {
    let mut r = rng(21);
    let mut cases = 0;
    for n in 1..=2 {
        for c in [1, 2, 4] {
            for f in [1, 3, 5] {
                for k in [1, 2, 3] {
                    for (h, w) in [(5, 5), (9, 9), (7, 6)] {
                        for stride in [1, 2] {
                            for pad in [0, 1] {
                                if (h + 2 * pad - k) % stride != 0 || (w + 2 * pad - k) % stride != 0 {
                                    continue;
                                }
                                let x = random(&[n, c, h, w], &mut r);
                                let wt = random(&[f, c, k, k], &mut r);
                                let mut tape = Tape::inference();
                                let xv = tape.constant(x.clone()).unwrap();
                                let wv = tape.constant(wt.clone()).unwrap();
                                let out = tape.conv2d(xv, wv, stride, pad).unwrap();
                                let (shape, expected) = naive_conv(&x, &wt, stride, pad);
                                assert_eq!(tape.shape(out), &shape[..]);
                                let diff = max_abs_diff(tape.value(out).data(), &expected);
                                assert!(diff < 1e-12, "n{n} c{c} f{f} k{k} {h}x{w} s{stride} p{pad}: {diff:e}");
                                cases += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    assert!(cases > 300, "only {cases} geometries exercised");
}

#[test]
fn composition_matches_elementwise_sum() {
    for (f, c, k, alpha) in [(8, 3, 3, Alpha::HALF), (16, 4, 3, Alpha::new(1, 4).unwrap()), (8, 2, 1, Alpha::new(3, 4).unwrap())] {
        let g = LinearConvGeometry::new(f, c, (k, k), alpha);
        let params = LinearConvParams::<f64>::init_seeded(g, CoeffMode::Full, 3).unwrap();
        let (p, s) = g.split().unwrap();
        let Coefficients::Full(a) = params.coefficients() else { unreachable!() };
        let composed = params.compose_weights().unwrap();
        let d = g.patch_len();
        assert_eq!(composed.shape(), &[f, c, k, k]);
        assert_eq!(&composed.data()[..p * d], params.primary().data(), "primaries come first, unchanged");
        let expected = naive_secondaries(params.primary(), a.data(), s);
        assert!(max_abs_diff(&composed.data()[p * d..], &expected) < 1e-6);
    }
}

#[test]
fn low_rank_equals_dense_product_of_factors() {
    let g = LinearConvGeometry::new(32, 4, (3, 3), Alpha::HALF);
    let params = LinearConvParams::<f64>::init_seeded(g, CoeffMode::LowRank { rank: 5 }, 9).unwrap();
    let Coefficients::LowRank { left, right } = params.coefficients() else { unreachable!() };
    let dense = naive_matmul(left.data(), right.data(), 16, 5, 16);
    let composed = params.compose_weights().unwrap();
    let expected = naive_secondaries(params.primary(), &dense, 16);
    assert!(max_abs_diff(&composed.data()[16 * 36..], &expected) < 1e-12);
}

#[test]
fn correlation_loss_matches_pairwise_cosines() {
    let mut r = rng(22);
    let w = random(&[16, 3, 3, 3], &mut r);
    let expected = pairwise_cosine_loss(w.data(), 16);
    let got = corr_loss_value(&[&w]).unwrap();
    assert!((got - expected).abs() < 1e-10 * expected.max(1.0), "{got} vs {expected}");

    let report = correlation_report(1, &w).unwrap();
    assert!((report.loss_contribution - expected).abs() < 1e-10 * expected);
    for i in 0..16 {
        assert!((report.at(i, i) - 1.0).abs() < 1e-12);
    }

    let w2 = random(&[8, 5], &mut r);
    let both = corr_loss_value(&[&w, &w2]).unwrap();
    assert!((both - expected - pairwise_cosine_loss(w2.data(), 8)).abs() < 1e-9);
}

#[test]
fn orthonormal_rows_have_zero_loss() {
    let mut eye = linearconv::Tensor::<f64>::eye(6);
    eye.data_mut().iter_mut().for_each(|v| *v *= 3.0);
    assert!(corr_loss_value(&[&eye]).unwrap() < 1e-15);
}
