mod common;

use common::{grad_check, random_tensor, weighted_sum};
use sesemi::tensor::{ActivationKind, BatchNormState, NormMode};
use sesemi::{Error, Graph, RngStream, Tensor};

fn direct_conv(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
    let [b, c, h, w] = x.dims4().unwrap();
    let [f, _, kh, kw] = k.dims4().unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let at = |t: &Tensor, i: [usize; 4]| {
        let s = t.shape();
        t.data()[((i[0] * s[1] + i[1]) * s[2] + i[2]) * s[3] + i[3]]
    };
    let mut out = Tensor::zeros(&[b, f, oh, ow]);
    for bi in 0..b {
        for fi in 0..f {
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut s = 0.0;
                    for ci in 0..c {
                        for a in 0..kh {
                            for bb in 0..kw {
                                let ii = (oi * stride + a) as isize - pad as isize;
                                let jj = (oj * stride + bb) as isize - pad as isize;
                                if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                                    s += at(x, [bi, ci, ii as usize, jj as usize])
                                        * at(k, [fi, ci, a, bb]);
                                }
                            }
                        }
                    }
                    out.data_mut()[((bi * f + fi) * oh + oi) * ow + oj] = s;
                }
            }
        }
    }
    out
}

#[test]
fn matmul_identity_and_small_product() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let i = g.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let ones = g.constant(Tensor::from_rows(&[&[1.0], &[1.0]]));
    let ai = g.matmul(a, i).unwrap();
    assert_eq!(g.value(ai), g.value(a));
    let p = g.matmul(a, ones).unwrap();
    assert_eq!(g.value(p).data(), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Dimension(_)));
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let mut rng = RngStream::new(1);
    let a = random_tensor(&[3, 4], &mut rng);
    let b = random_tensor(&[4, 2], &mut rng);
    let errs = grad_check(&[a, b], 1e-5, |g, v| {
        let y = g.matmul(v[0], v[1])?;
        weighted_sum(g, y, 11)
    });
    assert!(errs.iter().all(|&e| e < 1e-6), "{errs:?}");
}

#[test]
fn conv_identity_kernel_and_small_case() {
    let mut g = Graph::new();
    let x = Tensor::new(vec![1, 1, 3, 3], (0..9).map(f64::from).collect()).unwrap();
    let xv = g.constant(x.clone());
    let k = g.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
    let y = g.conv2d(xv, k, None, 1, 0).unwrap();
    assert_eq!(g.value(y), &x);

    let x = g.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let k = g.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let y = g.conv2d(x, k, None, 1, 0).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
    assert_eq!(g.value(y).data(), &[5.0]);
}

#[test]
fn conv_kernel_larger_than_padded_input_is_rejected() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
    let k = g.constant(Tensor::zeros(&[1, 1, 5, 5]));
    assert!(matches!(g.conv2d(x, k, None, 1, 1), Err(Error::Dimension(_))));
    assert!(g.conv2d(x, k, None, 1, 2).is_ok());
}

#[test]
fn conv_matches_direct_summation() {
    let mut rng = RngStream::new(2);
    let x = random_tensor(&[2, 3, 8, 8], &mut rng);
    let k = random_tensor(&[4, 3, 3, 3], &mut rng);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1), (3, 2)] {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let kv = g.constant(k.clone());
        let y = g.conv2d(xv, kv, None, stride, pad).unwrap();
        let oracle = direct_conv(&x, &k, stride, pad);
        assert_eq!(g.value(y).shape(), oracle.shape());
        assert!(g.value(y).max_abs_diff(&oracle) < 1e-10);
    }
}

#[test]
fn conv_gradients_match_finite_differences() {
    let mut rng = RngStream::new(3);
    let x = random_tensor(&[2, 3, 5, 5], &mut rng);
    let k = random_tensor(&[4, 3, 3, 3], &mut rng);
    let b = random_tensor(&[4], &mut rng);
    let errs = grad_check(&[x, k, b], 1e-5, |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
        weighted_sum(g, y, 12)
    });
    assert!(errs.iter().all(|&e| e < 1e-6), "{errs:?}");
}

#[test]
fn maxpool_small_cases() {
    let mut g = Graph::new();
    let c = g.param(Tensor::full(&[1, 2, 4, 4], 0.7));
    let y = g.maxpool2d(c, 2, 2).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.7));

    let x = g.param(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = g.maxpool2d(x, 2, 2).unwrap();
    assert_eq!(g.value(y).data(), &[4.0]);
    let s = g.sum(y).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 0.0, 1.0]);

    let big = g.constant(Tensor::zeros(&[1, 1, 2, 3]));
    assert!(matches!(g.maxpool2d(big, 3, 1), Err(Error::Dimension(_))));
}

#[test]
fn maxpool_ties_route_to_first_position() {
    let mut g = Graph::new();
    let x = g.param(Tensor::new(vec![1, 1, 2, 2], vec![5.0, 5.0, 5.0, 5.0]).unwrap());
    let y = g.maxpool2d(x, 2, 2).unwrap();
    let s = g.sum(y).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn maxpool_matches_window_scan_and_finite_differences() {
    let mut rng = RngStream::new(4);
    let x = random_tensor(&[1, 1, 6, 6], &mut rng);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = g.maxpool2d(xv, 2, 2).unwrap();
    let d = x.data();
    for oi in 0..3 {
        for oj in 0..3 {
            let mut m = f64::NEG_INFINITY;
            for a in 0..2 {
                for b in 0..2 {
                    m = m.max(d[(2 * oi + a) * 6 + 2 * oj + b]);
                }
            }
            assert_eq!(g.value(y).data()[oi * 3 + oj], m);
        }
    }
    let errs = grad_check(&[x], 1e-6, |g, v| {
        let y = g.maxpool2d(v[0], 2, 2)?;
        weighted_sum(g, y, 13)
    });
    assert!(errs[0] < 1e-6, "{errs:?}");
}

#[test]
fn batchnorm_normalizes_per_channel() {
    let mut rng = RngStream::new(5);
    let x = Tensor::from_fn(&[4, 3, 5, 5], |i| 3.0 * rng.normal() + (i % 7) as f64);
    let mut st = BatchNormState::new(3);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let gamma = g.constant(Tensor::full(&[3], 1.0));
    let beta = g.constant(Tensor::zeros(&[3]));
    let y = g.batchnorm(xv, gamma, beta, &mut st, NormMode::Train).unwrap();
    let yv = g.value(y);
    for c in 0..3 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|b| yv.data()[(b * 3 + c) * 25..(b * 3 + c + 1) * 25].to_vec())
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-4);
    }
    assert_eq!(st.updates, 1);
}

#[test]
fn batchnorm_zero_gamma_gives_beta() {
    let mut rng = RngStream::new(6);
    let mut st = BatchNormState::new(2);
    let mut g = Graph::new();
    let xv = g.constant(random_tensor(&[3, 2, 2, 2], &mut rng));
    let gamma = g.constant(Tensor::zeros(&[2]));
    let beta = g.constant(Tensor::new(vec![2], vec![0.25, -1.5]).unwrap());
    let y = g.batchnorm(xv, gamma, beta, &mut st, NormMode::Train).unwrap();
    for (i, v) in g.value(y).data().iter().enumerate() {
        let ch = (i / 4) % 2;
        assert_eq!(*v, [0.25, -1.5][ch]);
    }
}

#[test]
fn batchnorm_eval_before_train_is_an_error() {
    let mut st = BatchNormState::new(1);
    let mut g = Graph::new();
    let xv = g.constant(Tensor::zeros(&[2, 1, 2, 2]));
    let gamma = g.constant(Tensor::full(&[1], 1.0));
    let beta = g.constant(Tensor::zeros(&[1]));
    assert!(matches!(
        g.batchnorm(xv, gamma, beta, &mut st, NormMode::Eval),
        Err(Error::Uninitialized(_))
    ));
}

#[test]
fn batchnorm_gradients_match_finite_differences() {
    let mut rng = RngStream::new(7);
    let x = random_tensor(&[3, 2, 3, 3], &mut rng);
    let gamma = Tensor::from_fn(&[2], |_| 1.0 + 0.3 * rng.normal());
    let beta = random_tensor(&[2], &mut rng);
    let errs = grad_check(&[x, gamma, beta], 1e-5, |g, v| {
        let mut st = BatchNormState::new(2);
        let y = g.batchnorm(v[0], v[1], v[2], &mut st, NormMode::Train)?;
        weighted_sum(g, y, 14)
    });
    assert!(errs.iter().all(|&e| e < 1e-4), "{errs:?}");
}

#[test]
fn leaky_relu_values_and_gradients() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
    let y = g.activation(x, ActivationKind::LeakyRelu(0.1)).unwrap();
    assert_eq!(g.value(y).data(), &[-0.1, 0.0, 2.0]);

    let pos = g.constant(Tensor::new(vec![3], vec![0.0, 1.5, 3.0]).unwrap());
    let y = g.activation(pos, ActivationKind::Relu).unwrap();
    assert_eq!(g.value(y), g.value(pos));

    assert!(g.activation(x, ActivationKind::LeakyRelu(1.0)).is_err());

    let mut rng = RngStream::new(8);
    // keep inputs away from the kink
    let x = Tensor::from_fn(&[4, 5], |_| {
        let v = rng.normal();
        if v.abs() < 0.1 { v.signum() * 0.5 } else { v }
    });
    let errs = grad_check(&[x], 1e-5, |g, v| {
        let y = g.activation(v[0], ActivationKind::LeakyRelu(0.1))?;
        weighted_sum(g, y, 15)
    });
    assert!(errs[0] < 1e-6);
}

#[test]
fn dropout_modes_and_statistics() {
    let mut g = Graph::new();
    let mut rng = RngStream::new(9);
    let x = g.constant(Tensor::full(&[1000, 1000], 2.0));
    assert_eq!(g.dropout(x, 0.5, &mut rng, NormMode::Eval).unwrap(), x);
    assert_eq!(g.dropout(x, 0.0, &mut rng, NormMode::Train).unwrap(), x);
    assert!(matches!(
        g.dropout(x, 1.0, &mut rng, NormMode::Train),
        Err(Error::Parameter(_))
    ));

    let y = g.dropout(x, 0.5, &mut rng, NormMode::Train).unwrap();
    let yv = g.value(y);
    let survivors = yv.data().iter().filter(|&&v| v != 0.0).count() as f64 / 1e6;
    assert!((survivors - 0.5).abs() < 0.005, "{survivors}");
    assert!((yv.mean() - 2.0).abs() / 2.0 < 0.01);

    let mut replay = RngStream::new(9);
    let mut g2 = Graph::new();
    let x2 = g2.constant(Tensor::full(&[1000, 1000], 2.0));
    let y2 = g2.dropout(x2, 0.5, &mut replay, NormMode::Train).unwrap();
    assert_eq!(g2.value(y2), yv);
}

#[test]
fn global_avg_pool_cases() {
    let mut g = Graph::new();
    let x = g.param(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap());
    let y = g.global_avg_pool(x).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1]);
    assert_eq!(g.value(y).data(), &[4.0]);
    let s = g.scale(y, 2.0).unwrap();
    let s = g.sum(s).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 0.5));

    let single = g.constant(Tensor::new(vec![2, 3, 1, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let y = g.global_avg_pool(single).unwrap();
    assert_eq!(g.value(y).data(), g.value(single).data());
}

#[test]
fn cross_entropy_cases() {
    let mut g = Graph::new();
    for k in [2usize, 3, 6, 10] {
        let z = g.constant(Tensor::full(&[4, k], 0.3));
        let l = g.softmax_cross_entropy(z, &[0, 1, 1, 0]).unwrap();
        assert!((g.value(l).item() - (k as f64).ln()).abs() < 1e-12);
    }
    let mut logits = Tensor::zeros(&[1, 10]);
    logits.data_mut()[4] = 50.0;
    let z = g.constant(logits);
    let l = g.softmax_cross_entropy(z, &[4]).unwrap();
    assert!(g.value(l).item() < 1e-9);
    assert!(matches!(g.softmax_cross_entropy(z, &[10]), Err(Error::Index(_))));

    let mut rng = RngStream::new(10);
    let z = random_tensor(&[4, 6], &mut rng);
    let errs = grad_check(&[z], 1e-5, |g, v| g.softmax_cross_entropy(v[0], &[0, 5, 2, 2]));
    assert!(errs[0] < 1e-6);
}

#[test]
fn backward_linear_and_fan_out() {
    let mut g = Graph::new();
    let theta = g.param(Tensor::from_fn(&[2, 3], |i| i as f64));
    let s = g.sum(theta).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.get(theta).unwrap().data().iter().all(|&v| v == 1.0));

    let mut g = Graph::new();
    let theta = g.param(Tensor::scalar(1.5));
    let y = g.add(theta, theta).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(theta).unwrap().item(), 2.0);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let theta = g.param(Tensor::zeros(&[2]));
    assert!(matches!(g.backward(theta), Err(Error::Contract(_))));
}

#[test]
fn non_finite_values_surface_as_errors() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[2], 1e308));
    assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite { .. })));
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::full(&[2, 2], 1.0));
    let p = g.param(Tensor::full(&[2, 2], 2.0));
    let y = g.matmul(c, p).unwrap();
    let s = g.sum(y).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.get(c).is_none());
    assert!(grads.get(p).is_some());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn conv_equals_direct_summation(
            b in 1usize..=4, c in 1usize..=4, f in 1usize..=4,
            h in 3usize..=8, w in 3usize..=8, kh in 1usize..=3, kw in 1usize..=3,
            stride in 1usize..=2, pad in 0usize..=1, seed in any::<u64>()
        ) {
            let mut rng = RngStream::new(seed);
            let x = random_tensor(&[b, c, h, w], &mut rng);
            let k = random_tensor(&[f, c, kh, kw], &mut rng);
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let kv = g.constant(k.clone());
            let y = g.conv2d(xv, kv, None, stride, pad).unwrap();
            prop_assert!(g.value(y).max_abs_diff(&direct_conv(&x, &k, stride, pad)) < 1e-10);
        }

        #[test]
        fn uniform_logits_give_ln_k(k in 2usize..50, b in 1usize..8, v in -5.0f64..5.0) {
            let mut g = Graph::new();
            let z = g.constant(Tensor::full(&[b, k], v));
            let targets: Vec<usize> = (0..b).map(|i| i % k).collect();
            let l = g.softmax_cross_entropy(z, &targets).unwrap();
            prop_assert!((g.value(l).item() - (k as f64).ln()).abs() < 1e-12);
        }
    }
}
