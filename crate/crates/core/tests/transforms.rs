use sesemi::transforms::{
    apply_geo, augment, expand_proxy_batch, gcn, AugmentPolicy, GeoTransform, ZcaState,
};
use sesemi::{RngStream, Tensor};

/// Source-lookup oracle: output pixel (r, c) reads input pixel src(r, c).
fn oracle(image: &Tensor, t: GeoTransform) -> Tensor {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let src = |r: usize, col: usize| -> (usize, usize) {
        match t {
            GeoTransform::Rot0 => (r, col),
            GeoTransform::Rot90 => (col, w - 1 - r),
            GeoTransform::Rot180 => (h - 1 - r, w - 1 - col),
            GeoTransform::Rot270 => (h - 1 - col, r),
            GeoTransform::HFlip => (r, w - 1 - col),
            GeoTransform::VFlip => (h - 1 - r, col),
        }
    };
    let mut out = Tensor::zeros(image.shape());
    for ch in 0..c {
        for r in 0..h {
            for col in 0..w {
                let (sr, sc) = src(r, col);
                out.data_mut()[(ch * h + r) * w + col] = image.data()[(ch * h + sr) * w + sc];
            }
        }
    }
    out
}

fn random_image(rng: &mut RngStream, c: usize, s: usize) -> Tensor {
    Tensor::from_fn(&[c, s, s], |_| rng.normal())
}

#[test]
fn every_transform_matches_the_permutation_oracle() {
    let mut rng = RngStream::new(1);
    for i in 0..100 {
        let img = random_image(&mut rng, 1 + i % 3, 2 + i % 7);
        for t in GeoTransform::ALL {
            assert_eq!(apply_geo(&img, t).unwrap(), oracle(&img, t), "{t:?}");
        }
    }
}

#[test]
fn periods_and_composition() {
    let mut rng = RngStream::new(2);
    let img = random_image(&mut rng, 3, 8);
    let pow = |t, k| (0..k).fold(img.clone(), |acc, _| apply_geo(&acc, t).unwrap());
    assert_eq!(pow(GeoTransform::Rot90, 4), img);
    assert_eq!(pow(GeoTransform::Rot180, 2), img);
    assert_eq!(pow(GeoTransform::Rot270, 4), img);
    assert_eq!(pow(GeoTransform::HFlip, 2), img);
    assert_eq!(pow(GeoTransform::VFlip, 2), img);
    assert_eq!(apply_geo(&img, GeoTransform::Rot0).unwrap(), img);
    let hv = apply_geo(&apply_geo(&img, GeoTransform::HFlip).unwrap(), GeoTransform::VFlip).unwrap();
    assert_eq!(apply_geo(&img, GeoTransform::Rot180).unwrap(), hv);
}

#[test]
fn transforms_preserve_pixel_multiset() {
    let mut rng = RngStream::new(3);
    let img = random_image(&mut rng, 2, 6);
    let sorted = |t: &Tensor| {
        let mut v = t.data().to_vec();
        v.sort_by(f64::total_cmp);
        v
    };
    for t in GeoTransform::ALL {
        assert_eq!(sorted(&apply_geo(&img, t).unwrap()), sorted(&img));
    }
}

#[test]
fn proxy_expansion_sizes_and_ordering() {
    let mut rng = RngStream::new(4);
    let batch = Tensor::from_fn(&[16, 3, 8, 8], |_| rng.normal());
    let (out, labels) = expand_proxy_batch(&batch).unwrap();
    assert_eq!(out.outer(), 96);
    assert_eq!(labels.len(), 96);
    for k in 0..6 {
        assert_eq!(labels.iter().filter(|&&l| l == k).count(), 16);
    }
    for (slot, &label) in labels.iter().enumerate() {
        let src = Tensor::new(vec![3, 8, 8], batch.slice_outer(slot / 6).to_vec()).unwrap();
        let t = GeoTransform::from_label(label).unwrap();
        assert_eq!(label, slot % 6);
        assert_eq!(out.slice_outer(slot), apply_geo(&src, t).unwrap().data());
    }

    let constant = Tensor::full(&[1, 1, 4, 4], 0.5);
    let (out, labels) = expand_proxy_batch(&constant).unwrap();
    assert_eq!(labels, vec![0, 1, 2, 3, 4, 5]);
    assert!(out.data().iter().all(|&v| v == 0.5));
}

#[test]
fn augment_identity_policy() {
    let mut rng = RngStream::new(5);
    let img = random_image(&mut rng, 3, 8);
    assert_eq!(augment(&img, &AugmentPolicy::NONE, &mut rng).unwrap(), img);
}

#[test]
fn augment_translation_is_a_shift_with_zero_border() {
    let mut rng = RngStream::new(6);
    let policy = AugmentPolicy {
        max_translate: 2,
        hflip_enabled: false,
        noise_sigma: 0.0,
    };
    let s = 8;
    // strictly positive pixels so a zero can only come from the fill
    let img = Tensor::from_fn(&[1, s, s], |i| 1.0 + i as f64);
    for _ in 0..50 {
        let out = augment(&img, &policy, &mut rng).unwrap();
        let found = (-2i64..=2).flat_map(|dy| (-2i64..=2).map(move |dx| (dy, dx))).find(|&(dy, dx)| {
            (0..s as i64).all(|r| {
                (0..s as i64).all(|c| {
                    let (sr, sc) = (r - dy, c - dx);
                    let expect = if sr >= 0 && sc >= 0 && sr < s as i64 && sc < s as i64 {
                        img.data()[(sr * s as i64 + sc) as usize]
                    } else {
                        0.0
                    };
                    out.data()[(r * s as i64 + c) as usize] == expect
                })
            })
        });
        assert!(found.is_some(), "augmented image is not a shift within ±2");
    }
}

#[test]
fn augment_noise_has_requested_std() {
    let mut rng = RngStream::new(7);
    let policy = AugmentPolicy {
        max_translate: 0,
        hflip_enabled: false,
        noise_sigma: 0.15,
    };
    let img = Tensor::full(&[1, 1000, 1000], 0.3);
    let out = augment(&img, &policy, &mut rng).unwrap();
    let diffs: Vec<f64> = out.data().iter().map(|v| v - 0.3).collect();
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let std = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / diffs.len() as f64).sqrt();
    assert!((std - 0.15).abs() < 0.002, "{std}");
}

#[test]
fn augment_is_reproducible_per_seed() {
    let policy = AugmentPolicy {
        max_translate: 2,
        hflip_enabled: true,
        noise_sigma: 0.15,
    };
    let img = Tensor::from_fn(&[3, 8, 8], |i| i as f64);
    let a = augment(&img, &policy, &mut RngStream::new(8)).unwrap();
    let b = augment(&img, &policy, &mut RngStream::new(8)).unwrap();
    assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
               b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn gcn_rows_are_centred_unit_vectors_and_idempotent() {
    let mut rng = RngStream::new(9);
    let x = Tensor::from_fn(&[200, 30], |_| 5.0 * rng.normal() + 2.0);
    let y = gcn(&x);
    for i in 0..200 {
        let row = y.slice_outer(i);
        let mean = row.iter().sum::<f64>() / 30.0;
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(mean.abs() < 1e-10);
        assert!((norm - 1.0).abs() < 1e-8);
    }
    assert!(gcn(&y).max_abs_diff(&y) < 1e-7);
}

fn covariance(x: &Tensor) -> Vec<f64> {
    let (n, d) = (x.outer(), x.inner_len());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.slice_outer(i)) {
            *m += v / n as f64;
        }
    }
    let mut cov = vec![0.0; d * d];
    for i in 0..n {
        let r = x.slice_outer(i);
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] += (r[a] - mean[a]) * (r[b] - mean[b]) / n as f64;
            }
        }
    }
    cov
}

#[test]
fn zca_whitened_covariance_is_identity() {
    let mut rng = RngStream::new(10);
    let (n, d) = (500, 48);
    // correlated data: x = z · A with a random mixing matrix
    let z = Tensor::from_fn(&[n, d], |_| rng.normal());
    let a = Tensor::from_fn(&[d, d], |_| rng.normal() / (d as f64).sqrt());
    let x = z.matmul(&a).unwrap().map(|v| v + 0.3);
    let state = ZcaState::fit(&x, 1e-9).unwrap();
    for i in 0..d {
        for j in 0..d {
            assert!((state.whitening[i * d + j] - state.whitening[j * d + i]).abs() < 1e-8);
        }
    }
    let cov = covariance(&state.apply(&x).unwrap());
    for a in 0..d {
        for b in 0..d {
            let target = if a == b { 1.0 } else { 0.0 };
            assert!((cov[a * d + b] - target).abs() < 1e-3, "({a},{b}) = {}", cov[a * d + b]);
        }
    }
}

#[test]
fn zca_of_identity_covariance_is_identity() {
    let d = 6;
    let s = (d as f64).sqrt();
    let mut rows = Vec::new();
    for i in 0..d {
        for sign in [1.0, -1.0] {
            let mut r = vec![0.0; d];
            r[i] = sign * s;
            rows.push(r);
        }
    }
    let x = Tensor::stack(&[d], &rows).unwrap();
    let state = ZcaState::fit(&x, 1e-9).unwrap();
    for i in 0..d {
        for j in 0..d {
            let target = if i == j { 1.0 } else { 0.0 };
            assert!((state.whitening[i * d + j] - target).abs() < 1e-3);
        }
    }
}
