//! Forward ops against naive reference implementations, and backward
//! against finite differences over many random draws.

use fcl_tensor::{grad_check, Tape, Tensor, TensorError, IGNORE_LABEL};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn naive_conv(x: &Tensor, k: &Tensor, b: &Tensor) -> Vec<f64> {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let cout = k.shape()[0];
    let mut out = vec![0.0; cout * h * w];
    for o in 0..cout {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = b.data()[o];
                for i in 0..cin {
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let sy = y as isize + dy as isize - 1;
                            let sx = xx as isize + dx as isize - 1;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            acc += k.data()[((o * cin + i) * 3 + dy) * 3 + dx] * x.data()[(i * h + sy as usize) * w + sx as usize];
                        }
                    }
                }
                out[(o * h + y) * w + xx] = acc;
            }
        }
    }
    out
}

fn naive_ce(z: &Tensor, labels: &[u8]) -> f64 {
    let (c, plane) = (z.shape()[0], labels.len());
    let mut total = 0.0;
    let mut n = 0;
    for (p, &l) in labels.iter().enumerate() {
        if l == IGNORE_LABEL {
            continue;
        }
        let col: Vec<f64> = (0..c).map(|k| z.data()[k * plane + p]).collect();
        let denom: f64 = col.iter().map(|v| v.exp()).sum();
        total -= (col[l as usize].exp() / denom).ln();
        n += 1;
    }
    total / n as f64
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + y.abs()))
}

#[test]
fn conv_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for &(cin, cout, h, w) in &[(1, 1, 1, 1), (3, 8, 5, 7), (2, 4, 1, 6), (4, 2, 6, 1)] {
        let x = random(&mut rng, &[cin, h, w]);
        let k = random(&mut rng, &[cout, cin, 3, 3]);
        let b = random(&mut rng, &[cout]);
        let mut tape = Tape::new();
        let (xv, kv, bv) = (tape.constant(x.clone()).unwrap(), tape.constant(k.clone()).unwrap(), tape.constant(b.clone()).unwrap());
        let y = tape.conv2d(xv, kv, bv).unwrap();
        assert!(close(tape.value(y).data(), &naive_conv(&x, &k, &b), 1e-12));
    }
}

#[test]
fn pointwise_matches_per_pixel_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random(&mut rng, &[5, 3, 4]);
    let wt = random(&mut rng, &[3, 5]);
    let b = random(&mut rng, &[3]);
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.constant(x.clone()).unwrap(), tape.constant(wt.clone()).unwrap(), tape.constant(b.clone()).unwrap());
    let y = tape.pointwise_conv(xv, wv, bv).unwrap();
    let plane = 12;
    for o in 0..3 {
        for p in 0..plane {
            let expect: f64 = b.data()[o] + (0..5).map(|i| wt.data()[o * 5 + i] * x.data()[i * plane + p]).sum::<f64>();
            assert!((tape.value(y).data()[o * plane + p] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn cross_entropy_matches_naive_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let z = random(&mut rng, &[4, 3, 3]);
    let labels: Vec<u8> = (0..9).map(|p| if p % 4 == 3 { IGNORE_LABEL } else { (p % 4) as u8 }).collect();
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone()).unwrap();
    let l = tape.pixel_cross_entropy(zv, &labels, IGNORE_LABEL).unwrap();
    assert!((tape.value(l).item() - naive_ce(&z, &labels)).abs() < 1e-12);
}

#[test]
fn ignored_pixels_do_not_change_loss() {
    let z = Tensor::new(vec![2, 1, 3], vec![0.3, -0.2, 9.0, 1.0, 0.5, -9.0]).unwrap();
    let mut tape = Tape::new();
    let zv = tape.constant(z).unwrap();
    let a = tape.pixel_cross_entropy(zv, &[0, 1, IGNORE_LABEL], IGNORE_LABEL).unwrap();
    let b = tape.pixel_cross_entropy(zv, &[0, 1, IGNORE_LABEL], IGNORE_LABEL).unwrap();
    assert_eq!(tape.value(a).item(), tape.value(b).item());
    let sub = Tensor::new(vec![2, 1, 2], vec![0.3, -0.2, 1.0, 0.5]).unwrap();
    let sv = tape.constant(sub).unwrap();
    let c = tape.pixel_cross_entropy(sv, &[0, 1], IGNORE_LABEL).unwrap();
    assert!((tape.value(a).item() - tape.value(c).item()).abs() < 1e-15);
}

#[test]
fn global_pool_matches_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = random(&mut rng, &[3, 4, 5]);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone()).unwrap();
    let p = tape.global_avg_pool(xv).unwrap();
    for c in 0..3 {
        let m = x.row(c).iter().sum::<f64>() / 20.0;
        assert!((tape.value(p).data()[c] - m).abs() < 1e-15);
    }
}

/// Small segmenter plus loss, the composition the training loops differentiate.
fn seg_loss(tape: &mut Tape, v: &[fcl_tensor::Var], image: &Tensor, labels: &[u8]) -> fcl_tensor::Result<fcl_tensor::Var> {
    let x = tape.constant(image.clone())?;
    let h = tape.conv2d(x, v[0], v[1])?;
    let h = tape.relu(h)?;
    let h = tape.conv2d(h, v[2], v[3])?;
    let h = tape.tanh(h)?;
    let z = tape.pointwise_conv(h, v[4], v[5])?;
    tape.pixel_cross_entropy(z, labels, IGNORE_LABEL)
}

#[test]
fn segmenter_gradients_match_finite_differences_over_seeds() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = random(&mut rng, &[2, 4, 4]);
        let mut labels: Vec<u8> = (0..16).map(|_| if rng.random_bool(0.2) { IGNORE_LABEL } else { rng.random_range(0..3) }).collect();
        labels[0] = 1;
        let params = vec![
            random(&mut rng, &[3, 2, 3, 3]),
            random(&mut rng, &[3]),
            random(&mut rng, &[4, 3, 3, 3]),
            random(&mut rng, &[4]),
            random(&mut rng, &[3, 4]),
            random(&mut rng, &[3]),
        ];
        let report = grad_check(|t, v| seg_loss(t, v, &image, &labels), &params, 1e-5, 1e-4).unwrap();
        assert!(report.passed, "seed {seed}: {report:?}");
    }
}

#[test]
fn auxiliary_ops_gradients_match_finite_differences() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let params = vec![
            random(&mut rng, &[4]),
            random(&mut rng, &[3, 4]),
            random(&mut rng, &[3]),
            random(&mut rng, &[3, 2]),
            random(&mut rng, &[3]),
        ];
        let report = grad_check(
            |t, v| {
                let a = t.affine(v[0], v[1], v[2])?;
                let a = t.tanh(a)?;
                let w = t.softmax(a)?;
                let r0 = t.slice(v[3], 0, 2)?;
                let r1 = t.slice(v[3], 2, 2)?;
                let r2 = t.slice(v[3], 4, 2)?;
                let fused = t.weighted_sum(&[r0, r1, r2], w)?;
                let scaled = t.channel_scale(v[3], v[4])?;
                let flat = t.reshape(scaled, &[6])?;
                let c = t.concat(&[fused, flat])?;
                let d = t.sub(c, c)?;
                let e = t.add(c, d)?;
                let m = t.mul(e, e)?;
                let s = t.square(m)?;
                let q = t.mean(s)?;
                let p = t.scale(q, 0.5)?;
                let cube = t.reshape(e, &[2, 2, 2])?;
                let g = t.global_avg_pool(cube)?;
                let gs = t.sum(g)?;
                t.add(p, gs)
            },
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "seed {seed}: {report:?}");
    }
}

#[test]
fn extreme_logit_gives_near_zero_loss_and_finite_gradient() {
    let mut tape = Tape::new();
    let z = tape.param(Tensor::new(vec![2, 1, 1], vec![1000.0, 0.0]).unwrap()).unwrap();
    let l = tape.pixel_cross_entropy(z, &[0], IGNORE_LABEL).unwrap();
    assert!(tape.value(l).item() < 1e-12);
    let g = tape.backward(l).unwrap();
    assert!(g.get(z).unwrap().all_finite());
}

#[test]
fn all_ignored_batch_is_degenerate() {
    let mut tape = Tape::new();
    let z = tape.param(Tensor::zeros(&[3, 2, 2])).unwrap();
    assert_eq!(tape.pixel_cross_entropy(z, &[IGNORE_LABEL; 4], IGNORE_LABEL), Err(TensorError::DegenerateBatch));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cross_entropy_is_nonnegative(
        vals in proptest::collection::vec(-30.0f64..30.0, 12),
        labels in proptest::collection::vec(0u8..3, 4),
    ) {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::new(vec![3, 2, 2], vals).unwrap()).unwrap();
        let l = tape.pixel_cross_entropy(z, &labels, IGNORE_LABEL).unwrap();
        prop_assert!(tape.value(l).item() >= 0.0);
    }

    #[test]
    fn conv_is_linear_in_input(
        a in proptest::collection::vec(-1.0f64..1.0, 18),
        b in proptest::collection::vec(-1.0f64..1.0, 18),
        k in proptest::collection::vec(-1.0f64..1.0, 18),
    ) {
        let run = |data: Vec<f64>| {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(vec![2, 3, 3], data).unwrap()).unwrap();
            let kv = tape.constant(Tensor::new(vec![1, 2, 3, 3], k.clone()).unwrap()).unwrap();
            let bv = tape.constant(Tensor::zeros(&[1])).unwrap();
            let y = tape.conv2d(x, kv, bv).unwrap();
            tape.value(y).data().to_vec()
        };
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let lhs = run(sum);
        let ra = run(a.clone());
        let rb = run(b.clone());
        for i in 0..lhs.len() {
            prop_assert!((lhs[i] - ra[i] - rb[i]).abs() < 1e-12);
        }
    }
}
