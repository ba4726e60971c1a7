use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::gradcheck;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Direct six-loop convolution, summing taps in (c, ki, kj) order.
fn conv_oracle(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (f, kk) = (k.shape()[0], k.shape()[2]);
    let oh = (h + 2 * pad - kk) / stride + 1;
    let ow = (w + 2 * pad - kk) / stride + 1;
    let mut out = Vec::new();
    for b in 0..n {
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ki in 0..kk {
                            for kj in 0..kk {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x.at(&[b, ci, iy as usize, ix as usize])
                                        * k.at(&[fi, ci, ki, kj]);
                                }
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    Tensor::new([n, f, oh, ow], out).unwrap()
}

fn pool_oracle(x: &Tensor, kind: PoolKind, k: usize, stride: usize) -> Tensor {
    let s = x.shape();
    let oh = (s[2] - k) / stride + 1;
    let ow = (s[3] - k) / stride + 1;
    let mut out = Vec::new();
    for b in 0..s[0] {
        for c in 0..s[1] {
            for oy in 0..oh {
                for ox in 0..ow {
                    let window: Vec<f64> = (0..k)
                        .flat_map(|i| (0..k).map(move |j| (i, j)))
                        .map(|(i, j)| x.at(&[b, c, oy * stride + i, ox * stride + j]))
                        .collect();
                    out.push(match kind {
                        PoolKind::Max => window.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                        PoolKind::Avg => window.iter().sum::<f64>() / (k * k) as f64,
                    });
                }
            }
        }
    }
    Tensor::new([s[0], s[1], oh, ow], out).unwrap()
}

#[test]
fn add_is_elementwise() {
    let mut g = Graph::default();
    let a = g.constant(Tensor::new([2], vec![1.0, 2.0]).unwrap());
    let b = g.constant(Tensor::new([2], vec![3.0, 4.0]).unwrap());
    let c = g.add(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[4.0, 6.0]);
}

#[test]
fn mul_by_zero_gives_zero_gradient() {
    let mut g = Graph::default();
    let x = g.leaf(Tensor::new([3], vec![1.5, -2.0, 7.0]).unwrap(), true);
    let y = g.mul_scalar(x, 0.0).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn log_inverts_exp() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::default();
    let x = g.constant(random(&[64], &mut rng).map(|v| v * 20.0));
    let e = g.exp(x).unwrap();
    let l = g.log(e).unwrap();
    for (a, b) in g.value(x).data().iter().zip(g.value(l).data()) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn elementwise_errors() {
    let mut g = Graph::default();
    let a = g.constant(Tensor::zeros([2]));
    let b = g.constant(Tensor::zeros([3]));
    assert!(matches!(g.add(a, b), Err(Error::Shape { .. })));
    assert!(matches!(g.log(a), Err(Error::Domain { op: "log", .. })));
    assert!(matches!(g.div(a, a), Err(Error::Domain { op: "div", .. })));
    let s = g.constant(Tensor::scalar(2.0));
    let ok = g.add(b, s).unwrap();
    assert_eq!(g.value(ok).data(), &[2.0, 2.0, 2.0]);
}

#[test]
fn max_routes_ties_to_left_operand() {
    let mut g = Graph::default();
    let a = g.leaf(Tensor::new([3], vec![1.0, 5.0, 2.0]).unwrap(), true);
    let b = g.leaf(Tensor::new([3], vec![1.0, 4.0, 3.0]).unwrap(), true);
    let m = g.binary(BinaryKind::Max, a, b).unwrap();
    assert_eq!(g.value(m).data(), &[1.0, 5.0, 3.0]);
    let s = g.sum(m).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(a).unwrap().data(), &[1.0, 1.0, 0.0]);
    assert_eq!(g.grad(b).unwrap().data(), &[0.0, 0.0, 1.0]);
}

#[test]
fn identity_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::default();
    let eye = g.constant(Tensor::from_fn([3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
    let a = g.constant(random(&[3, 5], &mut rng));
    let p = g.matmul(eye, a).unwrap();
    assert_eq!(g.value(p), g.value(a));
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 2], &mut rng);
    let mut expected = vec![0.0; 6];
    for i in 0..3 {
        for j in 0..2 {
            for k in 0..4 {
                expected[i * 2 + j] += a.at(&[i, k]) * b.at(&[k, j]);
            }
        }
    }
    let mut g = Graph::default();
    let (va, vb) = (g.constant(a), g.constant(b));
    let p = g.matmul(va, vb).unwrap();
    assert_eq!(g.value(p).data(), expected.as_slice());

    let bad = g.constant(Tensor::zeros([3, 2]));
    assert!(g.matmul(va, bad).is_err());
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = [random(&[3, 4], &mut rng), random(&[4, 2], &mut rng)];
    let r = gradcheck::check(&inputs, gradcheck::STEP, |g, v| {
        let p = g.matmul(v[0], v[1])?;
        g.sum(p)
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

#[test]
fn conv_identity_and_zero_kernels() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut g = Graph::default();
    let x = g.constant(random(&[2, 1, 5, 6], &mut rng));
    let one = g.constant(Tensor::ones([1, 1, 1, 1]));
    let y = g.conv2d(x, one, 1, 0).unwrap();
    assert_eq!(g.value(y), g.value(x));

    let x3 = g.constant(random(&[1, 2, 5, 5], &mut rng));
    let zero = g.constant(Tensor::zeros([3, 2, 3, 3]));
    let z = g.conv2d(x3, zero, 1, 1).unwrap();
    assert!(g.value(z).data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_matches_direct_loops_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&[1, 2, 5, 5], &mut rng);
    let k = random(&[3, 2, 3, 3], &mut rng);
    let mut g = Graph::default();
    let (vx, vk) = (g.constant(x.clone()), g.constant(k.clone()));
    let y = g.conv2d(vx, vk, 1, 1).unwrap();
    assert_eq!(g.value(y), &conv_oracle(&x, &k, 1, 1));

    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let h = rng.random_range(3..=8);
        let w = rng.random_range(3..=8);
        let kk = rng.random_range(1..=3);
        let stride = rng.random_range(1..=2);
        let pad = rng.random_range(0..=1);
        let x = random(&[2, 2, h, w], &mut rng);
        let k = random(&[3, 2, kk, kk], &mut rng);
        let mut g = Graph::default();
        let (vx, vk) = (g.constant(x.clone()), g.constant(k.clone()));
        let y = g.conv2d(vx, vk, stride, pad).unwrap();
        assert_eq!(g.value(y), &conv_oracle(&x, &k, stride, pad), "seed {seed}");
    }
}

#[test]
fn conv_rejects_kernel_larger_than_padded_input() {
    let mut g = Graph::default();
    let x = g.constant(Tensor::zeros([1, 1, 2, 2]));
    let k = g.constant(Tensor::zeros([1, 1, 5, 5]));
    assert!(matches!(g.conv2d(x, k, 1, 1), Err(Error::Shape { op: "conv2d", .. })));
}

#[test]
fn pooling_cases() {
    let mut g = Graph::default();
    let c = g.constant(Tensor::full([1, 2, 4, 4], 3.25));
    let avg = g.pool2d(PoolKind::Avg, c, 2, 2).unwrap();
    assert!(g.value(avg).data().iter().all(|&v| v == 3.25));

    let m = g.constant(Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let mx = g.pool2d(PoolKind::Max, m, 2, 2).unwrap();
    assert_eq!(g.value(mx).data(), &[4.0]);

    assert!(g.pool2d(PoolKind::Max, m, 3, 1).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (kind, k, stride) in [(PoolKind::Max, 2, 2), (PoolKind::Avg, 3, 1), (PoolKind::Max, 3, 2)] {
        let x = random(&[2, 3, 7, 8], &mut rng);
        let v = g.constant(x.clone());
        let p = g.pool2d(kind, v, k, stride).unwrap();
        assert_eq!(g.value(p), &pool_oracle(&x, kind, k, stride));
    }
}

#[test]
fn max_pool_gradient_goes_to_first_maximum() {
    let mut g = Graph::default();
    let x = g.leaf(Tensor::new([1, 1, 2, 2], vec![2.0, 2.0, 1.0, 2.0]).unwrap(), true);
    let p = g.pool2d(PoolKind::Max, x, 2, 2).unwrap();
    let s = g.sum(p).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn softmax_cases() {
    let mut g = Graph::default();
    let eq = g.constant(Tensor::full([2, 7], 0.3));
    let s = g.softmax(eq).unwrap();
    for &v in g.value(s).data() {
        assert!((v - 1.0 / 7.0).abs() < 1e-15);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&[4, 7], &mut rng).map(|v| v * 5.0);
    let vx = g.constant(x.clone());
    let shifted = g.add_scalar(vx, 123.0).unwrap();
    let a = g.softmax(vx).unwrap();
    let b = g.softmax(shifted).unwrap();
    for (p, q) in g.value(a).data().iter().zip(g.value(b).data()) {
        assert!((p - q).abs() < 1e-12);
    }

    // direct exp/sum oracle
    for (r, row) in x.data().chunks(7).enumerate() {
        let total: f64 = row.iter().map(|v| v.exp()).sum();
        for (c, v) in row.iter().enumerate() {
            let expected = v.exp() / total;
            assert!((g.value(a).data()[r * 7 + c] - expected).abs() < 1e-14);
        }
        let sum: f64 = g.value(a).data()[r * 7..(r + 1) * 7].iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }
}

#[test]
fn backward_basics() {
    let mut g = Graph::default();
    let x = g.leaf(Tensor::scalar(3.0), true);
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[6.0]);

    let mut g = Graph::default();
    let x = g.leaf(Tensor::scalar(3.0), true);
    let c = g.constant(Tensor::scalar(4.0));
    let zero = g.mul_scalar(x, 0.0).unwrap();
    let y = g.add(zero, c).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[0.0]);

    let mut g = Graph::default();
    let x = g.leaf(Tensor::zeros([2]), true);
    let y = g.exp(x).unwrap();
    assert!(matches!(g.backward(y), Err(Error::NotScalar(_))));
}

#[test]
fn non_finite_results_name_the_producing_node() {
    let mut g = Graph::default();
    let x = g.constant(Tensor::scalar(800.0));
    let err = g.exp(x).unwrap_err();
    match err {
        Error::NonFinite { node, op, .. } => {
            assert_eq!(node, 1);
            assert_eq!(op, "exp");
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn tape_is_topologically_ordered() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut g = Graph::default();
    let a = g.leaf(random(&[2, 3], &mut rng), true);
    let b = g.leaf(random(&[3, 2], &mut rng), true);
    let m = g.matmul(a, b).unwrap();
    let s = g.softmax(m).unwrap();
    let l = g.sum(s).unwrap();
    for i in 0..g.len() {
        let v = Var::from_index(i);
        assert!(g.parents(v).iter().all(|p| p.index() < i));
    }
    assert_eq!(l.index(), g.len() - 1);
}

#[test]
fn fast_precision_rounds_every_result() {
    let mut g = Graph::new(Precision::Fast);
    let x = g.constant(Tensor::scalar(0.1));
    let y = g.mul_scalar(x, 3.0).unwrap();
    let v = g.value(y).data()[0];
    assert_eq!(v, v as f32 as f64);
    assert_eq!(g.value(x).data()[0], 0.1f32 as f64);
}

#[test]
fn shape_helpers_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut g = Graph::default();
    let x = g.constant(random(&[2, 3, 4, 4], &mut rng));
    let a = g.narrow(x, 1, 0, 2).unwrap();
    let b = g.narrow(x, 1, 2, 1).unwrap();
    let back = g.concat_channels(&[a, b]).unwrap();
    assert_eq!(g.value(back), g.value(x));

    let up = g.upsample2x(x).unwrap();
    assert_eq!(g.shape(up), &[2, 3, 8, 8]);
    let down = g.pool2d(PoolKind::Avg, up, 2, 2).unwrap();
    assert_eq!(g.value(down), g.value(x));
}
