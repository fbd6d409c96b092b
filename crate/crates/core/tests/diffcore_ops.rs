mod common;

use common::{op_gradcheck, rng, uniform, uniform32};
use licw_core::diffcore::{quantize, Graph, Quantizer, Tensor};
use licw_core::Error;
use proptest::prelude::*;

const FD_TOL: f64 = 1e-3;

fn assert_fd(name: &str, errs: Vec<f64>) {
    for (i, e) in errs.iter().enumerate() {
        assert!(*e <= FD_TOL, "{name}: input {i} max relative error {e:.3e}");
    }
}

/// Direct quadruple loop, independent of the im2col path.
fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, c, h, w) = x.dims4().unwrap();
    let (o, _, kh, kw) = k.dims4().unwrap();
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * ho * wo];
    for ni in 0..n {
        for oi in 0..o {
            for y in 0..ho {
                for xo in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as isize - pad as isize;
                                let ix = (xo * stride + j) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x.data()[((ni * c + ci) * h + iy as usize) * w + ix as usize]
                                        * k.data()[((oi * c + ci) * kh + i) * kw + j];
                                }
                            }
                        }
                    }
                    out[((ni * o + oi) * ho + y) * wo + xo] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, o, ho, wo], out).unwrap()
}

#[test]
fn conv2d_delta_kernel_is_identity() {
    let mut r = rng(1);
    let x = uniform32(&mut r, &[1, 2, 5, 6], -1.0, 1.0);
    // per-channel delta: k[o][c] = [o == c] * delta
    let k = Tensor::from_fn(vec![2, 2, 3, 3], |i| {
        let (o, c, t) = (i / 18, (i / 9) % 2, i % 9);
        if o == c && t == 4 {
            1.0
        } else {
            0.0
        }
    });
    let mut g = Graph::<f32>::new();
    let (xv, kv) = (g.constant(x.clone()), g.constant(k));
    let y = g.conv2d(xv, kv, 1, 1).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn conv2d_ones_kernel_sums_channels() {
    let mut r = rng(2);
    let x = uniform32(&mut r, &[1, 4, 3, 3], -1.0, 1.0);
    let mut g = Graph::<f32>::new();
    let xv = g.constant(x.clone());
    let kv = g.constant(Tensor::full(vec![1, 4, 1, 1], 1.0));
    let y = g.conv2d(xv, kv, 1, 0).unwrap();
    for p in 0..9 {
        let expect: f32 = (0..4).map(|c| x.data()[c * 9 + p]).sum();
        assert!((g.value(y).data()[p] - expect).abs() < 1e-6);
    }
}

#[test]
fn conv2d_matches_direct_loop() {
    let mut r = rng(3);
    for (stride, pad, ksz) in [(1, 1, 3), (2, 1, 4), (2, 0, 3), (1, 0, 1)] {
        let x = uniform(&mut r, &[1, 2, 8, 8], -1.0, 1.0);
        let k = uniform(&mut r, &[3, 2, ksz, ksz], -1.0, 1.0);
        let mut g = Graph::<f32>::new();
        let xv = g.constant(x.cast());
        let kv = g.constant(k.cast());
        let y = g.conv2d(xv, kv, stride, pad).unwrap();
        let oracle = naive_conv(&x, &k, stride, pad);
        assert_eq!(g.value(y).shape(), oracle.shape());
        assert!(g.value(y).cast::<f64>().max_abs_diff(&oracle) < 1e-5, "stride {stride} pad {pad}");
    }
}

#[test]
fn conv2d_rejects_channel_mismatch() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(vec![1, 3, 4, 4]));
    let k = g.constant(Tensor::zeros(vec![2, 2, 3, 3]));
    assert!(matches!(g.conv2d(x, k, 1, 1), Err(Error::Shape(_))));
    assert!(matches!(g.conv2d(x, x, 0, 1), Err(_)));
}

#[test]
fn conv_transpose_delta_is_identity_and_shapes() {
    let mut r = rng(4);
    let x = uniform32(&mut r, &[1, 1, 4, 4], -1.0, 1.0);
    let mut g = Graph::<f32>::new();
    let xv = g.constant(x.clone());
    let delta = g.constant(Tensor::from_fn(vec![1, 1, 3, 3], |i| if i == 4 { 1.0 } else { 0.0 }));
    let y = g.conv_transpose2d(xv, delta, 1, 1).unwrap();
    assert_eq!(g.value(y), &x);

    let k = g.constant(Tensor::full(vec![1, 2, 4, 4], 0.5));
    let up = g.conv_transpose2d(xv, k, 2, 1).unwrap();
    assert_eq!(g.shape(up), &[1, 2, 8, 8]);
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    let mut r = rng(5);
    for (stride, pad, ksz, h) in [(1, 1, 3, 6), (2, 1, 4, 8), (2, 0, 2, 6)] {
        let x = uniform32(&mut r, &[2, 3, h, h], -1.0, 1.0);
        let k = uniform32(&mut r, &[4, 3, ksz, ksz], -1.0, 1.0);
        let mut g = Graph::<f32>::new();
        let (xv, kv) = (g.constant(x.clone()), g.constant(k));
        let cx = g.conv2d(xv, kv, stride, pad).unwrap();
        let y = uniform32(&mut r, g.shape(cx), -1.0, 1.0);
        let yv = g.constant(y.clone());
        let ty = g.conv_transpose2d(yv, kv, stride, pad).unwrap();
        assert_eq!(g.shape(ty), x.shape());
        let lhs: f64 = g.value(cx).data().iter().zip(y.data()).map(|(a, b)| *a as f64 * *b as f64).sum();
        let rhs: f64 = x.data().iter().zip(g.value(ty).data()).map(|(a, b)| *a as f64 * *b as f64).sum();
        assert!((lhs - rhs).abs() <= 1e-4 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }
}

#[test]
fn gdn_degenerate_cases() {
    let mut r = rng(6);
    let x = uniform32(&mut r, &[1, 3, 4, 4], -2.0, 2.0);
    let mut g = Graph::<f32>::new();
    let xv = g.constant(x.clone());
    let gamma = g.constant(Tensor::zeros(vec![3, 3]));
    let one = g.constant(Tensor::full(vec![3], 1.0));
    let four = g.constant(Tensor::full(vec![3], 4.0));
    let id = g.gdn(xv, one, gamma, false).unwrap();
    assert_eq!(g.value(id), &x);
    let half = g.gdn(xv, four, gamma, false).unwrap();
    let double = g.gdn(xv, four, gamma, true).unwrap();
    for i in 0..x.numel() {
        assert!((g.value(half).data()[i] - x.data()[i] / 2.0).abs() < 1e-7);
        assert!((g.value(double).data()[i] - x.data()[i] * 2.0).abs() < 1e-7);
    }
}

#[test]
fn gdn_matches_formula() {
    let mut r = rng(7);
    let (c, hw) = (4, 9);
    let x = uniform(&mut r, &[2, c, 3, 3], -2.0, 2.0);
    let beta = uniform(&mut r, &[c], 0.5, 2.0);
    let gamma = uniform(&mut r, &[c, c], 0.0, 0.5);
    for inverse in [false, true] {
        let mut g = Graph::<f32>::new();
        let xv = g.constant(x.cast());
        let bv = g.constant(beta.cast());
        let gv = g.constant(gamma.cast());
        let y = g.gdn(xv, bv, gv, inverse).unwrap();
        for n in 0..2 {
            for i in 0..c {
                for p in 0..hw {
                    let xi = |ch: usize| x.data()[(n * c + ch) * hw + p];
                    let norm = beta.data()[i] + (0..c).map(|j| gamma.data()[i * c + j] * xi(j) * xi(j)).sum::<f64>();
                    let expect = if inverse { xi(i) * norm.sqrt() } else { xi(i) / norm.sqrt() };
                    let got = g.value(y).data()[(n * c + i) * hw + p] as f64;
                    assert!((got - expect).abs() < 1e-5, "{got} vs {expect}");
                }
            }
        }
    }
}

#[test]
fn gdn_rejects_nonpositive_beta() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::full(vec![1, 2, 2, 2], 1.0));
    let b = g.constant(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
    let gm = g.constant(Tensor::zeros(vec![2, 2]));
    assert!(matches!(g.gdn(x, b, gm, false), Err(Error::InvalidArgument(_))));
}

#[test]
fn round_ste_forward_and_gradient() {
    let mut g = Graph::<f32>::new();
    let x = g.variable(Tensor::new(vec![2], vec![0.4, 0.6]).unwrap());
    let q = quantize(&mut g, x, &mut Quantizer::RoundSte).unwrap();
    assert_eq!(g.value(q).data(), &[0.0, 1.0]);
    let s = g.sum(q).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0]);
}

#[test]
fn noise_quantizer_stays_within_half() {
    let mut r = rng(8);
    let x = uniform32(&mut r, &[1, 4, 8, 8], -10.0, 10.0);
    let mut noise_rng = rng(9);
    let mut g = Graph::<f32>::new();
    let xv = g.constant(x.clone());
    let q = quantize(&mut g, xv, &mut Quantizer::Noise(&mut noise_rng)).unwrap();
    assert!(g.value(q).data().iter().zip(x.data()).all(|(a, b)| (a - b).abs() <= 0.5));
    assert!(g.value(q).max_abs_diff(&x) > 0.0);
}

#[test]
fn backward_of_sum_of_squares() {
    let mut r = rng(10);
    let x = uniform32(&mut r, &[3, 5], -2.0, 2.0);
    let mut g = Graph::<f32>::new();
    let xv = g.variable(x.clone());
    let sq = g.mul(xv, xv).unwrap();
    let s = g.sum(sq).unwrap();
    let grads = g.backward(s).unwrap();
    for (gi, xi) in grads.get(xv).unwrap().data().iter().zip(x.data()) {
        assert!((gi - 2.0 * xi).abs() < 1e-6);
    }
}

#[test]
fn backward_twice_is_an_error_and_root_must_be_scalar() {
    let mut g = Graph::<f32>::new();
    let x = g.variable(Tensor::full(vec![2], 1.0));
    let unused = g.variable(Tensor::full(vec![3], 1.0));
    assert!(matches!(g.backward(x), Err(Error::NonScalarRoot(_))));
    let s = g.sum(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(unused).unwrap().data(), &[0.0, 0.0, 0.0]);
    assert!(matches!(g.backward(s), Err(Error::GraphConsumed)));
}

#[test]
fn non_finite_forward_is_reported() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::full(vec![2], f32::MAX));
    assert!(matches!(g.add(x, x), Err(Error::NonFinite { .. })));
}

#[test]
fn elementwise_ops_pass_fd() {
    let mut r = rng(11);
    let a = uniform(&mut r, &[2, 3, 4, 4], -2.0, 2.0);
    let b = uniform(&mut r, &[2, 3, 4, 4], -2.0, 2.0);
    let bias = uniform(&mut r, &[3], -2.0, 2.0);
    assert_fd("add", op_gradcheck(&[a.clone(), b.clone()], |g, v| g.add(v[0], v[1])));
    assert_fd("sub", op_gradcheck(&[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1])));
    assert_fd("mul", op_gradcheck(&[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1])));
    assert_fd("scale", op_gradcheck(&[a.clone()], |g, v| g.scale(v[0], -1.7)));
    assert_fd("add_scalar", op_gradcheck(&[a.clone()], |g, v| g.add_scalar(v[0], 0.3)));
    assert_fd("bias_add", op_gradcheck(&[a.clone(), bias], |g, v| g.bias_add(v[0], v[1])));
    assert_fd("softplus", op_gradcheck(&[a.clone()], |g, v| g.softplus(v[0])));
    assert_fd("slice", op_gradcheck(&[a.clone()], |g, v| g.slice_channels(v[0], 1, 2)));
    assert_fd("sum", op_gradcheck(&[a.clone()], |g, v| g.sum(v[0])));
    assert_fd("mean", op_gradcheck(&[a.clone()], |g, v| g.mean(v[0])));
    assert_fd("mse", op_gradcheck(&[a.clone(), b.clone()], |g, v| g.mse(v[0], v[1], 255.0 * 255.0)));
}

#[test]
fn kinked_ops_pass_fd_away_from_kinks() {
    // values at least 0.05 away from the kink so a 1e-3 step never crosses it
    let mut r = rng(12);
    let a = Tensor::from_fn(vec![1, 2, 4, 4], |_| {
        let v: f64 = rand::Rng::gen_range(&mut r, 0.05..2.0);
        if rand::Rng::gen_bool(&mut r, 0.5) {
            v
        } else {
            -v
        }
    });
    assert_fd("relu", op_gradcheck(&[a.clone()], |g, v| g.relu(v[0])));
    assert_fd("abs", op_gradcheck(&[a.clone()], |g, v| g.abs(v[0])));
    assert_fd("lower_bound", op_gradcheck(&[a.clone()], |g, v| g.lower_bound(v[0], 0.0)));
}

#[test]
fn conv_ops_pass_fd() {
    let mut r = rng(13);
    let x = uniform(&mut r, &[2, 3, 6, 6], -2.0, 2.0);
    let k = uniform(&mut r, &[4, 3, 4, 4], -2.0, 2.0);
    assert_fd("conv2d", op_gradcheck(&[x.clone(), k.clone()], |g, v| g.conv2d(v[0], v[1], 2, 1)));
    let k3 = uniform(&mut r, &[2, 3, 3, 3], -2.0, 2.0);
    assert_fd("conv2d s1", op_gradcheck(&[x.clone(), k3], |g, v| g.conv2d(v[0], v[1], 1, 1)));
    let xt = uniform(&mut r, &[2, 4, 3, 3], -2.0, 2.0);
    let kt = uniform(&mut r, &[4, 3, 4, 4], -2.0, 2.0);
    assert_fd("conv_transpose2d", op_gradcheck(&[xt, kt], |g, v| g.conv_transpose2d(v[0], v[1], 2, 1)));
}

#[test]
fn gdn_passes_fd() {
    let mut r = rng(14);
    let x = uniform(&mut r, &[2, 4, 3, 3], -2.0, 2.0);
    let beta = uniform(&mut r, &[4], 0.5, 2.0);
    let gamma = uniform(&mut r, &[4, 4], 0.05, 0.5);
    for inverse in [false, true] {
        let errs = op_gradcheck(&[x.clone(), beta.clone(), gamma.clone()], |g, v| g.gdn(v[0], v[1], v[2], inverse));
        assert_fd(if inverse { "igdn" } else { "gdn" }, errs);
    }
}

#[test]
fn composed_graph_passes_fd() {
    let mut r = rng(15);
    let x = uniform(&mut r, &[1, 3, 8, 8], -2.0, 2.0);
    let k1 = uniform(&mut r, &[4, 3, 4, 4], -0.5, 0.5);
    let beta = uniform(&mut r, &[4], 0.5, 2.0);
    let gamma = uniform(&mut r, &[4, 4], 0.05, 0.5);
    let k2 = uniform(&mut r, &[4, 3, 4, 4], -0.5, 0.5);
    let errs = op_gradcheck(&[x, k1, beta, gamma, k2], |g, v| {
        let h = g.conv2d(v[0], v[1], 2, 1)?;
        let h = g.gdn(h, v[2], v[3], false)?;
        let h = g.softplus(h)?;
        let h = g.conv_transpose2d(h, v[4], 2, 1)?;
        let h = g.mul(h, h)?;
        g.mean(h)
    });
    assert_fd("composed", errs);
}

#[test]
fn forward_is_deterministic() {
    let mut r = rng(16);
    let x = uniform32(&mut r, &[2, 3, 16, 16], -1.0, 1.0);
    let k = uniform32(&mut r, &[8, 3, 4, 4], -1.0, 1.0);
    let run = || {
        let mut g = Graph::<f32>::new();
        let (xv, kv) = (g.constant(x.clone()), g.constant(k.clone()));
        let y = g.conv2d(xv, kv, 2, 1).unwrap();
        g.value(y).clone()
    };
    assert!(run().bit_eq(&run()));
}

proptest! {
    #[test]
    fn round_ste_is_idempotent(vals in proptest::collection::vec(-300.0f32..300.0, 1..64)) {
        let n = vals.len();
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(vec![n], vals).unwrap());
        let q1 = g.round_ste(x).unwrap();
        let q2 = g.round_ste(q1).unwrap();
        prop_assert_eq!(g.value(q1), g.value(q2));
    }

    #[test]
    fn conv_adjoint_identity_holds(seed in 0u64..1000, stride in 1usize..3) {
        let mut r = rng(seed);
        let x = uniform32(&mut r, &[1, 2, 8, 8], -2.0, 2.0);
        let k = uniform32(&mut r, &[3, 2, 4, 4], -2.0, 2.0);
        let mut g = Graph::<f32>::new();
        let (xv, kv) = (g.constant(x.clone()), g.constant(k));
        let cx = g.conv2d(xv, kv, stride, 1).unwrap();
        let y = uniform32(&mut r, g.shape(cx), -2.0, 2.0);
        let yv = g.constant(y.clone());
        let ty = g.conv_transpose2d(yv, kv, stride, 1).unwrap();
        let lhs: f64 = g.value(cx).data().iter().zip(y.data()).map(|(a, b)| *a as f64 * *b as f64).sum();
        let rhs: f64 = x.data().iter().zip(g.value(ty).data()).map(|(a, b)| *a as f64 * *b as f64).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-4 * lhs.abs().max(1.0));
    }
}
