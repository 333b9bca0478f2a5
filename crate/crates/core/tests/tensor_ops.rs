//! Oracle tests for the tensor ops: forward math against brute-force
//! reference implementations, gradients against central finite differences.
//! The oracles here are written directly from the definitions and share no
//! code with the library's im2col/gemm path.

use aupt_core::gradcheck::{check_tensor, rel_err};
use aupt_core::optim::AdamState;
use aupt_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Direct nested-loop convolution, the independent reference.
#[allow(clippy::too_many_arguments)]
fn conv_oracle(
    x: &[f64],
    (ci, h, w): (usize, usize, usize),
    wt: &[f64],
    (co, kh, kw): (usize, usize, usize),
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; co * ho * wo];
    for oc in 0..co {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = bias[oc];
                for ic in 0..ci {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                let xv = x[(ic * h + iy as usize) * w + ix as usize];
                                let wv = wt[((oc * ci + ic) * kh + ky) * kw + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                }
                out[(oc * ho + oy) * wo + ox] = acc;
            }
        }
    }
    (out, ho, wo)
}

#[test]
fn conv2d_matches_direct_convolution_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let cases = [
        (1usize, 4usize, 4usize, 1usize, 3usize, 3usize, 1usize, 1usize),
        (2, 5, 7, 3, 3, 3, 1, 1),
        (3, 8, 8, 4, 3, 3, 1, 0),
        (2, 9, 9, 2, 3, 3, 2, 1),
        (1, 6, 6, 5, 2, 2, 2, 0),
        (4, 7, 5, 3, 3, 3, 1, 2),
    ];
    for &(ci, h, w, co, kh, kw, stride, pad) in &cases {
        let x = rand_vec(&mut rng, ci * h * w, -1.0, 1.0);
        let wt = rand_vec(&mut rng, co * ci * kh * kw, -1.0, 1.0);
        let b = rand_vec(&mut rng, co, -0.5, 0.5);
        let (expected, ho, wo) = conv_oracle(&x, (ci, h, w), &wt, (co, kh, kw), &b, stride, pad);

        let xt = Tensor::new(vec![ci, h, w], x).unwrap();
        let wtt = Tensor::new(vec![co, ci, kh, kw], wt).unwrap();
        let bt = Tensor::new(vec![co], b).unwrap();
        let out = xt.conv2d(&wtt, &bt, stride, pad).unwrap();
        assert_eq!(out.dims(), vec![co, ho, wo]);
        let got = out.to_vec();
        for (g, e) in got.iter().zip(expected.iter()) {
            assert!((g - e).abs() < 1e-10, "conv mismatch: {g} vs {e} in case {ci}x{h}x{w}");
        }
    }
}

#[test]
fn conv2d_batched_equals_per_sample() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (b, ci, h, w, co) = (3usize, 2usize, 6usize, 6usize, 4usize);
    let x = rand_vec(&mut rng, b * ci * h * w, -1.0, 1.0);
    let wt = rand_vec(&mut rng, co * ci * 9, -1.0, 1.0);
    let bias = rand_vec(&mut rng, co, -0.5, 0.5);
    let wtt = Tensor::new(vec![co, ci, 3, 3], wt).unwrap();
    let bt = Tensor::new(vec![co], bias).unwrap();

    let batch = Tensor::new(vec![b, ci, h, w], x.clone()).unwrap();
    let out = batch.conv2d(&wtt, &bt, 1, 1).unwrap();
    assert_eq!(out.dims(), vec![b, co, h, w]);
    let got = out.to_vec();

    for bi in 0..b {
        let sample = Tensor::new(vec![ci, h, w], x[bi * ci * h * w..(bi + 1) * ci * h * w].to_vec()).unwrap();
        let single = sample.conv2d(&wtt, &bt, 1, 1).unwrap().to_vec();
        let chunk = &got[bi * co * h * w..(bi + 1) * co * h * w];
        assert_eq!(chunk, single.as_slice());
    }
}

#[test]
fn table1_shape_examples() {
    // 64-channel 64x64 input through a shape-preserving 3x3 conv, then 2x2 pool.
    let x = Tensor::<f32>::zeros(&[64, 64, 64]);
    let w = Tensor::<f32>::zeros(&[64, 64, 3, 3]);
    let b = Tensor::<f32>::zeros(&[64]);
    let y = x.conv2d(&w, &b, 1, 1).unwrap();
    assert_eq!(y.dims(), vec![64, 64, 64]);
    let p = y.maxpool2d(2, 2).unwrap();
    assert_eq!(p.dims(), vec![64, 32, 32]);

    // FC5 maps the flattened 256x4x4 map to 1024 units.
    let feat = Tensor::<f32>::zeros(&[256, 4, 4]).flatten().unwrap();
    assert_eq!(feat.dims(), vec![4096]);
    let w5 = Tensor::<f32>::zeros(&[1024, 4096]);
    let b5 = Tensor::<f32>::zeros(&[1024]);
    assert_eq!(feat.linear(&w5, &b5).unwrap().dims(), vec![1024]);
}

#[test]
fn linear_matches_naive_matvec() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for &(b, n_in, n_out) in &[(1usize, 7usize, 5usize), (4, 13, 9), (2, 32, 17)] {
        let x = rand_vec(&mut rng, b * n_in, -2.0, 2.0);
        let w = rand_vec(&mut rng, n_out * n_in, -1.0, 1.0);
        let bias = rand_vec(&mut rng, n_out, -1.0, 1.0);

        let mut expected = vec![0.0f64; b * n_out];
        for bi in 0..b {
            for o in 0..n_out {
                let mut acc = bias[o];
                for i in 0..n_in {
                    acc += w[o * n_in + i] * x[bi * n_in + i];
                }
                expected[bi * n_out + o] = acc;
            }
        }

        let xt = Tensor::new(vec![b, n_in], x).unwrap();
        let wt = Tensor::new(vec![n_out, n_in], w).unwrap();
        let bt = Tensor::new(vec![n_out], bias).unwrap();
        let got = xt.linear(&wt, &bt).unwrap().to_vec();
        for (g, e) in got.iter().zip(expected.iter()) {
            assert!((g - e).abs() < 1e-10);
        }
    }
}

// Finite-difference checks. Tolerance per the gradient-correctness contract:
// relative error below 1e-4 away from kinks.

#[test]
fn relu_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::new(vec![40], rand_vec(&mut rng, 40, -1.0, 1.0)).unwrap().requires_grad(true);
    let u = rand_vec(&mut rng, 40, -1.0, 1.0);
    let loss = x.relu().weighted_sum(&u).unwrap();
    loss.backward().unwrap();
    let analytic = x.grad_to_vec().unwrap();
    let report = check_tensor(&x, &analytic, &[], 1e-6, 1e-3, || {
        x.relu().weighted_sum(&u).unwrap().item().unwrap()
    });
    assert!(report.max_rel_err < 1e-4, "relu rel err {}", report.max_rel_err);
    assert!(report.checked > 30);
}

#[test]
fn sigmoid_gradient_matches_analytic_and_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor::new(vec![30], rand_vec(&mut rng, 30, -4.0, 4.0)).unwrap().requires_grad(true);
    let u = rand_vec(&mut rng, 30, -1.0, 1.0);
    let y = x.sigmoid();
    let loss = y.weighted_sum(&u).unwrap();
    loss.backward().unwrap();
    let analytic = x.grad_to_vec().unwrap();

    // Closed form sigma(x)(1 - sigma(x)) * u.
    let yv = y.to_vec();
    for i in 0..30 {
        let expected = yv[i] * (1.0 - yv[i]) * u[i];
        assert!(rel_err(analytic[i], expected) < 1e-12);
    }

    let report = check_tensor(&x, &analytic, &[], 1e-6, 1e-3, || {
        x.sigmoid().weighted_sum(&u).unwrap().item().unwrap()
    });
    assert!(report.max_rel_err < 1e-4, "sigmoid rel err {}", report.max_rel_err);
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (ci, h, w, co) = (2usize, 5usize, 5usize, 3usize);
    let x = Tensor::new(vec![ci, h, w], rand_vec(&mut rng, ci * h * w, -1.0, 1.0)).unwrap().requires_grad(true);
    let wt = Tensor::new(vec![co, ci, 3, 3], rand_vec(&mut rng, co * ci * 9, -1.0, 1.0)).unwrap().requires_grad(true);
    let b = Tensor::new(vec![co], rand_vec(&mut rng, co, -0.5, 0.5)).unwrap().requires_grad(true);
    let u = rand_vec(&mut rng, co * h * w, -1.0, 1.0);

    let loss = x.conv2d(&wt, &b, 1, 1).unwrap().weighted_sum(&u).unwrap();
    loss.backward().unwrap();

    let forward = || {
        x.conv2d(&wt, &b, 1, 1).unwrap().weighted_sum(&u).unwrap().item().unwrap()
    };
    for (tensor, label) in [(&x, "input"), (&wt, "weight"), (&b, "bias")] {
        let analytic = tensor.grad_to_vec().unwrap();
        let report = check_tensor(tensor, &analytic, &[], 1e-6, 1e-3, forward);
        assert!(report.max_rel_err < 1e-4, "conv {label} rel err {}", report.max_rel_err);
    }
}

#[test]
fn maxpool_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::new(vec![2, 4, 4], rand_vec(&mut rng, 32, -1.0, 1.0)).unwrap().requires_grad(true);
    let u = rand_vec(&mut rng, 8, -1.0, 1.0);
    let loss = x.maxpool2d(2, 2).unwrap().weighted_sum(&u).unwrap();
    loss.backward().unwrap();
    let analytic = x.grad_to_vec().unwrap();
    let report = check_tensor(&x, &analytic, &[], 1e-6, 1e-3, || {
        x.maxpool2d(2, 2).unwrap().weighted_sum(&u).unwrap().item().unwrap()
    });
    assert!(report.max_rel_err < 1e-4, "maxpool rel err {}", report.max_rel_err);
}

#[test]
fn linear_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (b, n_in, n_out) = (3usize, 6usize, 4usize);
    let x = Tensor::new(vec![b, n_in], rand_vec(&mut rng, b * n_in, -1.0, 1.0)).unwrap().requires_grad(true);
    let w = Tensor::new(vec![n_out, n_in], rand_vec(&mut rng, n_out * n_in, -1.0, 1.0)).unwrap().requires_grad(true);
    let bias = Tensor::new(vec![n_out], rand_vec(&mut rng, n_out, -1.0, 1.0)).unwrap().requires_grad(true);
    let u = rand_vec(&mut rng, b * n_out, -1.0, 1.0);

    let loss = x.linear(&w, &bias).unwrap().weighted_sum(&u).unwrap();
    loss.backward().unwrap();
    let forward = || x.linear(&w, &bias).unwrap().weighted_sum(&u).unwrap().item().unwrap();
    for tensor in [&x, &w, &bias] {
        let analytic = tensor.grad_to_vec().unwrap();
        let report = check_tensor(tensor, &analytic, &[], 1e-6, 1e-3, forward);
        assert!(report.max_rel_err < 1e-4, "linear rel err {}", report.max_rel_err);
    }
}

#[test]
fn bce_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let n = 24;
    let preds = rand_vec(&mut rng, n, 0.05, 0.95);
    let targets: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_bool(0.5))).collect();
    let p = Tensor::new(vec![n], preds).unwrap().requires_grad(true);
    let t = Tensor::new(vec![n], targets).unwrap();

    let loss = p.bce_loss(&t).unwrap();
    loss.backward().unwrap();
    let analytic = p.grad_to_vec().unwrap();
    let report = check_tensor(&p, &analytic, &[], 1e-6, 1e-3, || {
        p.bce_loss(&t).unwrap().item().unwrap()
    });
    assert!(report.max_rel_err < 1e-4, "bce rel err {}", report.max_rel_err);
}

#[test]
fn bce_through_sigmoid_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let n = 20;
    let x = Tensor::new(vec![n], rand_vec(&mut rng, n, -3.0, 3.0)).unwrap().requires_grad(true);
    let targets: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_bool(0.5))).collect();
    let t = Tensor::new(vec![n], targets).unwrap();

    let loss = x.sigmoid().bce_loss(&t).unwrap();
    loss.backward().unwrap();
    let analytic = x.grad_to_vec().unwrap();
    let report = check_tensor(&x, &analytic, &[], 1e-6, 1e-3, || {
        x.sigmoid().bce_loss(&t).unwrap().item().unwrap()
    });
    assert!(report.max_rel_err < 1e-4, "sigmoid+bce rel err {}", report.max_rel_err);
}

#[test]
fn dropout_gradient_with_replayed_mask() {
    let mut seed_rng = ChaCha8Rng::seed_from_u64(13);
    let n = 30;
    let x = Tensor::new(vec![n], rand_vec(&mut seed_rng, n, -1.0, 1.0)).unwrap().requires_grad(true);
    let u = rand_vec(&mut seed_rng, n, -1.0, 1.0);

    let forward = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        x.dropout(0.4, true, &mut rng).unwrap().weighted_sum(&u).unwrap().item().unwrap()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let loss = x.dropout(0.4, true, &mut rng).unwrap().weighted_sum(&u).unwrap();
    loss.backward().unwrap();
    let analytic = x.grad_to_vec().unwrap();
    let report = check_tensor(&x, &analytic, &[], 1e-6, 1e-3, forward);
    assert!(report.max_rel_err < 1e-4, "dropout rel err {}", report.max_rel_err);
}

#[test]
fn dropout_zero_fraction_concentrates() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let n = 100_000;
    let x = Tensor::<f64>::full(&[n], 1.0);
    let y = x.dropout(0.25, true, &mut rng).unwrap();
    let zeros = y.to_vec().iter().filter(|&&v| v == 0.0).count();
    let frac = zeros as f64 / n as f64;
    assert!((frac - 0.25).abs() < 0.01, "zero fraction {frac}");
    // Survivors carry the inverted scale.
    assert!(y.to_vec().iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-12));
}

#[test]
fn dropout_masks_replay_with_the_seed() {
    let x = Tensor::<f32>::full(&[512], 1.0);
    let a = x.dropout(0.5, true, &mut ChaCha8Rng::seed_from_u64(7)).unwrap().to_vec();
    let b = x.dropout(0.5, true, &mut ChaCha8Rng::seed_from_u64(7)).unwrap().to_vec();
    let c = x.dropout(0.5, true, &mut ChaCha8Rng::seed_from_u64(8)).unwrap().to_vec();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

// Independent textbook Adam in scalar form, written from the update
// equations; the optimizer must track it exactly.
struct ScalarAdamOracle {
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
    t: u32,
    m: f64,
    v: f64,
}

impl ScalarAdamOracle {
    fn step(&mut self, theta: f64, g: f64) -> f64 {
        self.t += 1;
        self.m = self.b1 * self.m + (1.0 - self.b1) * g;
        self.v = self.b2 * self.v + (1.0 - self.b2) * g * g;
        let m_hat = self.m / (1.0 - self.b1.powi(self.t as i32));
        let v_hat = self.v / (1.0 - self.b2.powi(self.t as i32));
        theta - self.lr * m_hat / (v_hat.sqrt() + self.eps)
    }
}

#[test]
fn adam_trajectory_matches_textbook_oracle() {
    let p = Tensor::<f64>::scalar(2.5).requires_grad(true);
    let params = vec![p.clone()];
    let mut adam = AdamState::new(&params, 0.05, 0.9, 0.999, 1e-8).unwrap();
    let mut oracle = ScalarAdamOracle { lr: 0.05, b1: 0.9, b2: 0.999, eps: 1e-8, t: 0, m: 0.0, v: 0.0 };

    let mut theta_ref = 2.5;
    for _ in 0..10 {
        // Quadratic objective 0.5 * theta^2, gradient = theta.
        let g_impl = p.item().unwrap();
        p.zero_grad();
        let loss = p.weighted_sum(&[g_impl]).unwrap(); // gradient of g*theta w.r.t. theta is g
        loss.backward().unwrap();
        adam.step(&params).unwrap();

        theta_ref = oracle.step(theta_ref, theta_ref);
        assert!(
            (p.item().unwrap() - theta_ref).abs() < 1e-10,
            "step {} diverged: {} vs {}",
            adam.step_count(),
            p.item().unwrap(),
            theta_ref
        );
    }
    assert_eq!(adam.step_count(), 10);
}
