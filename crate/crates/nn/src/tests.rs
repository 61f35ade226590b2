use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::*;

fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn one_param(name: &str, t: Tensor) -> ParamSet {
    let mut ps = ParamSet::new();
    ps.push(Parameter::new(name, t)).unwrap();
    ps
}

#[test]
fn dense_identity_and_forced_values() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(&[1, 2], vec![1.0, 2.0]));
    let w = g.constant(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]));
    let b = g.constant(Tensor::zeros(&[2]));
    let y = g.dense(x, w, b).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0]);

    let x = g.constant(Tensor::from_vec(&[1, 2], vec![1.0, 1.0]));
    let w = g.constant(Tensor::from_vec(&[2, 1], vec![2.0, 3.0]));
    let b = g.constant(Tensor::from_vec(&[1], vec![1.0]));
    let y = g.dense(x, w, b).unwrap();
    assert_eq!(g.value(y).data(), &[6.0]);
}

#[test]
fn dense_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 3]));
    let w = g.constant(Tensor::zeros(&[4, 2]));
    let err = g.matmul(x, w).unwrap_err();
    match err {
        NnError::Shape { lhs, rhs, .. } => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 2]);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn dense_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut ps = ParamSet::new();
    ps.push(Parameter::new("x", rand_tensor(&[4, 3], &mut rng))).unwrap();
    ps.push(Parameter::new("w", rand_tensor(&[3, 2], &mut rng))).unwrap();
    ps.push(Parameter::new("b", rand_tensor(&[2], &mut rng))).unwrap();
    let probe = rand_tensor(&[4, 2], &mut rng);
    let err = grad_check(
        &ps,
        |g, p| {
            let y = g.dense(p[0], p[1], p[2])?;
            let c = g.constant(probe.clone());
            let z = g.mul(y, c)?;
            Ok(g.sum(z))
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(err < 1e-6, "dense rel err {err}");
}

/// Straight nested-loop reference for a single dilated cross-correlation.
fn conv_reference(x: &Tensor, w: &Tensor, dilation: usize, padding: usize) -> Tensor {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let ho = h + 2 * padding - dilation * (k - 1);
    let wo = wd + 2 * padding - dilation * (k - 1);
    let mut out = vec![0.0; co * ho * wo];
    for o in 0..co {
        for y in 0..ho {
            for xx in 0..wo {
                let mut s = 0.0;
                for c in 0..ci {
                    for a in 0..k {
                        for b in 0..k {
                            let iy = (y + a * dilation) as isize - padding as isize;
                            let ix = (xx + b * dilation) as isize - padding as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                s += x.data()[(c * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((o * ci + c) * k + a) * k + b];
                            }
                        }
                    }
                }
                out[(o * ho + y) * wo + xx] = s;
            }
        }
    }
    Tensor::from_vec(&[co, ho, wo], out)
}

#[test]
fn conv_identity_kernel() {
    let mut g = Graph::new();
    let data: Vec<f64> = (0..9).map(f64::from).collect();
    let x = g.constant(Tensor::from_vec(&[1, 3, 3], data.clone()));
    let w = g.constant(Tensor::ones(&[1, 1, 1, 1]));
    let y = g.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(g.value(y).data(), &data[..]);
}

#[test]
fn conv_dilated_all_ones_center() {
    let x = Tensor::ones(&[1, 5, 5]);
    let w = Tensor::ones(&[1, 1, 3, 3]);
    let reference = conv_reference(&x, &w, 2, 2);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let wv = g.constant(w);
    let y = g.conv2d(xv, wv, None, 2, 2).unwrap();
    let out = g.value(y);
    assert_eq!(out.shape(), &[1, 5, 5]);
    assert_eq!(out.data()[12], 9.0);
    assert_eq!(reference.data()[12], 9.0);
    assert_eq!(out.data(), reference.data());
}

#[test]
fn conv_matches_reference_on_random_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for &(d, p) in &[(1, 1), (2, 2), (4, 4), (2, 0)] {
        let x = rand_tensor(&[3, 8, 7], &mut rng);
        let w = rand_tensor(&[4, 3, 3, 3], &mut rng);
        let reference = conv_reference(&x, &w, d, p);
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x), g.constant(w));
        let y = g.conv2d(xv, wv, None, d, p).unwrap();
        for (a, b) in g.value(y).data().iter().zip(reference.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_config_errors() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::ones(&[1, 4, 4]));
    let even = g.constant(Tensor::ones(&[1, 1, 2, 2]));
    assert!(matches!(g.conv2d(x, even, None, 1, 0), Err(NnError::Config(_))));
    let w = g.constant(Tensor::ones(&[1, 1, 3, 3]));
    assert!(matches!(g.conv2d(x, w, None, 0, 1), Err(NnError::Config(_))));
}

#[test]
fn conv_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ps = ParamSet::new();
    ps.push(Parameter::new("x", rand_tensor(&[2, 4, 4], &mut rng))).unwrap();
    ps.push(Parameter::new("w", rand_tensor(&[3, 2, 3, 3], &mut rng))).unwrap();
    ps.push(Parameter::new("b", rand_tensor(&[3], &mut rng))).unwrap();
    let probe = rand_tensor(&[3, 4, 4], &mut rng);
    let err = grad_check(
        &ps,
        |g, p| {
            let y = g.conv2d(p[0], p[1], Some(p[2]), 2, 2)?;
            let c = g.constant(probe.clone());
            let z = g.mul(y, c)?;
            Ok(g.sum(z))
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(err < 1e-5, "conv rel err {err}");
}

#[test]
fn pool_examples() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::full(&[2, 5, 7], 3.25));
    for grid in [(1, 1), (2, 3), (5, 7)] {
        let y = g.pool(c, PoolMode::Avg, grid).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 3.25));
    }
    let x = g.constant(Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
    let y = g.pool(x, PoolMode::Max, (1, 1)).unwrap();
    assert_eq!(g.value(y).data(), &[4.0]);

    let ramp = g.constant(Tensor::from_vec(&[1, 4, 4], (0..16).map(f64::from).collect()));
    let y = g.pool(ramp, PoolMode::Avg, (2, 2)).unwrap();
    // bin averages: {0,1,4,5}, {2,3,6,7}, {8,9,12,13}, {10,11,14,15}
    let oracle: Vec<f64> = [[0, 1, 4, 5], [2, 3, 6, 7], [8, 9, 12, 13], [10, 11, 14, 15]]
        .iter()
        .map(|b| b.iter().sum::<i32>() as f64 / 4.0)
        .collect();
    assert_eq!(g.value(y).data(), &oracle[..]);
    assert_eq!(oracle, vec![2.5, 4.5, 10.5, 12.5]);

    assert!(matches!(g.pool(ramp, PoolMode::Avg, (5, 1)), Err(NnError::Config(_))));
}

#[test]
fn activation_examples() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::from_vec(&[1, 2], vec![0.0, 0.0]));
    let s = g.sigmoid(z).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    let sm = g.softmax(z).unwrap();
    assert_eq!(g.value(sm).data(), &[0.5, 0.5]);
    let nan = g.constant(Tensor::from_vec(&[1], vec![f64::NAN]));
    assert!(matches!(g.relu(nan), Err(NnError::Numeric(_))));
    assert!(matches!(g.softmax(nan), Err(NnError::Numeric(_))));
}

#[test]
fn tanh_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ps = one_param("x", rand_tensor(&[3, 5], &mut rng));
    let probe = rand_tensor(&[3, 5], &mut rng);
    let err = grad_check(
        &ps,
        |g, p| {
            let y = g.tanh(p[0])?;
            let c = g.constant(probe.clone());
            let z = g.mul(y, c)?;
            Ok(g.sum(z))
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(err < 1e-6, "tanh rel err {err}");
}

#[test]
fn sgd_examples() {
    let mut ps = one_param("w", Tensor::scalar(1.0));
    ps[0].grad = Some(Tensor::scalar(2.0));
    sgd_step(&mut ps, 0.1).unwrap();
    assert!((ps[0].value.item() - 0.8).abs() < 1e-15);
    assert!(ps[0].grad.is_none());

    ps[0].grad = Some(Tensor::scalar(123.0));
    sgd_step(&mut ps, 0.0).unwrap();
    assert!((ps[0].value.item() - 0.8).abs() < 1e-15);

    // f(w) = (w - 3)^2 from w = 0: gradient 2(w - 3) = -6, so w = 0.6 after one step.
    let mut ps = one_param("w", Tensor::scalar(0.0));
    let mut g = Graph::new();
    let b = ps.bind(&mut g);
    let three = g.constant(Tensor::scalar(-3.0));
    let d = g.add(b[0], three).unwrap();
    let sq = g.mul(d, d).unwrap();
    let grads = g.backward(sq).unwrap();
    drop(g);
    let bound = b.clone();
    ps.accumulate_grads(&grads, &bound);
    sgd_step(&mut ps, 0.1).unwrap();
    assert!((ps[0].value.item() - 0.6).abs() < 1e-15);
}

#[test]
fn sgd_without_grad_is_a_state_error() {
    let mut ps = one_param("w", Tensor::scalar(1.0));
    assert!(matches!(sgd_step(&mut ps, 0.1), Err(NnError::State(_))));
}

#[test]
fn grad_check_linear_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut ps = ParamSet::new();
    ps.push(Parameter::new("w", rand_tensor(&[3, 2], &mut rng))).unwrap();
    ps.push(Parameter::new("b", rand_tensor(&[2], &mut rng))).unwrap();
    // Inputs away from zero keep every gradient O(1), so FD round-off stays ~1e-11.
    let x = rand_tensor(&[5, 3], &mut rng).map(|v| 1.5 + 0.5 * v);
    let err = grad_check(
        &ps,
        |g, p| {
            let xv = g.constant(x.clone());
            let y = g.dense(xv, p[0], p[1])?;
            Ok(g.sum(y))
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(err < 1e-9, "linear rel err {err}");
}

#[test]
fn grad_check_detects_broken_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ps = ParamSet::new();
    ps.push(Parameter::new("w", rand_tensor(&[4, 6], &mut rng))).unwrap();
    let x = rand_tensor(&[3, 4], &mut rng);
    let build = |broken: bool| {
        let x = x.clone();
        move |g: &mut Graph<'_>, p: &[Var]| {
            let xv = g.constant(x.clone());
            let h = g.matmul(xv, p[0])?;
            let a = if broken { g.broken_relu(h)? } else { g.relu(h)? };
            Ok(g.sum(a))
        }
    };
    let good = grad_check(&ps, build(false), &GradCheckOptions::default()).unwrap();
    let bad = grad_check(&ps, build(true), &GradCheckOptions::default()).unwrap();
    assert!(good < 1e-6, "healthy relu err {good}");
    assert!(bad > 1e-1, "broken relu err only {bad}");
}

#[test]
fn kinks_are_skipped_not_scored() {
    let mut ps = ParamSet::new();
    ps.push(Parameter::new("w", Tensor::from_vec(&[3], vec![-0.5, 0.0, 0.7]))).unwrap();
    let f = |g: &mut Graph<'_>, p: &[Var]| {
        let a = g.relu(p[0])?;
        Ok(g.sum(a))
    };
    assert!(grad_check(&ps, f, &GradCheckOptions::default()).unwrap() >= 0.5);
    let opts = GradCheckOptions {
        kink_tol: Some(1e-4),
        ..Default::default()
    };
    let r = grad_check_report(&ps, f, &opts).unwrap();
    assert_eq!((r.checked, r.skipped), (2, 1));
    assert!(r.worst < 1e-9);
}

#[test]
fn kink_skipping_still_catches_wrong_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ps = ParamSet::new();
    ps.push(Parameter::new("w", rand_tensor(&[4, 6], &mut rng))).unwrap();
    let x = rand_tensor(&[3, 4], &mut rng);
    let f = |g: &mut Graph<'_>, p: &[Var]| {
        let xv = g.constant(x.clone());
        let h = g.matmul(xv, p[0])?;
        let a = g.broken_relu(h)?;
        Ok(g.sum(a))
    };
    let opts = GradCheckOptions {
        kink_tol: Some(1e-4),
        ..Default::default()
    };
    let r = grad_check_report(&ps, f, &opts).unwrap();
    assert_eq!(r.skipped, 0);
    assert!(r.worst > 1e-1);
}

#[test]
fn backward_requires_scalar() {
    let mut g = Graph::new();
    let x = g.input(Tensor::ones(&[2]));
    assert!(matches!(g.backward(x), Err(NnError::State(_))));
}

#[test]
fn duplicate_names_rejected() {
    let mut ps = one_param("w", Tensor::ones(&[1]));
    assert!(ps.push(Parameter::new("w", Tensor::ones(&[1]))).is_err());
}
