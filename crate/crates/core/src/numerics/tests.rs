use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::params::{check_store_gradients, Forward, ParamId, ParamStore};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn naive_conv(x: &Tensor, k: &Tensor, left: usize) -> Tensor {
    let (c, l) = x.dims2().unwrap();
    let w = k.last_dim();
    Tensor::from_fn(&[c, l], |i| {
        let mut acc = 0.0;
        for j in 0..w {
            let src = i[1] as isize + j as isize - left as isize;
            if src >= 0 && (src as usize) < l {
                acc += k.at(i[0], j) * x.at(i[0], src as usize);
            }
        }
        acc
    })
}

#[test]
fn linear_map_identity_and_sum() {
    let x = Tensor::from_vec(vec![3.0, -1.0]);
    let y = linear_map(&x, &Tensor::identity(2), &Tensor::zeros(&[2])).unwrap();
    assert_eq!(y.data(), &[3.0, -1.0]);
    let w = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
    let y = linear_map(&Tensor::from_vec(vec![2.0, 5.0]), &w, &Tensor::zeros(&[1])).unwrap();
    assert_eq!(y.data(), &[7.0]);
}

#[test]
fn linear_map_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[5, 3], &mut rng);
    let w = random(&[2, 3], &mut rng);
    let b = random(&[2], &mut rng);
    let y = linear_map(&x, &w, &b).unwrap();
    assert_eq!(y.shape(), &[5, 2]);
    for r in 0..5 {
        for o in 0..2 {
            let mut acc = b.data()[o];
            for i in 0..3 {
                acc += w.at(o, i) * x.at(r, i);
            }
            assert!((y.at(r, o) - acc).abs() < 1e-12);
        }
    }
}

#[test]
fn linear_map_rejects_mismatch() {
    let x = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
    let err = linear_map(&x, &Tensor::identity(2), &Tensor::zeros(&[2])).unwrap_err();
    assert!(matches!(err, crate::Error::Dimension(_)));
}

#[test]
fn conv_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[3, 9], &mut rng);
    for pad in [Padding::Causal, Padding::Same] {
        let y = depthwise_conv1d(&x, &Tensor::full(&[3, 1], 1.0), pad).unwrap();
        assert_eq!(y, x);
    }
}

#[test]
fn conv_hand_example() {
    let x = Tensor::matrix(1, 3, vec![0.0, 2.0, 0.0]).unwrap();
    let k = Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap();
    let same = depthwise_conv1d(&x, &k, Padding::Same).unwrap();
    assert_eq!(same.data(), &[1.0, 1.0, 0.0]);
    let causal = depthwise_conv1d(&x, &k, Padding::Causal).unwrap();
    assert_eq!(causal.data(), &[0.0, 1.0, 1.0]);
}

#[test]
fn conv_matches_sliding_window() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[4, 20], &mut rng);
    let k = random(&[4, 4], &mut rng);
    for pad in [Padding::Causal, Padding::Same] {
        let y = depthwise_conv1d(&x, &k, pad).unwrap();
        let oracle = naive_conv(&x, &k, pad.left(4));
        assert!(y.max_abs_diff(&oracle).unwrap() < 1e-12);
    }
}

#[test]
fn conv_valid_rejects_long_kernel() {
    let x = Tensor::zeros(&[1, 3]);
    let k = Tensor::zeros(&[1, 4]);
    assert!(matches!(depthwise_conv1d(&x, &k, Padding::Valid), Err(crate::Error::Dimension(_))));
}

#[test]
fn layer_norm_examples() {
    let ones = Tensor::full(&[3], 1.0);
    let zeros = Tensor::zeros(&[3]);
    let y = layer_norm(&Tensor::from_vec(vec![1.0, 2.0, 3.0]), &ones, &zeros, 1e-12).unwrap();
    for (got, want) in y.data().iter().zip([-1.2247, 0.0, 1.2247]) {
        assert!((got - want).abs() < 1e-4);
    }
    let c = layer_norm(&Tensor::full(&[3], 4.2), &ones, &zeros, NORM_EPS).unwrap();
    assert!(c.data().iter().all(|v| v.abs() < 1e-9));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[2, 5], &mut rng);
    let (g, b) = (Tensor::full(&[5], 1.0), Tensor::zeros(&[5]));
    let shifted = layer_norm(&x.map(|v| v + 3.5), &g, &b, NORM_EPS).unwrap();
    let base = layer_norm(&x, &g, &b, NORM_EPS).unwrap();
    assert!(shifted.max_abs_diff(&base).unwrap() < 1e-12);
}

#[test]
fn rms_norm_examples() {
    let y = rms_norm(&Tensor::full(&[3], 1.0), &Tensor::full(&[3], 1.0), NORM_EPS).unwrap();
    assert!(y.data().iter().all(|v| (v - 1.0).abs() < 1e-5));
    let y = rms_norm(&Tensor::from_vec(vec![2.0, -2.0]), &Tensor::full(&[2], 1.0), 0.0).unwrap();
    assert_eq!(y.data(), &[1.0, -1.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[6], &mut rng);
    let g = Tensor::full(&[6], 1.0);
    let base = rms_norm(&x, &g, 0.0).unwrap();
    for c in [3.0, -0.25] {
        let y = rms_norm(&x.scale(c), &g, 0.0).unwrap();
        assert!(y.max_abs_diff(&base.scale(c.signum())).unwrap() < 1e-12);
    }
}

#[test]
fn activation_values() {
    assert_eq!(sigmoid(0.0), 0.5);
    assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    assert_eq!(silu(0.0), 0.0);
    for x in [-800.0, -30.0, -1.0, 0.3, 40.0, 800.0] {
        let s = sigmoid(x);
        assert!((0.0..=1.0).contains(&s));
        assert!(softplus(x) >= 0.0 && softplus(x).is_finite());
    }
    assert!(softplus(-30.0) > 0.0);
}

#[test]
fn primitives_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&[3, 16], &mut rng);
    let k = random(&[3, 4], &mut rng);
    let a = depthwise_conv1d(&x, &k, Padding::Causal).unwrap();
    let b = depthwise_conv1d(&x, &k, Padding::Causal).unwrap();
    assert_eq!(a.data(), b.data());
}

/// Store of random leaves plus a fixed random weighting for the output.
struct Fixture {
    store: ParamStore,
    ids: Vec<ParamId>,
}

fn fixture(shapes: &[&[usize]], seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ids = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.insert(format!("p{i}"), random(s, &mut rng)).unwrap())
        .collect();
    Fixture { store, ids }
}

fn weighted_sum(f: &mut Forward<'_>, v: Var) -> Var {
    let shape = f.value(v).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let w = f.input(random(&shape, &mut rng));
    let p = f.g.mul(v, w).unwrap();
    f.g.sum_all(p)
}

fn check(fx: &Fixture, body: impl Fn(&mut Forward<'_>, &[Var]) -> Result<Var, crate::Error>) {
    let report = check_store_gradients(&fx.store, 1e-5, None, |f| {
        let vars: Vec<Var> = fx.ids.iter().map(|&id| f.param(id)).collect();
        let out = body(f, &vars)?;
        Ok(weighted_sum(f, out))
    })
    .unwrap();
    assert!(report.max_relative_error < 1e-4, "{report:?}");
}

#[test]
fn tape_matmul_transpose_add() {
    let fx = fixture(&[&[3, 4], &[4, 2], &[2, 3]], 10);
    check(&fx, |f, v| {
        let m = f.g.matmul(v[0], v[1])?;
        let t = f.g.transpose(v[2])?;
        let s = f.g.add(m, t)?;
        let d = f.g.sub(s, m)?;
        let p = f.g.mul(d, s)?;
        Ok(f.g.scale(p, 1.5))
    });
}

#[test]
fn tape_biases_and_broadcasts() {
    let fx = fixture(&[&[3, 5], &[3], &[5], &[3, 1]], 11);
    check(&fx, |f, v| {
        let a = f.g.add_col_bias(v[0], v[1])?;
        let b = f.g.add_row_bias(a, v[2])?;
        let c = f.g.mul_col_broadcast(b, v[3])?;
        let m = f.g.mean_cols(c)?;
        let m = f.g.broadcast_cols(m, 5);
        let out = f.g.mul(c, m)?;
        Ok(f.g.flip_last(out))
    });
}

#[test]
fn tape_concat_slice() {
    let fx = fixture(&[&[2, 4], &[3, 4]], 12);
    check(&fx, |f, v| {
        let c = f.g.concat_rows(&[v[0], v[1], v[0]])?;
        let s = f.g.slice_rows(c, 1, 3)?;
        f.g.mul(s, s)
    });
}

#[test]
fn tape_activations() {
    for kind in [Activation::Sigmoid, Activation::Softplus, Activation::Silu] {
        let fx = fixture(&[&[4, 6]], 13);
        check(&fx, |f, v| {
            let s = f.g.scale(v[0], 3.0);
            Ok(f.g.activation(s, kind))
        });
    }
}

#[test]
fn tape_conv() {
    for pad in [Padding::Causal, Padding::Same] {
        let fx = fixture(&[&[3, 10], &[3, 4]], 14);
        check(&fx, |f, v| f.g.depthwise_conv1d(v[0], v[1], pad));
    }
}

#[test]
fn tape_norms() {
    let fx = fixture(&[&[4, 5], &[5], &[5]], 15);
    check(&fx, |f, v| f.g.layer_norm(v[0], v[1], v[2], NORM_EPS));
    check(&fx, |f, v| f.g.rms_norm(v[0], v[1], NORM_EPS));
}

#[test]
fn rms_norm_sum_gradient() {
    let fx = fixture(&[&[3, 7]], 16);
    let gain = Tensor::full(&[7], 1.0);
    let report = check_store_gradients(&fx.store, 1e-5, None, |f| {
        let x = f.param(fx.ids[0]);
        let g = f.input(gain.clone());
        let y = f.g.rms_norm(x, g, NORM_EPS)?;
        Ok(f.g.sum_all(y))
    })
    .unwrap();
    assert!(report.max_relative_error < 1e-4);
}

#[test]
fn tape_masked_mean_sq() {
    let fx = fixture(&[&[2, 6]], 17);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let target = random(&[2, 6], &mut rng);
    let mask = Tensor::from_fn(&[2, 6], |i| ((i[0] + i[1]) % 3 == 0) as u8 as f64);
    let report = check_store_gradients(&fx.store, 1e-5, None, |f| {
        let p = f.param(fx.ids[0]);
        f.g.masked_mean_sq(p, &target, &mask)
    })
    .unwrap();
    assert!(report.max_relative_error < 1e-4);
    let mut f = Forward::new(&fx.store);
    let p = f.param(fx.ids[0]);
    assert!(matches!(
        f.g.masked_mean_sq(p, &target, &Tensor::zeros(&[2, 6])),
        Err(crate::Error::DegenerateBatch(_))
    ));
}

#[test]
fn tape_selective_scan() {
    let (h, n, l) = (3, 4, 9);
    let fx = fixture(&[&[h, l], &[h, l], &[h, n], &[n, l], &[n, l], &[h]], 18);
    for skip in [true, false] {
        let report = check_store_gradients(&fx.store, 1e-5, None, |f| {
            let v: Vec<Var> = fx.ids.iter().map(|&id| f.param(id)).collect();
            let delta = f.g.softplus(v[1]);
            let y = f.g.selective_scan(v[0], delta, v[2], v[3], v[4], v[5], skip)?;
            Ok(weighted_sum(f, y))
        })
        .unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }
}

#[test]
fn backward_needs_scalar() {
    let fx = fixture(&[&[2, 2]], 19);
    let mut f = Forward::new(&fx.store);
    let p = f.param(fx.ids[0]);
    assert!(f.param_grads(p).is_err());
}
