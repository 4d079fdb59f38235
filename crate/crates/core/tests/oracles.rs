//! Layer, similarity, loss and metric outputs against independent
//! brute-force implementations.

mod common;

use common::oracle::{contrastive, contrastive_oracle, cs_oracle, metrics_oracle};
use fmqs::autodiff::Graph;
use fmqs::fmqe::{regression_loss, regression_metrics};
use fmqs::nn::{Binding, MultiHeadAttention, Params};
use fmqs::optim::{Adam, AdamConfig, CosineAnnealing};
use fmqs::similarity::{channel_cossim, cs_cossim, spatial_cossim, CsCosSimConfig};
use fmqs::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, r).unwrap()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn conv_oracle(x: &Tensor, k: &Tensor, bias: &Tensor, pad: (usize, usize), stride: (usize, usize)) -> Vec<f64> {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * pad.0 - kh) / stride.0 + 1;
    let ow = (w + 2 * pad.1 - kw) / stride.1 + 1;
    let mut out = vec![0.0; cout * oh * ow];
    for o in 0..cout {
        for y in 0..oh {
            for xo in 0..ow {
                let mut acc = bias.data()[o];
                for c in 0..cin {
                    for i in 0..kh {
                        for j in 0..kw {
                            let iy = (y * stride.0 + i) as isize - pad.0 as isize;
                            let ix = (xo * stride.1 + j) as isize - pad.1 as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let xv = x.data()[(c * h + iy as usize) * w + ix as usize];
                            let kv = k.data()[((o * cin + c) * kh + i) * kw + j];
                            acc += xv * kv;
                        }
                    }
                }
                out[(o * oh + y) * ow + xo] = acc;
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_nested_loops() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let x = randn(&[2, 4, 4], &mut r);
        let k = randn(&[3, 2, 3, 3], &mut r);
        let b = randn(&[3], &mut r);
        for (pad, stride) in [((0, 0), (1, 1)), ((1, 1), (1, 1)), ((1, 0), (2, 1)), ((2, 1), (2, 2))] {
            let mut g = Graph::new();
            let (xv, kv, bv) = (g.constant(x.clone()), g.constant(k.clone()), g.constant(b.clone()));
            let y = g.conv2d(xv, kv, bv, pad, stride).unwrap();
            let expected = conv_oracle(&x, &k, &b, pad, stride);
            assert!(max_diff(g.value(y).data(), &expected) < 1e-12, "pad {pad:?} stride {stride:?}");
        }
    }
}

#[test]
fn maxpool_matches_nested_loops() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let x = randn(&[2, 4, 4], &mut r);
        for (window, stride) in [((2, 2), (2, 2)), ((3, 3), (1, 1)), ((2, 1), (1, 2))] {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let y = g.maxpool2d(xv, window, stride).unwrap();
            let oh = (4 - window.0) / stride.0 + 1;
            let ow = (4 - window.1) / stride.1 + 1;
            let mut expected = Vec::new();
            for c in 0..2 {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut m = f64::NEG_INFINITY;
                        for i in 0..window.0 {
                            for j in 0..window.1 {
                                m = m.max(x.data()[(c * 4 + oy * stride.0 + i) * 4 + ox * stride.1 + j]);
                            }
                        }
                        expected.push(m);
                    }
                }
            }
            assert_eq!(g.value(y).data(), expected.as_slice());
        }
    }
}

#[test]
fn linear_matches_dot_products() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let x = randn(&[3, 4], &mut r);
        let w = randn(&[5, 4], &mut r);
        let b = randn(&[5], &mut r);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.linear(xv, wv, bv).unwrap();
        let mut expected = Vec::new();
        for i in 0..3 {
            for o in 0..5 {
                let mut acc = b.data()[o];
                for k in 0..4 {
                    acc += x.data()[i * 4 + k] * w.data()[o * 4 + k];
                }
                expected.push(acc);
            }
        }
        assert_eq!(g.value(y).shape(), &[3, 5]);
        assert!(max_diff(g.value(y).data(), &expected) < 1e-12);
    }
}

fn affine_rows(x: &[f64], rows: usize, din: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let dout = b.len();
    let mut out = vec![0.0; rows * dout];
    for i in 0..rows {
        for o in 0..dout {
            out[i * dout + o] = b[o] + (0..din).map(|k| x[i * din + k] * w[o * din + k]).sum::<f64>();
        }
    }
    out
}

/// Attention computed head by head with explicit exponentials.
fn attention_oracle(params: &Params, att: &MultiHeadAttention, q: &Tensor, kv: &Tensor) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d = att.dim;
    let (lq, lk) = (q.shape()[0], kv.shape()[0]);
    let proj = |l: &fmqs::nn::Linear, x: &Tensor, rows| {
        affine_rows(x.data(), rows, d, params.get(l.weight).data(), params.get(l.bias).data())
    };
    let (qp, kp, vp) = (proj(&att.query, q, lq), proj(&att.key, kv, lk), proj(&att.value, kv, lk));
    let dh = d / att.heads;
    let mut merged = vec![0.0; lq * d];
    let mut weights = Vec::new();
    for h in 0..att.heads {
        let mut wts = vec![0.0; lq * lk];
        for i in 0..lq {
            let scores: Vec<f64> = (0..lk)
                .map(|j| (0..dh).map(|t| qp[i * d + h * dh + t] * kp[j * d + h * dh + t]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..lk {
                wts[i * lk + j] = e[j] / z;
            }
            for t in 0..dh {
                merged[i * d + h * dh + t] = (0..lk).map(|j| wts[i * lk + j] * vp[j * d + h * dh + t]).sum();
            }
        }
        weights.push(wts);
    }
    let out = affine_rows(&merged, lq, d, params.get(att.output.weight).data(), params.get(att.output.bias).data());
    (out, weights)
}

#[test]
fn attention_matches_explicit_softmax() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let mut params = Params::new();
        let att = MultiHeadAttention::new(&mut params, "a", 8, 2, &mut r).unwrap();
        for id in params.ids().collect::<Vec<_>>() {
            let shape = params.get(id).shape().to_vec();
            params.set(id, Tensor::randn(shape, 0.5, &mut r).unwrap()).unwrap();
        }
        let x = randn(&[4, 8], &mut r);
        let mut g = Graph::new();
        let b = params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = att.forward_with_weights(&mut g, &b, xv, xv, xv).unwrap();
        let (expected, weights) = attention_oracle(&params, &att, &x, &x);
        assert!(max_diff(g.value(out.output).data(), &expected) < 1e-12);
        for (w, e) in out.weights.iter().zip(&weights) {
            assert!(max_diff(g.value(*w).data(), e) < 1e-12);
            for row in g.value(*w).data().chunks(4) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn attention_single_key_returns_projected_value() {
    let mut r = rng(3);
    let mut params = Params::new();
    let att = MultiHeadAttention::new(&mut params, "a", 8, 2, &mut r).unwrap();
    let q = randn(&[1, 8], &mut r);
    let kv = randn(&[1, 8], &mut r);
    let mut g = Graph::new();
    let b = params.bind(&mut g, false);
    let (qv, kvv) = (g.constant(q), g.constant(kv.clone()));
    let out = att.forward(&mut g, &b, qv, kvv, kvv).unwrap();
    let v = affine_rows(kv.data(), 1, 8, params.get(att.value.weight).data(), params.get(att.value.bias).data());
    let expected = affine_rows(&v, 1, 8, params.get(att.output.weight).data(), params.get(att.output.bias).data());
    assert!(max_diff(g.value(out).data(), &expected) < 1e-12);
}

#[test]
fn attention_identical_keys_give_uniform_weights() {
    let mut r = rng(4);
    let mut params = Params::new();
    let att = MultiHeadAttention::new(&mut params, "a", 8, 4, &mut r).unwrap();
    let q = randn(&[3, 8], &mut r);
    let row = randn(&[1, 8], &mut r);
    let kv = Tensor::new([5, 8], row.data().repeat(5)).unwrap();
    let mut g = Graph::new();
    let b = params.bind(&mut g, false);
    let (qv, kvv) = (g.constant(q), g.constant(kv));
    let out = att.forward_with_weights(&mut g, &b, qv, kvv, kvv).unwrap();
    for w in out.weights {
        assert!(g.value(w).data().iter().all(|&p| (p - 0.2).abs() < 1e-12));
    }
}

#[test]
fn adam_matches_hand_recurrence() {
    // f(x) = (x - 3)^2 from x = 0, three steps at a fixed rate.
    let mut params = Params::new();
    let id = params.add("x", Tensor::scalar(0.0));
    let lr = 0.1;
    let mut adam = Adam::new(&params, AdamConfig::default(), CosineAnnealing { base_lr: lr, min_lr: lr, epochs: 1 });
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut x, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
    for t in 1..=3 {
        let grad = 2.0 * (params.get(id).data()[0] - 3.0);
        adam.step(&mut params, &[Tensor::scalar(grad)], 0).unwrap();
        let gx = 2.0 * (x - 3.0);
        m = b1 * m + (1.0 - b1) * gx;
        v = b2 * v + (1.0 - b2) * gx * gx;
        let mhat = m / (1.0 - b1.powi(t));
        let vhat = v / (1.0 - b2.powi(t));
        x -= lr * mhat / (vhat.sqrt() + eps);
        assert!((params.get(id).data()[0] - x).abs() < 1e-15, "step {t}");
    }
}

#[test]
fn adam_first_step_and_zero_gradient() {
    let mut params = Params::new();
    let id = params.add("x", Tensor::scalar(1.5));
    let mut adam = Adam::new(&params, AdamConfig::default(), CosineAnnealing::new(1e-3, 10));
    adam.step(&mut params, &[Tensor::scalar(0.0)], 0).unwrap();
    assert_eq!(params.get(id).data()[0], 1.5);
    let mut adam = Adam::new(&params, AdamConfig::default(), CosineAnnealing::new(1e-3, 10));
    adam.step(&mut params, &[Tensor::scalar(1.0)], 0).unwrap();
    assert!(((1.5 - params.get(id).data()[0]) - 1e-3).abs() < 1e-10);
}

#[test]
fn cosine_schedule_follows_formula() {
    let s = CosineAnnealing::new(1e-4, 20);
    for e in 0..=20 {
        let expected = 1e-4 * 0.5 * (1.0 + (std::f64::consts::PI * e as f64 / 20.0).cos());
        assert!((s.lr(e) - expected).abs() < 1e-12);
    }
}

#[test]
fn cs_cossim_matches_oracle_per_shape_class() {
    let shapes: [&[usize]; 5] = [&[1, 1, 1], &[1, 4, 4], &[6, 1, 1], &[3, 2, 2], &[8, 5, 7]];
    let mut r = rng(11);
    for shape in shapes {
        for _ in 0..100 {
            let a = randn(shape, &mut r);
            let b = randn(shape, &mut r);
            let alpha: f64 = r.random_range(0.0..=1.0);
            let cfg = CsCosSimConfig {
                alpha,
                zero_vector_policy: 0.0,
            };
            let (ch, sp, cs) = cs_oracle(&a, &b, alpha, 0.0);
            assert!((channel_cossim(&a, &b, 0.0).unwrap() - ch).abs() < 1e-12);
            assert!((spatial_cossim(&a, &b, 0.0).unwrap() - sp).abs() < 1e-12);
            assert!((cs_cossim(&a, &b, &cfg).unwrap() - cs).abs() < 1e-12, "{shape:?}");
        }
    }
}

#[test]
fn cs_cossim_hand_examples() {
    let a = Tensor::new([1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let b = Tensor::new([1, 2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
    assert!((channel_cossim(&a, &b, 0.0).unwrap() - 0.7071067811865475).abs() < 1e-15);
    let p = Tensor::new([1, 2, 2], vec![0.5, 2.0, 3.0, 7.0]).unwrap();
    let q = Tensor::new([1, 2, 2], vec![9.0, 0.1, 4.0, 1.0]).unwrap();
    assert_eq!(spatial_cossim(&p, &q, 0.0).unwrap(), 1.0);
    let neg = a.scale(-1.0);
    assert_eq!(channel_cossim(&p, &p, 0.0).unwrap(), 1.0);
    assert_eq!(channel_cossim(&b, &b.scale(-1.0), 0.0).unwrap(), -1.0);
    assert!((channel_cossim(&a, &neg, 0.0).unwrap() + 1.0).abs() < 1e-15);
}

#[test]
fn cs_cossim_zero_vector_policy() {
    let a = Tensor::zeros([2, 2, 2]).unwrap();
    let b = Tensor::ones([2, 2, 2]).unwrap();
    let cfg = CsCosSimConfig {
        alpha: 0.5,
        zero_vector_policy: 0.25,
    };
    assert_eq!(cs_cossim(&a, &b, &cfg).unwrap(), 0.25);
}

#[test]
fn regression_metrics_match_oracle() {
    let mut r = rng(21);
    for _ in 0..50 {
        let n = r.random_range(2..200);
        let y: Vec<f64> = (0..n).map(|_| r.random_range(0.05..1.0)).collect();
        let p: Vec<f64> = y.iter().map(|v| v + r.random_range(-0.3..0.3)).collect();
        let m = regression_metrics(&p, &y).unwrap();
        let (mse, mae, r2, mape) = metrics_oracle(&p, &y);
        assert!((m.mse - mse).abs() < 1e-12);
        assert!((m.mae - mae).abs() < 1e-12);
        assert!((m.r_squared - r2).abs() < 1e-12);
        assert!((m.mape_percent - mape).abs() < 1e-12);
        assert_eq!(m.mape_excluded, 0);
    }
}

#[test]
fn contrastive_loss_matches_oracle_and_is_symmetric() {
    let mut r = rng(31);
    for _ in 0..50 {
        let s = r.random_range(1..7);
        let d = r.random_range(1..9);
        let tau = r.random_range(0.05..2.0);
        let a: Vec<f64> = (0..s * d).map(|_| r.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..s * d).map(|_| r.random_range(-1.0..1.0)).collect();
        let l = contrastive(&a, &b, s, d, tau);
        assert!((l - contrastive_oracle(&a, &b, s, d, tau)).abs() < 1e-10);
        assert!((l - contrastive(&b, &a, s, d, tau)).abs() < 1e-12);
        assert!(l >= 0.0);
        let mut scaled = a.clone();
        scaled[..d].iter_mut().for_each(|x| *x *= 3.7);
        assert!((l - contrastive(&scaled, &b, s, d, tau)).abs() < 1e-12);
    }
}

#[test]
fn regression_loss_rejects_empty_and_mismatched() {
    let mut g = Graph::new();
    let p = g.constant(Tensor::vector(vec![1.0, 2.0]).unwrap());
    let y = g.constant(Tensor::vector(vec![1.0]).unwrap());
    assert!(regression_loss(&mut g, p, y).is_err());
}

#[test]
fn binding_round_trips_parameter_values() {
    let mut params = Params::new();
    params.add("w", Tensor::ones([2]).unwrap());
    let mut g = Graph::new();
    let vars: Vec<_> = params.tensors().iter().map(|t| g.param(t.clone())).collect();
    let b = Binding::from_vars(vars);
    assert_eq!(g.value(b.vars()[0]).data(), &[1.0, 1.0]);
}

fn tensor_strategy(shape: [usize; 3]) -> impl Strategy<Value = Tensor> {
    let n = shape.iter().product::<usize>();
    proptest::collection::vec(-10.0f64..10.0, n).prop_map(move |v| Tensor::new(shape.to_vec(), v).unwrap())
}

fn pair() -> impl Strategy<Value = (Tensor, Tensor)> {
    (1usize..5, 1usize..5, 1usize..5).prop_flat_map(|(c, h, w)| (tensor_strategy([c, h, w]), tensor_strategy([c, h, w])))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn cs_cossim_properties((a, b) in pair(), alpha in 0.0f64..=1.0, scale in 0.01f64..100.0) {
        let cfg = CsCosSimConfig { alpha, zero_vector_policy: 0.0 };
        let ab = cs_cossim(&a, &b, &cfg).unwrap();
        let ba = cs_cossim(&b, &a, &cfg).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&ab));
        let scaled = cs_cossim(&a.scale(scale), &b, &cfg).unwrap();
        prop_assert!((ab - scaled).abs() < 1e-12);
        let nonzero = a.data().chunks(a.shape()[1] * a.shape()[2]).all(|c| c.iter().any(|&v| v != 0.0));
        let plane = a.shape()[1] * a.shape()[2];
        let locations_nonzero = (0..plane).all(|p| (0..a.shape()[0]).any(|c| a.data()[c * plane + p] != 0.0));
        if nonzero && locations_nonzero {
            prop_assert!((cs_cossim(&a, &a, &cfg).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(v in proptest::collection::vec(-50.0f64..50.0, 1..40), cols in 1usize..8) {
        let rows = v.len() / cols;
        prop_assume!(rows > 0);
        let t = Tensor::new([rows, cols], v[..rows * cols].to_vec()).unwrap();
        let mut g = Graph::new();
        let x = g.constant(t);
        let s = g.softmax(x);
        for row in g.value(s).data().chunks(cols) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn regression_metric_bounds(
        y in proptest::collection::vec(0.01f64..1.0, 2..60),
        noise in proptest::collection::vec(-0.5f64..0.5, 60),
    ) {
        let p: Vec<f64> = y.iter().zip(&noise).map(|(a, b)| a + b).collect();
        let m = regression_metrics(&p, &y).unwrap();
        prop_assert!(m.mse >= 0.0 && m.mae >= 0.0 && m.mape_percent >= 0.0);
        prop_assert!(m.r_squared <= 1.0);
    }
}
