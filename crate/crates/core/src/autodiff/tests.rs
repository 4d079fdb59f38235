use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, rng).unwrap()
}

#[test]
fn sum_gradient_is_all_ones() {
    let mut g = Graph::new();
    let x = g.input(t(&[3], &[0.5, -1.0, 2.0]).with_grad());
    let s = g.sum(x);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn square_sum_gradient_is_twice_input() {
    let mut g = Graph::new();
    let x = g.input(t(&[2], &[1.0, 2.0]).with_grad());
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar_and_reuse() {
    let mut g = Graph::new();
    let x = g.input(t(&[2], &[1.0, 2.0]).with_grad());
    assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(Error::StaleTape)));
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let x = g.input(t(&[2], &[1.0, 2.0]).with_grad());
    let c = g.constant(t(&[2], &[3.0, 4.0]));
    let y = g.mul(x, c).unwrap();
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(x).unwrap().data(), &[3.0, 4.0]);
}

#[test]
fn unreachable_parameter_gets_zero_gradient_of_its_shape() {
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    let unused = g.param(Tensor::zeros([2, 3]).unwrap());
    let s = g.sum(x);
    let grads = g.backward(s).unwrap();
    let gu = grads.get(unused).unwrap();
    assert_eq!(gu.shape(), &[2, 3]);
    assert!(gu.data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_on_ones_sums_window() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::ones([1, 3, 3]).unwrap());
    let k = g.constant(Tensor::ones([1, 1, 3, 3]).unwrap());
    let b = g.constant(Tensor::zeros([1]).unwrap());
    let y = g.conv2d(x, k, b, (0, 0), (1, 1)).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 1]);
    assert_eq!(g.value(y).data(), &[9.0]);
}

#[test]
fn identity_kernel_reproduces_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let input = randn(&[1, 4, 5], &mut rng);
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let k = g.constant(Tensor::ones([1, 1, 1, 1]).unwrap());
    let b = g.constant(Tensor::zeros([1]).unwrap());
    let y = g.conv2d(x, k, b, (0, 0), (1, 1)).unwrap();
    assert!(g.value(y).bit_eq(&input));
}

#[test]
fn conv_reports_offending_dimension() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::ones([2, 3, 3]).unwrap());
    let k = g.constant(Tensor::ones([1, 3, 3, 3]).unwrap());
    let b = g.constant(Tensor::zeros([1]).unwrap());
    let err = g.conv2d(x, k, b, (0, 0), (1, 1)).unwrap_err().to_string();
    assert!(err.contains("channels"), "{err}");
    let k = g.constant(Tensor::ones([1, 2, 5, 1]).unwrap());
    let err = g.conv2d(x, k, b, (0, 0), (1, 1)).unwrap_err().to_string();
    assert!(err.contains("height"), "{err}");
    let k = g.constant(Tensor::ones([1, 2, 1, 1]).unwrap());
    assert!(g.conv2d(x, k, b, (0, 0), (0, 1)).is_err());
}

#[test]
fn maxpool_picks_maximum() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = g.maxpool2d(x, (2, 2), (2, 2)).unwrap();
    assert_eq!(g.value(y).data(), &[4.0]);
}

#[test]
fn maxpool_ties_route_to_first_element() {
    let mut g = Graph::new();
    let x = g.input(Tensor::full([1, 2, 2], 7.0).unwrap().with_grad());
    let y = g.maxpool2d(x, (2, 2), (2, 2)).unwrap();
    assert_eq!(g.value(y).data(), &[7.0]);
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn maxpool_rejects_oversized_window() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::ones([1, 2, 2]).unwrap());
    assert!(g.maxpool2d(x, (3, 2), (1, 1)).is_err());
}

#[test]
fn linear_identity_and_bias_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let input = randn(&[3, 4], &mut rng);
    let mut eye = vec![0.0; 16];
    for i in 0..4 {
        eye[i * 4 + i] = 1.0;
    }
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let w = g.constant(t(&[4, 4], &eye));
    let b = g.constant(Tensor::zeros([4]).unwrap());
    let y = g.linear(x, w, b).unwrap();
    assert!(g.value(y).bit_eq(&input));

    let w0 = g.constant(Tensor::zeros([2, 4]).unwrap());
    let bias = g.constant(t(&[2], &[0.25, -3.0]));
    let y = g.linear(x, w0, bias).unwrap();
    assert_eq!(g.value(y).shape(), &[3, 2]);
    for row in g.value(y).data().chunks(2) {
        assert_eq!(row, &[0.25, -3.0]);
    }
}

#[test]
fn linear_rejects_wrong_trailing_dim() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::ones([3, 5]).unwrap());
    let w = g.constant(Tensor::ones([2, 4]).unwrap());
    let b = g.constant(Tensor::zeros([2]).unwrap());
    assert!(matches!(g.linear(x, w, b), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn softmax_rows_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut g = Graph::new();
    let x = g.constant(randn(&[5, 7], &mut rng).scale(10.0));
    let p = g.softmax(x);
    for row in g.value(p).data().chunks(7) {
        assert!(row.iter().all(|&v| v >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let lp = g.log_softmax(x);
    for (a, b) in g.value(lp).data().iter().zip(g.value(p).data()) {
        assert!((a.exp() - b).abs() < 1e-12);
    }
}

type Builder = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// Every primitive composed into a scalar via a fixed random projection, so
/// the check sees a non-trivial upstream gradient.
fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor>, Builder)> {
    let proj = |g: &mut Graph, y: Var, seed: u64| -> Result<Var> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let w = Tensor::randn(g.value(y).shape().to_vec(), 1.0, &mut r)?;
        let w = g.constant(w);
        let p = g.mul(y, w)?;
        Ok(g.sum(p))
    };
    let pos = |shape: &[usize], rng: &mut ChaCha8Rng| Tensor::uniform(shape.to_vec(), 0.5, 2.0, rng).unwrap();
    vec![
        ("add", vec![randn(&[3, 4], rng), randn(&[3, 4], rng)], Box::new(move |g, v| { let y = g.add(v[0], v[1])?; proj(g, y, 1) })),
        ("sub", vec![randn(&[3, 4], rng), randn(&[3, 4], rng)], Box::new(move |g, v| { let y = g.sub(v[0], v[1])?; proj(g, y, 2) })),
        ("mul", vec![randn(&[3, 4], rng), randn(&[3, 4], rng)], Box::new(move |g, v| { let y = g.mul(v[0], v[1])?; proj(g, y, 3) })),
        ("affine", vec![randn(&[5], rng)], Box::new(move |g, v| { let y = g.affine(v[0], -1.5, 0.3); proj(g, y, 4) })),
        ("scale_by", vec![randn(&[4], rng), randn(&[1], rng)], Box::new(move |g, v| { let y = g.scale_by(v[0], v[1])?; proj(g, y, 5) })),
        ("recip", vec![pos(&[4], rng)], Box::new(move |g, v| { let y = g.recip(v[0]); proj(g, y, 6) })),
        ("exp", vec![randn(&[4], rng)], Box::new(move |g, v| { let y = g.exp(v[0]); proj(g, y, 7) })),
        ("log", vec![pos(&[4], rng)], Box::new(move |g, v| { let y = g.log(v[0]); proj(g, y, 8) })),
        ("relu", vec![randn(&[6], rng)], Box::new(move |g, v| { let y = g.relu(v[0]); proj(g, y, 9) })),
        ("gelu", vec![randn(&[6], rng)], Box::new(move |g, v| { let y = g.gelu(v[0]); proj(g, y, 10) })),
        ("softplus", vec![randn(&[6], rng).scale(3.0)], Box::new(move |g, v| { let y = g.softplus(v[0]); proj(g, y, 11) })),
        ("clamp", vec![randn(&[6], rng)], Box::new(move |g, v| { let y = g.clamp(v[0], -0.5, 0.5); proj(g, y, 12) })),
        ("mean", vec![randn(&[3, 3], rng)], Box::new(move |g, v| { let y = g.mul(v[0], v[0])?; Ok(g.mean(y)) })),
        ("mean_rows", vec![randn(&[3, 5], rng)], Box::new(move |g, v| { let y = g.mean_rows(v[0])?; proj(g, y, 13) })),
        ("reshape", vec![randn(&[2, 6], rng)], Box::new(move |g, v| { let y = g.reshape(v[0], [3, 4])?; proj(g, y, 14) })),
        ("transpose", vec![randn(&[2, 5], rng)], Box::new(move |g, v| { let y = g.transpose(v[0])?; proj(g, y, 15) })),
        ("matmul", vec![randn(&[3, 4], rng), randn(&[4, 2], rng)], Box::new(move |g, v| { let y = g.matmul(v[0], v[1])?; proj(g, y, 16) })),
        ("matmul_nt", vec![randn(&[3, 4], rng), randn(&[5, 4], rng)], Box::new(move |g, v| { let y = g.matmul_nt(v[0], v[1])?; proj(g, y, 17) })),
        ("linear", vec![randn(&[2, 3, 4], rng), randn(&[5, 4], rng), randn(&[5], rng)], Box::new(move |g, v| { let y = g.linear(v[0], v[1], v[2])?; proj(g, y, 18) })),
        ("conv2d", vec![randn(&[2, 5, 6], rng), randn(&[3, 2, 3, 2], rng), randn(&[3], rng)], Box::new(move |g, v| { let y = g.conv2d(v[0], v[1], v[2], (1, 1), (2, 1))?; proj(g, y, 19) })),
        ("add_channel", vec![randn(&[3, 2, 2], rng), randn(&[3], rng)], Box::new(move |g, v| { let y = g.add_channel(v[0], v[1])?; proj(g, y, 20) })),
        ("maxpool2d", vec![randn(&[2, 4, 5], rng)], Box::new(move |g, v| { let y = g.maxpool2d(v[0], (2, 2), (2, 1))?; proj(g, y, 21) })),
        ("softmax", vec![randn(&[3, 4], rng)], Box::new(move |g, v| { let y = g.softmax(v[0]); proj(g, y, 22) })),
        ("log_softmax", vec![randn(&[3, 4], rng)], Box::new(move |g, v| { let y = g.log_softmax(v[0]); proj(g, y, 23) })),
        ("layer_norm", vec![randn(&[3, 6], rng), randn(&[6], rng), randn(&[6], rng)], Box::new(move |g, v| { let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?; proj(g, y, 24) })),
        ("l2_normalize_rows", vec![randn(&[3, 4], rng)], Box::new(move |g, v| { let y = g.l2_normalize_rows(v[0]); proj(g, y, 25) })),
        ("slice_concat", vec![randn(&[3, 6], rng)], Box::new(move |g, v| {
            let a = g.slice_cols(v[0], 0, 2)?;
            let b = g.slice_cols(v[0], 3, 3)?;
            let y = g.concat_cols(&[b, a])?;
            proj(g, y, 26)
        })),
        ("stack_select", vec![randn(&[4], rng), randn(&[4], rng)], Box::new(move |g, v| {
            let s = g.stack(&[v[0], v[1]])?;
            let y = g.select_rows(s, &[1, 0, 1])?;
            proj(g, y, 27)
        })),
        ("diag", vec![randn(&[4, 4], rng)], Box::new(move |g, v| { let y = g.diag(v[0])?; proj(g, y, 28) })),
    ]
}

#[test]
fn every_primitive_matches_finite_differences() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        for (name, inputs, f) in primitive_cases(&mut rng) {
            let report = gradcheck::check(&inputs, &f, None, &mut rng).unwrap();
            assert!(report.passes(1e-4), "{name} seed {seed}: {report:?}");
        }
    }
}
