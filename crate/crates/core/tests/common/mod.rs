#![allow(dead_code)]

pub mod oracle;

use fmqs::archive::Module;
use fmqs::auxiliary::{fmqs_aux_loss, FrozenEvaluator};
use fmqs::fmqe::{combined_loss, contrastive_loss, regression_loss, BatchItem, FmqeModel, ModelSpec};
use fmqs::gradcheck::{self, GradCheckReport};
use fmqs::nn::{Binding, Conv2d, LayerNorm, Linear, MultiHeadAttention, Params, TransformerBlock};
use fmqs::text::{tokenize, TextEncoder, TextEncoderConfig, TokenizedText, Vocabulary, EMBED_DIM};
use fmqs::{Graph, Result, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TOLERANCE: f64 = 1e-4;

pub const TEXTS: [&str; 4] = [
    "scene with 1 objects. car at 1.00 2.00 size 4.50 1.80.",
    "scene with 2 objects. bus at -3.25 0.50 size 10.00 2.90. pedestrian at 4.00 -1.00 size 0.70 0.70.",
    "scene with 0 objects.",
    "scene with 1 objects. barrier at 0.10 7.75 size 2.00 0.50 yaw 1.57.",
];

pub fn texts(vocab: &Vocabulary) -> Vec<TokenizedText> {
    TEXTS.iter().map(|t| tokenize(t, vocab).unwrap()).collect()
}

/// Sums the output against fixed random weights so every element of it
/// receives a distinct upstream gradient.
pub fn readout(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = Tensor::randn(g.value(y).shape().to_vec(), 1.0, &mut r)?;
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, r).unwrap()
}

/// Replaces every parameter with a fresh normal draw so that no gradient is
/// structurally zero (zero-initialised weights and biases would hide
/// errors upstream of them).
fn perturb(params: &mut Params, std: f64, r: &mut ChaCha8Rng) {
    for id in params.ids().collect::<Vec<_>>() {
        let t = params.get(id);
        let shape = t.shape().to_vec();
        let noise = Tensor::randn(shape.clone(), std, r).unwrap();
        let data = t.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
        params.set(id, Tensor::new(shape, data).unwrap()).unwrap();
    }
}

/// Checks `f(binding, inputs)` against finite differences with respect to
/// every parameter tensor and every extra input.
fn check_params<F>(params: &Params, extra: &[Tensor], per_input: Option<usize>, r: &mut ChaCha8Rng, f: F) -> GradCheckReport
where
    F: Fn(&mut Graph, &Binding, &[Var]) -> Result<Var>,
{
    let n = params.len();
    let mut inputs = params.tensors().to_vec();
    inputs.extend_from_slice(extra);
    gradcheck::check(
        &inputs,
        |g, v| {
            let b = Binding::from_vars(v[..n].to_vec());
            f(g, &b, &v[n..])
        },
        per_input,
        r,
    )
    .unwrap()
}

fn small_spec(module: Module, vocab: &Vocabulary) -> ModelSpec {
    let shape = match module {
        Module::Ifem => vec![2, 3, 8, 12],
        Module::Bfem => vec![3, 8, 8],
    };
    let mut spec = ModelSpec::new(module, shape, vocab.len());
    spec.text = TextEncoderConfig {
        width: 16,
        heads: 2,
        hidden: 24,
        layers: 2,
    };
    spec.head.hidden = 32;
    spec
}

/// Every named gradient check for one seed.
pub fn gradient_cases(seed: u64) -> Vec<(&'static str, GradCheckReport)> {
    let mut r = ChaCha8Rng::seed_from_u64(0x96ad ^ seed);
    let vocab = Vocabulary::v1();
    let tokens = texts(&vocab);
    let mut out = Vec::new();

    let mut p = Params::new();
    let lin = Linear::new(&mut p, "lin", 5, 4, &mut r);
    perturb(&mut p, 0.3, &mut r);
    let x = randn(&[3, 5], &mut r);
    out.push(("linear", check_params(&p, &[x], None, &mut r, |g, b, v| {
        let y = lin.forward(g, b, v[0])?;
        readout(g, y, seed)
    })));

    let mut p = Params::new();
    let conv = Conv2d::new(&mut p, "conv", 2, 3, (3, 2), (1, 1), (2, 1), &mut r);
    perturb(&mut p, 0.3, &mut r);
    let x = randn(&[2, 5, 6], &mut r);
    out.push(("conv2d", check_params(&p, &[x], None, &mut r, |g, b, v| {
        let y = conv.forward(g, b, v[0])?;
        readout(g, y, seed)
    })));

    let x = randn(&[2, 6, 5], &mut r);
    out.push(("maxpool2d", gradcheck::check(&[x], |g, v| {
        let y = g.maxpool2d(v[0], (2, 2), (2, 2))?;
        readout(g, y, seed)
    }, None, &mut r).unwrap()));

    let mut p = Params::new();
    let ln = LayerNorm::new(&mut p, "ln", 6);
    perturb(&mut p, 0.3, &mut r);
    let x = randn(&[3, 6], &mut r);
    out.push(("layer_norm", check_params(&p, &[x], None, &mut r, |g, b, v| {
        let y = ln.forward(g, b, v[0])?;
        readout(g, y, seed)
    })));

    let mut p = Params::new();
    let att = MultiHeadAttention::new(&mut p, "att", 8, 2, &mut r).unwrap();
    perturb(&mut p, 0.2, &mut r);
    let (q, kv) = (randn(&[2, 8], &mut r), randn(&[3, 8], &mut r));
    out.push(("attention", check_params(&p, &[q, kv], None, &mut r, |g, b, v| {
        let y = att.forward(g, b, v[0], v[1], v[1])?;
        readout(g, y, seed)
    })));

    let mut p = Params::new();
    let block = TransformerBlock::new(&mut p, "blk", 8, 2, 12, &mut r).unwrap();
    perturb(&mut p, 0.2, &mut r);
    let x = randn(&[4, 8], &mut r);
    out.push(("transformer_block", check_params(&p, &[x], Some(6), &mut r, |g, b, v| {
        let y = block.forward(g, b, v[0])?;
        readout(g, y, seed)
    })));

    let mut p = Params::new();
    let cfg = TextEncoderConfig {
        width: 16,
        heads: 2,
        hidden: 24,
        layers: 2,
    };
    let enc = TextEncoder::new(&mut p, "text", vocab.len(), &cfg, &mut r).unwrap();
    perturb(&mut p, 0.05, &mut r);
    let t = &tokens[(seed % 4) as usize];
    out.push(("text_encoder", check_params(&p, &[], Some(4), &mut r, |g, b, _| {
        let y = enc.encode(g, b, t)?;
        readout(g, y, seed)
    })));

    for module in Module::ALL {
        let mut model = FmqeModel::new(small_spec(module, &vocab), 0.07, seed).unwrap();
        perturb(&mut model.params, 0.02, &mut r);
        let x = randn(&model.spec.input_shape, &mut r);
        let name = if module == Module::Ifem { "ifem_encoder" } else { "bfem_encoder" };
        out.push((name, check_params(&model.params, &[x], Some(3), &mut r, |g, b, v| {
            let y = model.encoder.forward(g, b, v[0])?;
            readout(g, y, seed)
        })));
    }

    let mut p = Params::new();
    let head = fmqs::fmqe::RegressionHead::new(&mut p, "head", &Default::default(), &mut r).unwrap();
    perturb(&mut p, 0.05, &mut r);
    let v = randn(&[EMBED_DIM], &mut r);
    out.push(("regression_head", check_params(&p, &[v], Some(6), &mut r, |g, b, v| {
        head.forward(g, b, v[0])
    })));

    let s = 2 + (seed % 4) as usize;
    let (img, txt) = (randn(&[s, 6], &mut r), randn(&[s, 6], &mut r));
    let log_tau = Tensor::scalar((0.07f64).ln() + 0.5 * (seed % 3) as f64);
    out.push(("contrastive_loss", gradcheck::check(&[img, txt, log_tau], |g, v| {
        let tau = g.exp(v[2]);
        contrastive_loss(g, v[0], v[1], tau)
    }, None, &mut r).unwrap()));

    let (pred, label) = (randn(&[s + 3], &mut r), randn(&[s + 3], &mut r));
    out.push(("regression_loss", gradcheck::check(&[pred, label], |g, v| regression_loss(g, v[0], v[1]), None, &mut r).unwrap()));

    for module in Module::ALL {
        let model = FmqeModel::new(small_spec(module, &vocab), 0.07, seed).unwrap();
        let views = model.spec.input_shape.first().copied().filter(|_| module == Module::Ifem).unwrap_or(1);
        let per_item: Vec<Vec<TokenizedText>> = (0..3)
            .map(|i| (0..views).map(|c| tokens[(i + c) % tokens.len()].clone()).collect())
            .collect();
        let items: Vec<BatchItem> = per_item
            .iter()
            .enumerate()
            .map(|(i, t)| BatchItem {
                features: randn(&model.spec.input_shape, &mut r),
                label: 0.3 + 0.2 * i as f64,
                texts: t,
            })
            .collect();
        let name = if module == Module::Ifem { "combined_loss_ifem" } else { "combined_loss_bfem" };
        out.push((name, check_params(&model.params, &[], Some(2), &mut r, |g, b, _| {
            combined_loss(g, b, &model, &items, 0.5)
        })));
    }

    for module in Module::ALL {
        let mut model = FmqeModel::new(small_spec(module, &vocab), 0.07, seed).unwrap();
        perturb(&mut model.params, 0.02, &mut r);
        let x = randn(&model.spec.input_shape, &mut r);
        let evaluator = FrozenEvaluator::new(model).unwrap();
        let name = if module == Module::Ifem { "aux_loss_ifem" } else { "aux_loss_bfem" };
        out.push((name, gradcheck::check(&[x], |g, v| {
            let b = evaluator.bind(g);
            fmqs_aux_loss(g, &b, &evaluator, v[0], module, false)
        }, Some(24), &mut r).unwrap()));
    }
    out
}
