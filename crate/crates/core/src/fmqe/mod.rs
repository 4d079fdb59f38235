//! The quality evaluator: a convolutional feature encoder and a text encoder
//! aligned in a shared 512-d space, plus a transformer regression head that
//! maps an encoded feature map to its predicted quality score.

mod checkpoint;
mod loss;
mod metrics;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use loss::{contrastive_loss, regression_loss};
pub use metrics::{regression_metrics, ConfigMetrics, RegressionMetrics, RegressionReport};
pub use checkpoint::{decode_checkpoint, encode_checkpoint};
pub use train::{
    alignment_gap, combined_loss, evaluate_regression, train_fmqe, AlignmentReport, BatchItem, EpochLog,
    TrainRunConfig, TrainedModel, TrainingData,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::Module;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{normal_init, Binding, Conv2d, Linear, ParamId, Params, TransformerBlock};
use crate::tensor::Tensor;
use crate::text::{TextEncoder, TextEncoderConfig, TokenizedText, EMBED_DIM};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub channels: [usize; 4],
    /// Kernel of the first layer; later layers use 3x3. Padding keeps size.
    pub first_kernel: (usize, usize),
    /// 2x2 max pooling after each layer where set.
    pub pools: [bool; 4],
}

impl EncoderConfig {
    pub fn for_module(module: Module) -> Self {
        match module {
            Module::Ifem => EncoderConfig {
                channels: [8, 16, 16, 32],
                first_kernel: (3, 5),
                pools: [true, true, false, false],
            },
            Module::Bfem => EncoderConfig {
                channels: [8, 16, 16, 32],
                first_kernel: (3, 3),
                pools: [true, true, true, false],
            },
        }
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    conv: Conv2d,
    pool: bool,
}

/// Four conv layers, each followed by optional 2x2 max pooling and ReLU, then
/// a fully connected projection to 512. IFEM inputs `[V, C, H, W]` are
/// encoded view by view into `[V, 512]`.
#[derive(Clone, Debug)]
pub struct FeatureEncoder {
    pub module: Module,
    pub input_shape: Vec<usize>,
    layers: Vec<EncoderLayer>,
    pub projection: Linear,
}

impl FeatureEncoder {
    pub fn new<R: Rng + ?Sized>(
        params: &mut Params,
        name: &str,
        module: Module,
        input_shape: &[usize],
        cfg: &EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let view_shape = match (module, input_shape.len()) {
            (Module::Ifem, 4) => &input_shape[1..],
            (Module::Bfem, 3) => input_shape,
            _ => {
                return Err(Error::shape(
                    "feature_encoder",
                    format!("{module} input must be rank {}, got {input_shape:?}", if module == Module::Ifem { 4 } else { 3 }),
                ))
            }
        };
        let (mut c, mut h, mut w) = (view_shape[0], view_shape[1], view_shape[2]);
        let mut layers = Vec::with_capacity(4);
        for (l, (&cout, &pool)) in cfg.channels.iter().zip(&cfg.pools).enumerate() {
            let k = if l == 0 { cfg.first_kernel } else { (3, 3) };
            let pad = (k.0 / 2, k.1 / 2);
            let conv = Conv2d::new(params, &format!("{name}.conv{l}"), c, cout, k, pad, (1, 1), rng);
            h = h + 2 * pad.0 + 1 - k.0;
            w = w + 2 * pad.1 + 1 - k.1;
            if pool {
                if h < 2 || w < 2 {
                    return Err(Error::shape(
                        "feature_encoder",
                        format!("layer {l} cannot pool a {h}x{w} map"),
                    ));
                }
                h /= 2;
                w /= 2;
            }
            c = cout;
            layers.push(EncoderLayer { conv, pool });
        }
        let projection = Linear::new(params, &format!("{name}.fc"), c * h * w, EMBED_DIM, rng);
        Ok(FeatureEncoder {
            module,
            input_shape: input_shape.to_vec(),
            layers,
            projection,
        })
    }

    fn encode_view(&self, g: &mut Graph, b: &Binding, mut x: Var) -> Result<Var> {
        for layer in &self.layers {
            x = layer.conv.forward(g, b, x)?;
            if layer.pool {
                x = g.maxpool2d(x, (2, 2), (2, 2))?;
            }
            x = g.relu(x);
        }
        let n = g.value(x).numel();
        let flat = g.reshape(x, [n])?;
        self.projection.forward(g, b, flat)
    }

    /// `[C, H, W] -> [512]` for BFEM, `[V, C, H, W] -> [V, 512]` for IFEM.
    pub fn forward(&self, g: &mut Graph, b: &Binding, x: Var) -> Result<Var> {
        let shape = g.value(x).shape().to_vec();
        if shape != self.input_shape {
            return Err(Error::shape(
                "feature_encoder",
                format!("{} expects {:?}, got {shape:?}", self.module, self.input_shape),
            ));
        }
        match self.module {
            Module::Bfem => self.encode_view(g, b, x),
            Module::Ifem => {
                let views = (0..shape[0])
                    .map(|v| {
                        let view = g.select_rows(x, &[v])?;
                        let view = g.reshape(view, shape[1..].to_vec())?;
                        self.encode_view(g, b, view)
                    })
                    .collect::<Result<Vec<_>>>()?;
                g.stack(&views)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    /// The 512-d input is read as `tokens x (512 / tokens)`.
    pub tokens: usize,
    pub heads: usize,
    pub hidden: usize,
    pub blocks: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            tokens: 8,
            heads: 4,
            hidden: 128,
            blocks: 1,
        }
    }
}

/// Self-attention over the tokens of a 512-d vector, then mean pooling and a
/// scalar projection. The residual stream is not normalised before pooling so
/// the activation scale stays visible to the output. Predictions are never
/// clamped.
#[derive(Clone, Debug)]
pub struct RegressionHead {
    pub position: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub output: Linear,
    tokens: usize,
    width: usize,
}

impl RegressionHead {
    pub fn new<R: Rng + ?Sized>(params: &mut Params, name: &str, cfg: &HeadConfig, rng: &mut R) -> Result<Self> {
        if cfg.tokens == 0 || EMBED_DIM % cfg.tokens != 0 {
            return Err(Error::InvalidArgument(format!("{EMBED_DIM} is not divisible into {} tokens", cfg.tokens)));
        }
        let width = EMBED_DIM / cfg.tokens;
        let position = params.add(format!("{name}.pos"), normal_init(&[cfg.tokens, width], 0.02, rng));
        let blocks = (0..cfg.blocks)
            .map(|l| TransformerBlock::new(params, &format!("{name}.block{l}"), width, cfg.heads, cfg.hidden, rng))
            .collect::<Result<Vec<_>>>()?;
        // A zero output weight makes the initial prediction the bias alone.
        let output = Linear::new(params, &format!("{name}.out"), width, 1, rng);
        params.set(output.weight, Tensor::zeros(vec![1, width])?)?;
        Ok(RegressionHead {
            position,
            blocks,
            output,
            tokens: cfg.tokens,
            width,
        })
    }

    /// `[512] -> [1]`.
    pub fn forward(&self, g: &mut Graph, b: &Binding, v: Var) -> Result<Var> {
        if g.value(v).shape() != [EMBED_DIM] {
            return Err(Error::shape(
                "regression_head",
                format!("expected [{EMBED_DIM}], got {:?}", g.value(v).shape()),
            ));
        }
        let x = g.reshape(v, [self.tokens, self.width])?;
        let mut x = g.add(x, b.var(self.position))?;
        for block in &self.blocks {
            x = block.forward(g, b, x)?;
        }
        let pooled = g.mean_rows(x)?;
        self.output.forward(g, b, pooled)
    }
}

/// Everything needed to rebuild an evaluator's parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub module: Module,
    pub input_shape: Vec<usize>,
    pub encoder: EncoderConfig,
    pub text: TextEncoderConfig,
    pub head: HeadConfig,
    pub vocab_size: usize,
}

impl ModelSpec {
    pub fn new(module: Module, input_shape: Vec<usize>, vocab_size: usize) -> Self {
        ModelSpec {
            module,
            input_shape,
            encoder: EncoderConfig::for_module(module),
            text: TextEncoderConfig::default(),
            head: HeadConfig::default(),
            vocab_size,
        }
    }
}

/// One evaluator variant with its parameters.
#[derive(Clone, Debug)]
pub struct FmqeModel {
    pub spec: ModelSpec,
    pub params: Params,
    pub encoder: FeatureEncoder,
    pub text: TextEncoder,
    pub head: RegressionHead,
    pub log_tau: ParamId,
}

impl FmqeModel {
    pub fn new(spec: ModelSpec, tau_init: f64, seed: u64) -> Result<Self> {
        if !(tau_init > 0.0 && tau_init.is_finite()) {
            return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau_init}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let encoder = FeatureEncoder::new(&mut params, "encoder", spec.module, &spec.input_shape, &spec.encoder, &mut rng)?;
        let text = TextEncoder::new(&mut params, "text", spec.vocab_size, &spec.text, &mut rng)?;
        let head = RegressionHead::new(&mut params, "head", &spec.head, &mut rng)?;
        let log_tau = params.add("log_tau", Tensor::scalar(tau_init.ln()));
        Ok(FmqeModel {
            spec,
            params,
            encoder,
            text,
            head,
            log_tau,
        })
    }

    pub fn module(&self) -> Module {
        self.spec.module
    }

    pub fn tau(&self) -> f64 {
        self.params.get(self.log_tau).data()[0].exp()
    }

    /// Feature map to the 512-d vector the head consumes, plus the per-view
    /// rows (`[V, 512]`) for IFEM.
    pub fn embed(&self, g: &mut Graph, b: &Binding, features: Var) -> Result<(Var, Option<Var>)> {
        let enc = self.encoder.forward(g, b, features)?;
        match self.module() {
            Module::Bfem => Ok((enc, None)),
            Module::Ifem => Ok((g.mean_rows(enc)?, Some(enc))),
        }
    }

    pub fn predict_var(&self, g: &mut Graph, b: &Binding, features: Var) -> Result<Var> {
        let (v, _) = self.embed(g, b, features)?;
        self.head.forward(g, b, v)
    }

    /// Predicted quality score of one feature map.
    pub fn predict(&self, features: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let x = g.constant(features.clone());
        let p = self.predict_var(&mut g, &b, x)?;
        g.value(p).item()
    }

    pub fn encode_text(&self, g: &mut Graph, b: &Binding, tokens: &TokenizedText) -> Result<Var> {
        self.text.encode(g, b, tokens)
    }

    /// `exp(log_tau)` as a node of `g`.
    pub fn tau_var(&self, g: &mut Graph, b: &Binding) -> Var {
        g.exp(b.var(self.log_tau))
    }
}
