//! Parameter storage and the layers built on top of [`Graph`].

use rand::Rng;

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a tensor inside a [`Params`] store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named parameter tensors. Insertion order is the serialization order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Params::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Replaces a parameter value; the shape must not change.
    pub fn set(&mut self, id: ParamId, tensor: Tensor) -> Result<()> {
        if tensor.shape() != self.tensors[id.0].shape() {
            return Err(Error::shape(
                "params.set",
                format!(
                    "{}: expected {:?}, got {:?}",
                    self.names[id.0],
                    self.tensors[id.0].shape(),
                    tensor.shape()
                ),
            ));
        }
        self.tensors[id.0] = tensor;
        Ok(())
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Places every parameter on `g`, as gradient-tracking leaves when
    /// `trainable`, as constants otherwise.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Binding {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Binding { vars }
    }

    /// FNV-1a over names, shapes and value bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (name, t) in self.iter() {
            feed(name.as_bytes());
            for &d in t.shape() {
                feed(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                feed(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Graph nodes holding one [`Params`] store for the current recording.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Binding { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients in parameter order; untouched parameters get zeros.
    pub fn gradients(&self, grads: &Gradients, params: &Params) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(params.tensors())
            .map(|(&v, t)| {
                grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::from_parts(t.shape().to_vec(), vec![0.0; t.numel()]))
            })
            .collect()
    }
}

/// Uniform in `±sqrt(6 / fan_in)`.
pub fn kaiming_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape.to_vec(), -bound, bound, rng).expect("positive dims")
}

pub fn normal_init<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    Tensor::randn(shape.to_vec(), std, rng).expect("positive dims")
}

fn zeros(shape: &[usize]) -> Tensor {
    Tensor::zeros(shape.to_vec()).expect("positive dims")
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(params: &mut Params, name: &str, din: usize, dout: usize, rng: &mut R) -> Self {
        let weight = params.add(format!("{name}.weight"), kaiming_uniform(&[dout, din], din, rng));
        let bias = params.add(format!("{name}.bias"), zeros(&[dout]));
        Linear { weight, bias, din, dout }
    }

    pub fn forward(&self, g: &mut Graph, b: &Binding, x: Var) -> Result<Var> {
        g.linear(x, b.var(self.weight), b.var(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub padding: (usize, usize),
    pub stride: (usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        params: &mut Params,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        padding: (usize, usize),
        stride: (usize, usize),
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * kernel.0 * kernel.1;
        let k = params.add(
            format!("{name}.kernel"),
            kaiming_uniform(&[cout, cin, kernel.0, kernel.1], fan_in, rng),
        );
        let bias = params.add(format!("{name}.bias"), zeros(&[cout]));
        Conv2d { kernel: k, bias, padding, stride }
    }

    pub fn forward(&self, g: &mut Graph, b: &Binding, x: Var) -> Result<Var> {
        g.conv2d(x, b.var(self.kernel), b.var(self.bias), self.padding, self.stride)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(params: &mut Params, name: &str, dim: usize) -> Self {
        let gamma = params.add(format!("{name}.gamma"), Tensor::ones(vec![dim]).expect("dim > 0"));
        let beta = params.add(format!("{name}.beta"), zeros(&[dim]));
        LayerNorm { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, b: &Binding, x: Var) -> Result<Var> {
        g.layer_norm(x, b.var(self.gamma), b.var(self.beta), Self::EPS)
    }
}

/// Multi-head scaled dot-product attention with input and output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

/// Output of [`MultiHeadAttention::forward_with_weights`].
pub struct AttentionOutput {
    pub output: Var,
    /// One `[lq, lk]` row-stochastic matrix per head.
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(params: &mut Params, name: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "attention width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            query: Linear::new(params, &format!("{name}.q"), dim, dim, rng),
            key: Linear::new(params, &format!("{name}.k"), dim, dim, rng),
            value: Linear::new(params, &format!("{name}.v"), dim, dim, rng),
            output: Linear::new(params, &format!("{name}.o"), dim, dim, rng),
            heads,
            dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, b: &Binding, query: Var, key: Var, value: Var) -> Result<Var> {
        Ok(self.forward_with_weights(g, b, query, key, value)?.output)
    }

    /// `query[lq, d]`, `key[lk, d]`, `value[lk, d]` -> `[lq, d]`.
    pub fn forward_with_weights(
        &self,
        g: &mut Graph,
        b: &Binding,
        query: Var,
        key: Var,
        value: Var,
    ) -> Result<AttentionOutput> {
        attention_shapes(g, query, key, value, self.dim)?;
        let q = self.query.forward(g, b, query)?;
        let k = self.key.forward(g, b, key)?;
        let v = self.value.forward(g, b, value)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dh, dh)?,
                    g.slice_cols(k, h * dh, dh)?,
                    g.slice_cols(v, h * dh, dh)?,
                )
            };
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale);
            let p = g.softmax(scores);
            outs.push(g.matmul(p, vh)?);
            weights.push(p);
        }
        let merged = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        let output = self.output.forward(g, b, merged)?;
        Ok(AttentionOutput { output, weights })
    }
}

fn attention_shapes(g: &Graph, q: Var, k: Var, v: Var, dim: usize) -> Result<()> {
    let (qs, ks, vs) = (g.value(q).shape(), g.value(k).shape(), g.value(v).shape());
    let ok = qs.len() == 2 && ks.len() == 2 && vs.len() == 2 && qs[1] == dim && ks[1] == dim && vs[1] == dim && ks[0] == vs[0];
    if !ok {
        return Err(Error::shape(
            "attention",
            format!("query {qs:?}, key {ks:?}, value {vs:?} incompatible with width {dim}"),
        ));
    }
    Ok(())
}

/// Pre-norm transformer block: self-attention then a GELU feed-forward, each
/// wrapped in a residual connection.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attention: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

impl TransformerBlock {
    pub fn new<R: Rng + ?Sized>(
        params: &mut Params,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(TransformerBlock {
            norm1: LayerNorm::new(params, &format!("{name}.norm1"), dim),
            attention: MultiHeadAttention::new(params, &format!("{name}.attn"), dim, heads, rng)?,
            norm2: LayerNorm::new(params, &format!("{name}.norm2"), dim),
            ff_in: Linear::new(params, &format!("{name}.ff_in"), dim, hidden, rng),
            ff_out: Linear::new(params, &format!("{name}.ff_out"), hidden, dim, rng),
        })
    }

    pub fn forward(&self, g: &mut Graph, b: &Binding, x: Var) -> Result<Var> {
        let n = self.norm1.forward(g, b, x)?;
        let a = self.attention.forward(g, b, n, n, n)?;
        let h = g.add(x, a)?;
        let n = self.norm2.forward(g, b, h)?;
        let f = self.ff_in.forward(g, b, n)?;
        let f = g.gelu(f);
        let f = self.ff_out.forward(g, b, f)?;
        g.add(h, f)
    }
}
