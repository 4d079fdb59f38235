//! Ground-truth annotations, their canonical sentence rendering, a closed
//! vocabulary tokenizer and the small transformer text encoder.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{normal_init, Binding, LayerNorm, Linear, ParamId, Params, TransformerBlock};

pub const CLASSES: [&str; 10] = [
    "car",
    "truck",
    "bus",
    "trailer",
    "construction_vehicle",
    "pedestrian",
    "motorcycle",
    "bicycle",
    "traffic_cone",
    "barrier",
];

/// Camera views per sample.
pub const CAMERAS: usize = 6;
pub const MAX_TOKENS: usize = 128;
pub const EMBED_DIM: usize = 512;

const STRUCTURAL: [&str; 6] = ["scene", "with", "objects", "at", "size", "yaw"];
const PAD: &str = "<pad>";
const END: &str = "<end>";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectAnnotation {
    pub class: String,
    /// Metres on the ground plane for 3-D records, feature-grid cells for 2-D.
    pub center: [f64; 2],
    pub size: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub yaw: Option<f64>,
}

/// A 2-D record belongs to one camera view; a 3-D record has no camera and
/// every object carries a yaw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthRecord {
    pub sample: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera: Option<usize>,
    pub objects: Vec<ObjectAnnotation>,
}

impl GroundTruthRecord {
    pub fn is_3d(&self) -> bool {
        self.camera.is_none()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(c) = self.camera {
            if c >= CAMERAS {
                return Err(Error::InvalidArgument(format!("camera id {c} is not below {CAMERAS}")));
            }
        }
        for o in &self.objects {
            if !CLASSES.contains(&o.class.as_str()) {
                return Err(Error::UnknownClass(o.class.clone()));
            }
            if o.yaw.is_some() != self.is_3d() {
                return Err(Error::InvalidArgument(format!(
                    "sample {}: yaw must be present exactly on 3-D records",
                    self.sample
                )));
            }
            let finite = o.center.iter().chain(&o.size).chain(o.yaw.iter()).all(|v| v.is_finite());
            if !finite {
                return Err(Error::InvalidArgument(format!("sample {}: non-finite coordinate", self.sample)));
            }
        }
        Ok(())
    }
}

fn object_order(a: &ObjectAnnotation, b: &ObjectAnnotation) -> Ordering {
    a.class
        .cmp(&b.class)
        .then(a.center[0].total_cmp(&b.center[0]))
        .then(a.center[1].total_cmp(&b.center[1]))
        .then(a.size[0].total_cmp(&b.size[0]))
        .then(a.size[1].total_cmp(&b.size[1]))
        .then(a.yaw.unwrap_or(0.0).total_cmp(&b.yaw.unwrap_or(0.0)))
}

/// Canonical sentence for a record, e.g.
/// `scene with 1 objects. car at 1.00 2.00 size 4.50 1.80.`
pub fn render_template(rec: &GroundTruthRecord) -> Result<String> {
    rec.validate()?;
    let mut objects: Vec<&ObjectAnnotation> = rec.objects.iter().collect();
    objects.sort_by(|a, b| object_order(a, b));
    let mut s = format!("scene with {} objects.", objects.len());
    for o in objects {
        write!(
            s,
            " {} at {:.2} {:.2} size {:.2} {:.2}",
            o.class, o.center[0], o.center[1], o.size[0], o.size[1]
        )
        .expect("writing to a String");
        if let Some(yaw) = o.yaw {
            write!(s, " yaw {yaw:.2}").expect("writing to a String");
        }
        s.push('.');
    }
    Ok(s)
}

/// Line-per-token vocabulary with stable ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub const V1: &'static str = include_str!("../assets/vocab-v1.txt");

    /// The vocabulary shipped with the crate.
    pub fn v1() -> Self {
        Vocabulary::parse(Self::V1).expect("shipped vocabulary is well formed")
    }

    /// Regenerates the token list the shipped file was produced from.
    pub fn generate() -> Self {
        let mut tokens: Vec<String> = vec![PAD.into(), END.into()];
        tokens.extend((0..10).map(|d| d.to_string()));
        tokens.push(".".into());
        tokens.push("-".into());
        tokens.extend(STRUCTURAL.iter().map(|s| s.to_string()));
        tokens.extend(CLASSES.iter().map(|s| s.to_string()));
        Vocabulary::from_tokens(tokens).expect("generated tokens are unique")
    }

    pub fn parse(text: &str) -> Result<Self> {
        Vocabulary::from_tokens(text.lines().filter(|l| !l.is_empty()).map(String::from).collect())
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        if tokens.first().map(String::as_str) != Some(PAD) || !index.contains_key(END) {
            return Err(Error::InvalidArgument("vocabulary must start with <pad> and contain <end>".into()));
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn to_file_contents(&self) -> String {
        self.tokens.iter().map(|t| format!("{t}\n")).collect()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn pad_id(&self) -> usize {
        0
    }

    pub fn end_id(&self) -> usize {
        self.index[END]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedText {
    /// Exactly [`MAX_TOKENS`] ids, right-padded.
    pub ids: Vec<usize>,
    /// Number of ids before the padding.
    pub len: usize,
    pub vocab_size: usize,
}

impl TokenizedText {
    pub fn content(&self) -> &[usize] {
        &self.ids[..self.len]
    }
}

fn is_number_char(c: char) -> bool {
    c.is_ascii_digit() || c == '.' || c == '-'
}

fn push_word(vocab: &Vocabulary, word: &str, out: &mut Vec<usize>) -> Result<()> {
    if let Some(id) = vocab.id(word) {
        out.push(id);
        return Ok(());
    }
    if let Some(stem) = word.strip_suffix('.') {
        if !stem.is_empty() {
            push_word(vocab, stem, out)?;
            out.push(vocab.end_id());
            return Ok(());
        }
    }
    if word.chars().all(is_number_char) {
        for c in word.chars() {
            let mut buf = [0u8; 4];
            out.push(vocab.id(c.encode_utf8(&mut buf)).ok_or_else(|| Error::OutOfVocabulary { token: c.to_string() })?);
        }
        return Ok(());
    }
    Err(Error::OutOfVocabulary { token: word.to_string() })
}

/// Words map to single ids, numbers to one id per character, and a trailing
/// full stop to `<end>`. Longer inputs are truncated to [`MAX_TOKENS`].
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Result<TokenizedText> {
    let mut ids = Vec::new();
    for word in text.split_whitespace() {
        push_word(vocab, word, &mut ids)?;
    }
    if ids.len() > MAX_TOKENS {
        log::warn!("truncating {} tokens to {MAX_TOKENS}", ids.len());
        ids.truncate(MAX_TOKENS);
    }
    let len = ids.len();
    ids.resize(MAX_TOKENS, vocab.pad_id());
    Ok(TokenizedText {
        ids,
        len,
        vocab_size: vocab.len(),
    })
}

/// Inverse of [`tokenize`] on rendered templates.
pub fn detokenize(tokens: &TokenizedText, vocab: &Vocabulary) -> Result<String> {
    let mut units: Vec<String> = Vec::new();
    let mut number = String::new();
    let flush = |number: &mut String, units: &mut Vec<String>| {
        if !number.is_empty() {
            units.push(std::mem::take(number));
        }
    };
    for &id in tokens.content() {
        let tok = vocab
            .token(id)
            .ok_or_else(|| Error::InvalidArgument(format!("token id {id} outside vocabulary")))?;
        if id == vocab.pad_id() {
            continue;
        }
        if id == vocab.end_id() {
            flush(&mut number, &mut units);
            match units.last_mut() {
                Some(u) => u.push('.'),
                None => units.push(".".into()),
            }
        } else if tok.len() == 1 && tok.chars().all(is_number_char) {
            let complete = number.find('.').is_some_and(|p| number.len() - p > 2);
            if complete || (tok == "-" && !number.is_empty()) {
                flush(&mut number, &mut units);
            }
            number.push_str(tok);
        } else {
            flush(&mut number, &mut units);
            units.push(tok.to_string());
        }
    }
    flush(&mut number, &mut units);
    Ok(units.join(" "))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextEncoderConfig {
    pub width: usize,
    pub heads: usize,
    pub hidden: usize,
    pub layers: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        TextEncoderConfig {
            width: 64,
            heads: 4,
            hidden: 128,
            layers: 2,
        }
    }
}

/// Token and position embeddings, pre-norm transformer blocks, mean pooling
/// and a projection to [`EMBED_DIM`].
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
    pub projection: Linear,
    pub vocab_size: usize,
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(
        params: &mut Params,
        name: &str,
        vocab_size: usize,
        cfg: &TextEncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let token_embedding = params.add(format!("{name}.tok"), normal_init(&[vocab_size, cfg.width], 0.02, rng));
        let position_embedding = params.add(format!("{name}.pos"), normal_init(&[MAX_TOKENS, cfg.width], 0.02, rng));
        let blocks = (0..cfg.layers)
            .map(|l| TransformerBlock::new(params, &format!("{name}.block{l}"), cfg.width, cfg.heads, cfg.hidden, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(TextEncoder {
            token_embedding,
            position_embedding,
            blocks,
            norm: LayerNorm::new(params, &format!("{name}.norm"), cfg.width),
            projection: Linear::new(params, &format!("{name}.proj"), cfg.width, EMBED_DIM, rng),
            vocab_size,
        })
    }

    /// Encodes the unpadded prefix (a single pad token for empty text) to a
    /// `[512]` vector.
    pub fn encode(&self, g: &mut Graph, b: &Binding, tokens: &TokenizedText) -> Result<Var> {
        if let Some(&bad) = tokens.ids.iter().find(|&&id| id >= self.vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        let ids: Vec<usize> = if tokens.len == 0 { vec![tokens.ids[0]] } else { tokens.content().to_vec() };
        let positions: Vec<usize> = (0..ids.len()).collect();
        let tok = g.embedding(b.var(self.token_embedding), &ids)?;
        let pos = g.embedding(b.var(self.position_embedding), &positions)?;
        let mut x = g.add(tok, pos)?;
        for block in &self.blocks {
            x = block.forward(g, b, x)?;
        }
        let x = self.norm.forward(g, b, x)?;
        let pooled = g.mean_rows(x)?;
        self.projection.forward(g, b, pooled)
    }
}
