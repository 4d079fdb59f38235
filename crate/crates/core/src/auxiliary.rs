//! Frozen evaluators as auxiliary losses for a toy two-module perception
//! model.
//!
//! The toy model lifts raw camera tensors through a per-view image module
//! (toy IFEM) into a ground-plane module (toy BFEM) and predicts a coarse
//! occupancy grid from the latter. Each intermediate feature map has the
//! shape the matching frozen evaluator expects, so `1 - predicted FMQS` can
//! be added to the task loss.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archive::{FeatureShapes, Module};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::fmqe::{decode_checkpoint, encode_checkpoint, FmqeModel};
use crate::nn::{Binding, Conv2d, Linear, Params};
use crate::optim::{Adam, AdamConfig, CosineAnnealing};
use crate::synth::{generate_scene, reference_features, stream, stream_seed, SyntheticGenSpec, SCENE_EXTENT};
use crate::tensor::Tensor;

/// Loss weights of the downstream objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuxLossConfig {
    pub w_bev: f64,
    pub w_ifem: f64,
    pub w_bfem: f64,
    /// Evaluator parameters stay fixed; `false` is rejected.
    pub freeze: bool,
    /// Clamp predictions to `[0, 1]` before taking `1 - prediction`.
    pub clamp: bool,
}

impl Default for AuxLossConfig {
    fn default() -> Self {
        AuxLossConfig {
            w_bev: 1.0,
            w_ifem: 0.1,
            w_bfem: 0.1,
            freeze: true,
            clamp: false,
        }
    }
}

impl AuxLossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("w_bev", self.w_bev), ("w_ifem", self.w_ifem), ("w_bfem", self.w_bfem)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be a finite non-negative weight, got {w}")));
            }
        }
        if !self.freeze {
            return Err(Error::InvalidArgument("evaluator parameters must stay frozen during downstream training".into()));
        }
        if self.w_bev == 0.0 && self.w_ifem == 0.0 && self.w_bfem == 0.0 {
            log::warn!("all loss weights are zero; the downstream objective is degenerate");
        }
        Ok(())
    }

    pub fn with_aux(&self, w_ifem: f64, w_bfem: f64) -> Self {
        AuxLossConfig {
            w_ifem,
            w_bfem,
            ..self.clone()
        }
    }
}

/// An evaluator whose parameters only ever enter a graph as constants,
/// together with the checkpoint bytes it was created from.
pub struct FrozenEvaluator {
    model: FmqeModel,
    bytes: Vec<u8>,
    source: Option<PathBuf>,
}

impl FrozenEvaluator {
    pub fn new(model: FmqeModel) -> Result<Self> {
        let bytes = encode_checkpoint(&model)?;
        Ok(FrozenEvaluator {
            model,
            bytes,
            source: None,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let model = decode_checkpoint(&bytes, path)?;
        Ok(FrozenEvaluator {
            model,
            bytes,
            source: Some(path.to_path_buf()),
        })
    }

    pub fn model(&self) -> &FmqeModel {
        &self.model
    }

    pub fn module(&self) -> Module {
        self.model.module()
    }

    pub fn checkpoint_bytes(&self) -> &[u8] {
        &self.bytes
    }

    /// True when the in-memory parameters, and the source file if any, still
    /// encode to the bytes captured at load time.
    pub fn verify(&self) -> Result<bool> {
        if encode_checkpoint(&self.model)? != self.bytes {
            return Ok(false);
        }
        match &self.source {
            Some(p) => Ok(fs::read(p).map_err(|e| Error::io(p, e))? == self.bytes),
            None => Ok(true),
        }
    }

    /// Places the evaluator's parameters on `g` as constants.
    pub fn bind(&self, g: &mut Graph) -> Binding {
        self.model.params.bind(g, false)
    }

    /// Predicted FMQS of a detached feature map.
    pub fn predict(&self, features: &Tensor) -> Result<f64> {
        self.model.predict(features)
    }
}

/// `1 - FMQS(features)` from a frozen evaluator bound on `g`.
pub fn fmqs_aux_loss(
    g: &mut Graph,
    binding: &Binding,
    evaluator: &FrozenEvaluator,
    features: Var,
    module: Module,
    clamp: bool,
) -> Result<Var> {
    if evaluator.module() != module {
        return Err(Error::InvalidArgument(format!(
            "{} evaluator given {module} features",
            evaluator.module()
        )));
    }
    if binding.vars().iter().any(|&v| g.tracks_grad(v)) {
        return Err(Error::InvalidArgument("evaluator parameters are bound as trainable".into()));
    }
    let pred = evaluator.model.predict_var(g, binding, features)?;
    let pred = if clamp { g.clamp(pred, 0.0, 1.0) } else { pred };
    let pred = g.reshape(pred, [1])?;
    Ok(g.affine(pred, -1.0, 1.0))
}

/// `w_bev * task + w_ifem * aux_ifem + w_bfem * aux_bfem` on the graph.
/// Absent auxiliary terms contribute nothing.
pub fn total_loss(g: &mut Graph, task: Var, aux_ifem: Option<Var>, aux_bfem: Option<Var>, cfg: &AuxLossConfig) -> Result<Var> {
    cfg.validate()?;
    let mut total = g.scale(task, cfg.w_bev);
    for (term, w) in [(aux_ifem, cfg.w_ifem), (aux_bfem, cfg.w_bfem)] {
        if let Some(t) = term {
            let weighted = g.scale(t, w);
            total = g.add(total, weighted)?;
        }
    }
    Ok(total)
}

/// [`total_loss`] on plain numbers.
pub fn total_loss_value(task: f64, aux_ifem: f64, aux_bfem: f64, cfg: &AuxLossConfig) -> Result<f64> {
    cfg.validate()?;
    Ok(cfg.w_bev * task + cfg.w_ifem * aux_ifem + cfg.w_bfem * aux_bfem)
}

/// The synthetic downstream task: predict which cells of a coarse
/// ground-plane grid contain an object centre.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyTaskConfig {
    pub train_samples: usize,
    pub eval_samples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Channels of the raw camera and ground-plane inputs.
    pub raw_channels: usize,
    /// Standard deviation of the noise added to the raw inputs.
    pub raw_noise: f64,
    /// Side of the square occupancy grid; must divide the BFEM map.
    pub grid: usize,
}

impl Default for ToyTaskConfig {
    fn default() -> Self {
        ToyTaskConfig {
            train_samples: 48,
            eval_samples: 16,
            epochs: 10,
            batch_size: 8,
            lr: 1e-3,
            raw_channels: 4,
            raw_noise: 0.3,
            grid: 4,
        }
    }
}

impl ToyTaskConfig {
    pub fn validate(&self, shapes: &FeatureShapes) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.train_samples == 0 || self.eval_samples == 0 || self.epochs == 0 || self.batch_size == 0 {
            return bad("toy task sample counts, epochs and batch size must be positive".into());
        }
        if self.raw_channels == 0 {
            return bad("raw_channels must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("toy lr must be positive, got {}", self.lr));
        }
        if !(self.raw_noise >= 0.0 && self.raw_noise.is_finite()) {
            return bad(format!("raw_noise must be non-negative, got {}", self.raw_noise));
        }
        let [_, h, w] = shapes.bfem;
        if self.grid == 0 || h % self.grid != 0 || w % self.grid != 0 {
            return bad(format!("grid {} does not divide the {h}x{w} ground-plane map", self.grid));
        }
        Ok(())
    }
}

/// One scene of the toy task.
#[derive(Clone, Debug)]
pub struct ToySample {
    /// `[views, raw_channels, H, W]`.
    pub cameras: Tensor,
    /// `[raw_channels, H, W]`.
    pub ground: Tensor,
    /// Row-major `grid x grid` occupancy in `{0, 1}`.
    pub occupancy: Vec<f64>,
}

const TAG_TOY_SCENES: u64 = 0x70e1;
const TAG_TOY_NOISE: u64 = 0x70e2;
const TAG_TOY_INIT: u64 = 0x70e3;
const TAG_TOY_ORDER: u64 = 0x70e4;

/// Scenes for the toy task, drawn independently of any evaluator archive.
pub fn toy_dataset(task: &ToyTaskConfig, shapes: &FeatureShapes, seed: u64) -> Result<Vec<ToySample>> {
    task.validate(shapes)?;
    let [views, _, vh, vw] = shapes.ifem;
    let [_, bh, bw] = shapes.bfem;
    let raw = SyntheticGenSpec {
        seed: stream_seed(seed, &[TAG_TOY_SCENES]),
        shapes: FeatureShapes {
            ifem: [views, task.raw_channels, vh, vw],
            bfem: [task.raw_channels, bh, bw],
        },
        ..SyntheticGenSpec::default()
    };
    let n = task.train_samples + task.eval_samples;
    (0..n)
        .map(|k| {
            let ann = generate_scene(&raw, k);
            let (cam, ground) = reference_features(&raw, &ann);
            let mut rng = stream(seed, &[TAG_TOY_NOISE, k as u64]);
            let mut noisy = |t: Tensor| -> Result<Tensor> {
                let data = t
                    .data()
                    .iter()
                    .map(|&v| {
                        let n: f64 = StandardNormal.sample(&mut rng);
                        v + task.raw_noise * n
                    })
                    .collect();
                Tensor::new(t.shape().to_vec(), data)
            };
            let cameras = noisy(cam)?;
            let ground = noisy(ground)?;
            let mut occupancy = vec![0.0; task.grid * task.grid];
            let cell = SCENE_EXTENT / task.grid as f64;
            for o in &ann.bev.objects {
                let row = ((o.center[1] / cell) as usize).min(task.grid - 1);
                let col = ((o.center[0] / cell) as usize).min(task.grid - 1);
                occupancy[row * task.grid + col] = 1.0;
            }
            Ok(ToySample {
                cameras,
                ground,
                occupancy,
            })
        })
        .collect()
}

/// Intermediate features and task logits of one forward pass.
pub struct ToyForward {
    /// `[views, C, H, W]`, the tap for the IFEM evaluator.
    pub ifem: Var,
    /// `[C, H, W]`, the tap for the BFEM evaluator.
    pub bfem: Var,
    /// `[grid * grid]` occupancy logits.
    pub logits: Var,
}

/// Toy stand-in for a multi-camera detector with an image module, a
/// ground-plane module and an occupancy head.
#[derive(Clone, Debug)]
pub struct ToyPerceptionModel {
    pub params: Params,
    pub shapes: FeatureShapes,
    ifem: [Conv2d; 2],
    bfem: [Conv2d; 2],
    lift: Linear,
    head: Conv2d,
    grid: usize,
}

impl ToyPerceptionModel {
    pub fn new(shapes: &FeatureShapes, task: &ToyTaskConfig, seed: u64) -> Result<Self> {
        task.validate(shapes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, &[TAG_TOY_INIT]));
        let mut params = Params::new();
        let ci = shapes.ifem[1];
        let cb = shapes.bfem[0];
        let hidden = 16;
        let mut conv = |name: &str, cin, cout, k: usize| {
            Conv2d::new(&mut params, name, cin, cout, (k, k), (k / 2, k / 2), (1, 1), &mut rng)
        };
        let ifem = [conv("ifem.conv0", task.raw_channels, hidden, 3), conv("ifem.conv1", hidden, ci, 3)];
        let bfem = [conv("bfem.conv0", task.raw_channels, hidden, 3), conv("bfem.conv1", hidden, cb, 3)];
        let head = conv("head", cb, 1, 1);
        let lift = Linear::new(&mut params, "bfem.lift", ci, cb, &mut rng);
        Ok(ToyPerceptionModel {
            params,
            shapes: shapes.clone(),
            ifem,
            bfem,
            lift,
            head,
            grid: task.grid,
        })
    }

    pub fn forward(&self, g: &mut Graph, b: &Binding, sample: &ToySample) -> Result<ToyForward> {
        let cams = sample.cameras.shape().to_vec();
        let views = cams[0];
        let mut per_view = Vec::with_capacity(views);
        for v in 0..views {
            let x = g.constant(sample.cameras.index_axis0(v)?);
            let h = self.ifem[0].forward(g, b, x)?;
            let h = g.relu(h);
            per_view.push(self.ifem[1].forward(g, b, h)?);
        }
        let ifem = g.stack(&per_view)?;

        // Pool the image features over views and space, then broadcast the
        // projected summary onto the ground plane.
        let [_, ci, vh, vw] = self.shapes.ifem;
        let flat = g.reshape(ifem, [views, ci * vh * vw])?;
        let over_views = g.mean_rows(flat)?;
        let by_channel = g.reshape(over_views, [ci, vh * vw])?;
        let by_location = g.transpose(by_channel)?;
        let summary = g.mean_rows(by_location)?;
        let lifted = self.lift.forward(g, b, summary)?;

        let x = g.constant(sample.ground.clone());
        let h = self.bfem[0].forward(g, b, x)?;
        let h = g.relu(h);
        let local = self.bfem[1].forward(g, b, h)?;
        let bfem = g.add_channel(local, lifted)?;

        let act = g.relu(bfem);
        let [_, bh, bw] = self.shapes.bfem;
        let window = (bh / self.grid, bw / self.grid);
        let pooled = g.maxpool2d(act, window, window)?;
        let logits = self.head.forward(g, b, pooled)?;
        let logits = g.reshape(logits, [self.grid * self.grid])?;
        Ok(ToyForward { ifem, bfem, logits })
    }
}

/// Mean binary cross-entropy of logits against `{0, 1}` targets.
pub fn occupancy_loss(g: &mut Graph, logits: Var, targets: &[f64]) -> Result<Var> {
    let y = g.constant(Tensor::vector(targets.to_vec())?);
    let sp = g.softplus(logits);
    let yz = g.mul(y, logits)?;
    let l = g.sub(sp, yz)?;
    Ok(g.mean(l))
}

/// Mean of the per-class recalls; a class absent from `targets` is skipped.
pub fn balanced_accuracy(logits: &[f64], targets: &[f64]) -> f64 {
    let mut hit = [0usize; 2];
    let mut count = [0usize; 2];
    for (&z, &y) in logits.iter().zip(targets) {
        let class = (y > 0.5) as usize;
        count[class] += 1;
        if (z > 0.0) as usize == class {
            hit[class] += 1;
        }
    }
    let recalls: Vec<f64> = (0..2).filter(|&c| count[c] > 0).map(|c| hit[c] as f64 / count[c] as f64).collect();
    if recalls.is_empty() {
        0.0
    } else {
        recalls.iter().sum::<f64>() / recalls.len() as f64
    }
}

/// Whether the auxiliary terms are recorded on the tape at all.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AuxHooks {
    Attached,
    Detached,
}

/// Held-out state of the toy model after one epoch (epoch 0 is the
/// initialisation).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub config: String,
    pub seed: u64,
    pub epoch: usize,
    pub task_metric: f64,
    pub aux_ifem: f64,
    pub aux_bfem: f64,
}

pub struct Evaluators<'a> {
    pub ifem: &'a FrozenEvaluator,
    pub bfem: &'a FrozenEvaluator,
}

impl Evaluators<'_> {
    /// Feature shapes the toy model has to emit for these evaluators.
    pub fn shapes(&self) -> Result<FeatureShapes> {
        let shapes = FeatureShapes {
            ifem: self.ifem.model().spec.input_shape.clone().try_into().map_err(|s| {
                Error::shape("evaluators", format!("IFEM evaluator input {s:?} is not [V, C, H, W]"))
            })?,
            bfem: self.bfem.model().spec.input_shape.clone().try_into().map_err(|s| {
                Error::shape("evaluators", format!("BFEM evaluator input {s:?} is not [C, H, W]"))
            })?,
        };
        self.check(&shapes)?;
        Ok(shapes)
    }

    fn check(&self, shapes: &FeatureShapes) -> Result<()> {
        for (e, m) in [(self.ifem, Module::Ifem), (self.bfem, Module::Bfem)] {
            if e.module() != m {
                return Err(Error::InvalidArgument(format!("expected a {m} evaluator, got {}", e.module())));
            }
            if e.model().spec.input_shape != shapes.of(m) {
                return Err(Error::shape(
                    "evaluators",
                    format!("{m} evaluator expects {:?}, toy model emits {:?}", e.model().spec.input_shape, shapes.of(m)),
                ));
            }
        }
        Ok(())
    }
}

/// Trained toy model with its per-epoch held-out curve.
pub struct ToyRun {
    pub model: ToyPerceptionModel,
    pub curve: Vec<CurvePoint>,
}

fn evaluate(
    model: &ToyPerceptionModel,
    evaluators: &Evaluators<'_>,
    samples: &[ToySample],
) -> Result<(f64, f64, f64)> {
    let rows = samples
        .par_iter()
        .map(|s| -> Result<(Vec<f64>, f64, f64)> {
            let mut g = Graph::new();
            let b = model.params.bind(&mut g, false);
            let out = model.forward(&mut g, &b, s)?;
            let pi = evaluators.ifem.predict(g.value(out.ifem))?;
            let pb = evaluators.bfem.predict(g.value(out.bfem))?;
            Ok((g.value(out.logits).data().to_vec(), 1.0 - pi, 1.0 - pb))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = rows.len() as f64;
    let (mut logits, mut targets) = (Vec::new(), Vec::new());
    for (r, s) in rows.iter().zip(samples) {
        logits.extend_from_slice(&r.0);
        targets.extend_from_slice(&s.occupancy);
    }
    Ok((
        balanced_accuracy(&logits, &targets),
        rows.iter().map(|r| r.1).sum::<f64>() / n,
        rows.iter().map(|r| r.2).sum::<f64>() / n,
    ))
}

fn sample_gradients(
    model: &ToyPerceptionModel,
    evaluators: &Evaluators<'_>,
    sample: &ToySample,
    cfg: &AuxLossConfig,
    hooks: AuxHooks,
    scale: f64,
) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let b = model.params.bind(&mut g, true);
    let out = model.forward(&mut g, &b, sample)?;
    let task = occupancy_loss(&mut g, out.logits, &sample.occupancy)?;
    let (ai, ab) = match hooks {
        AuxHooks::Detached => (None, None),
        AuxHooks::Attached => {
            let fi = evaluators.ifem.bind(&mut g);
            let ai = fmqs_aux_loss(&mut g, &fi, evaluators.ifem, out.ifem, Module::Ifem, cfg.clamp)?;
            let fb = evaluators.bfem.bind(&mut g);
            let ab = fmqs_aux_loss(&mut g, &fb, evaluators.bfem, out.bfem, Module::Bfem, cfg.clamp)?;
            (Some(ai), Some(ab))
        }
    };
    let total = total_loss(&mut g, task, ai, ab, cfg)?;
    let total = g.scale(total, scale);
    let grads = g.backward(total)?;
    Ok(b.gradients(&grads, &model.params))
}

/// Trains the toy model on `samples[..train_samples]` and records the
/// held-out curve on the rest.
pub fn train_toy(
    evaluators: &Evaluators<'_>,
    samples: &[ToySample],
    task: &ToyTaskConfig,
    cfg: &AuxLossConfig,
    hooks: AuxHooks,
    seed: u64,
    label: &str,
) -> Result<ToyRun> {
    cfg.validate()?;
    let shapes = evaluators.shapes()?;
    if samples.len() != task.train_samples + task.eval_samples {
        return Err(Error::InvalidArgument(format!(
            "{} toy samples, config expects {}",
            samples.len(),
            task.train_samples + task.eval_samples
        )));
    }
    let (train, held_out) = samples.split_at(task.train_samples);
    let mut model = ToyPerceptionModel::new(&shapes, task, seed)?;
    let mut adam = Adam::new(&model.params, AdamConfig::default(), CosineAnnealing::new(task.lr, task.epochs));
    let mut curve = Vec::with_capacity(task.epochs + 1);
    let mut record = |model: &ToyPerceptionModel, epoch: usize| -> Result<()> {
        let (metric, ai, ab) = evaluate(model, evaluators, held_out)?;
        log::debug!("{label} seed {seed} epoch {epoch}: metric {metric:.4} aux {ai:.4} {ab:.4}");
        curve.push(CurvePoint {
            config: label.to_string(),
            seed,
            epoch,
            task_metric: metric,
            aux_ifem: ai,
            aux_bfem: ab,
        });
        Ok(())
    };
    record(&model, 0)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..task.epochs {
        order.shuffle(&mut stream(seed, &[TAG_TOY_ORDER, epoch as u64]));
        for (step, batch) in order.chunks(task.batch_size).enumerate() {
            let scale = 1.0 / batch.len() as f64;
            let per_sample = batch
                .par_iter()
                .map(|&i| sample_gradients(&model, evaluators, &train[i], cfg, hooks, scale))
                .collect::<Result<Vec<_>>>()?;
            let mut grads = per_sample.into_iter();
            let mut acc = grads.next().expect("non-empty batch");
            for gs in grads {
                for (a, g) in acc.iter_mut().zip(gs) {
                    a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
                }
            }
            if acc.iter().any(|t| t.data().iter().any(|v| !v.is_finite())) {
                return Err(Error::Diverged { epoch, step });
            }
            adam.step(&mut model.params, &acc, epoch)?;
        }
        record(&model, epoch + 1)?;
    }
    Ok(ToyRun { model, curve })
}

/// Spearman rank correlation with average ranks for ties; 0 when either
/// side has no spread.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape("spearman", format!("{} vs {} values", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::Empty("spearman needs two points"));
    }
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

pub const ARMS: [&str; 4] = ["baseline", "+IFEM", "+BFEM", "+both"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub config: String,
    pub w_bev: f64,
    pub w_ifem: f64,
    pub w_bfem: f64,
    /// Final held-out task metric per seed, in seed order.
    pub final_task_metric: Vec<f64>,
    pub mean_task_metric: f64,
    pub delta_vs_baseline: f64,
    pub delta_percent: f64,
}

/// Trend of the mean predicted FMQS (average of both evaluators) over the
/// epochs of the `+both` arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FmqsTrend {
    pub seed: u64,
    pub first: f64,
    pub last: f64,
    pub spearman: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub arms: Vec<ArmSummary>,
    pub fmqs_trend: Vec<FmqsTrend>,
    pub checkpoints_unchanged: bool,
    pub curves: Vec<CurvePoint>,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("config,seed,epoch,task_metric,aux_ifem,aux_bfem\n");
        for p in &self.curves {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                p.config, p.seed, p.epoch, p.task_metric, p.aux_ifem, p.aux_bfem
            ));
        }
        out
    }
}

/// Trains the toy model under each arm with identical data and seeds. The
/// baseline keeps the hooks detached; the other arms switch on one or both
/// auxiliary weights from `cfg`.
pub fn run_ablation(
    evaluators: &Evaluators<'_>,
    task: &ToyTaskConfig,
    cfg: &AuxLossConfig,
    seeds: &[u64],
) -> Result<AblationReport> {
    cfg.validate()?;
    if seeds.is_empty() {
        return Err(Error::Empty("ablation seeds"));
    }
    let arm_cfgs = [
        (cfg.with_aux(0.0, 0.0), AuxHooks::Detached),
        (cfg.with_aux(cfg.w_ifem, 0.0), AuxHooks::Attached),
        (cfg.with_aux(0.0, cfg.w_bfem), AuxHooks::Attached),
        (cfg.with_aux(cfg.w_ifem, cfg.w_bfem), AuxHooks::Attached),
    ];
    let shapes = evaluators.shapes()?;
    let mut curves = Vec::new();
    let mut finals = vec![Vec::with_capacity(seeds.len()); ARMS.len()];
    let mut fmqs_trend = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let data = toy_dataset(task, &shapes, seed)?;
        for (a, (arm_cfg, hooks)) in arm_cfgs.iter().enumerate() {
            let run = train_toy(evaluators, &data, task, arm_cfg, *hooks, seed, ARMS[a])?;
            let last = run.curve.last().expect("curve has the initial point");
            finals[a].push(last.task_metric);
            log::info!("{} seed {seed}: final task metric {:.4}", ARMS[a], last.task_metric);
            if ARMS[a] == "+both" {
                let epochs: Vec<f64> = run.curve.iter().map(|p| p.epoch as f64).collect();
                let fmqs: Vec<f64> = run.curve.iter().map(|p| 1.0 - 0.5 * (p.aux_ifem + p.aux_bfem)).collect();
                fmqs_trend.push(FmqsTrend {
                    seed,
                    first: fmqs[0],
                    last: *fmqs.last().expect("non-empty"),
                    spearman: spearman(&epochs, &fmqs)?,
                });
            }
            curves.extend(run.curve);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let base = mean(&finals[0]);
    let arms = arm_cfgs
        .iter()
        .zip(finals)
        .zip(ARMS)
        .map(|(((c, _), f), name)| {
            let m = mean(&f);
            let delta = if name == "baseline" { 0.0 } else { m - base };
            ArmSummary {
                config: name.to_string(),
                w_bev: c.w_bev,
                w_ifem: c.w_ifem,
                w_bfem: c.w_bfem,
                final_task_metric: f,
                mean_task_metric: m,
                delta_vs_baseline: delta,
                delta_percent: if base != 0.0 { 100.0 * delta / base } else { 0.0 },
            }
        })
        .collect();
    let checkpoints_unchanged = evaluators.ifem.verify()? && evaluators.bfem.verify()?;
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        epochs: task.epochs,
        arms,
        fmqs_trend,
        checkpoints_unchanged,
        curves,
    })
}
