use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::contrastive_loss;
use super::metrics::RegressionReport;
use super::{FmqeModel, HeadConfig, ModelSpec};
use crate::archive::{FeatureKey, Module, RunArchive};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::Binding;
use crate::optim::{Adam, AdamConfig, CosineAnnealing};
use crate::scoring::FmqsLabel;
use crate::synth::stream;
use crate::tensor::Tensor;
use crate::text::{render_template, tokenize, TextEncoderConfig, TokenizedText, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRunConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub tau_init: f64,
    /// Weight of the contrastive term; the regression term gets `1 - mix`.
    pub mix: f64,
    pub seed: u64,
    /// Fraction of training samples held back for checkpoint selection.
    pub val_fraction: f64,
    /// Most distinct samples entering the contrastive term of one batch.
    pub contrastive_samples: usize,
    /// Batch items recorded per tape; bounds memory, not the result.
    pub chunk_size: usize,
    pub head: HeadConfig,
    pub text: TextEncoderConfig,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig {
            epochs: 20,
            batch_size: 64,
            lr: 1e-4,
            tau_init: 0.07,
            mix: 0.5,
            seed: 0,
            val_fraction: 0.1,
            contrastive_samples: 16,
            chunk_size: 16,
            head: HeadConfig::default(),
            text: TextEncoderConfig::default(),
        }
    }
}

impl TrainRunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.epochs == 0 || self.batch_size == 0 || self.chunk_size == 0 || self.contrastive_samples == 0 {
            return bad("epochs, batch_size, chunk_size and contrastive_samples must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.tau_init > 0.0 && self.tau_init.is_finite()) {
            return bad(format!("tau_init must be positive, got {}", self.tau_init));
        }
        if !(0.0..=1.0).contains(&self.mix) {
            return bad(format!("mix must lie in [0, 1], got {}", self.mix));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction must lie in [0, 1), got {}", self.val_fraction));
        }
        Ok(())
    }
}

/// Labels of one module together with the archive that holds their feature
/// maps and the tokenized ground-truth text of every referenced sample.
pub struct TrainingData<'a> {
    pub archive: &'a RunArchive,
    pub module: Module,
    pub labels: Vec<FmqsLabel>,
    /// Per sample: six per-camera texts for IFEM, one ground-plane text for BFEM.
    texts: HashMap<usize, Vec<TokenizedText>>,
    rendered: HashMap<usize, Vec<String>>,
}

impl<'a> TrainingData<'a> {
    pub fn new(archive: &'a RunArchive, module: Module, labels: Vec<FmqsLabel>, vocab: &Vocabulary) -> Result<Self> {
        if let Some(l) = labels.iter().find(|l| l.module != module) {
            return Err(Error::InvalidArgument(format!("{} label in a {module} dataset", l.module)));
        }
        let mut texts = HashMap::new();
        let mut rendered = HashMap::new();
        for l in &labels {
            if texts.contains_key(&l.sample) {
                continue;
            }
            let ann = archive
                .annotations
                .get(l.sample)
                .ok_or_else(|| Error::IncompleteArchive(format!("no annotations for sample {}", l.sample)))?;
            let strings = match module {
                Module::Ifem => ann.views.iter().map(render_template).collect::<Result<Vec<_>>>()?,
                Module::Bfem => vec![render_template(&ann.bev)?],
            };
            let toks = strings.iter().map(|s| tokenize(s, vocab)).collect::<Result<Vec<_>>>()?;
            texts.insert(l.sample, toks);
            rendered.insert(l.sample, strings);
        }
        Ok(TrainingData {
            archive,
            module,
            labels,
            texts,
            rendered,
        })
    }

    pub fn texts(&self, sample: usize) -> &[TokenizedText] {
        &self.texts[&sample]
    }

    pub fn features(&self, label: &FmqsLabel) -> Result<Tensor> {
        self.archive.feature(FeatureKey {
            config: label.config,
            stage: label.stage,
            sample: label.sample,
            module: self.module,
        })
    }

    fn subset(&self, labels: Vec<FmqsLabel>) -> TrainingData<'a> {
        TrainingData {
            archive: self.archive,
            module: self.module,
            labels,
            texts: self.texts.clone(),
            rendered: self.rendered.clone(),
        }
    }
}

/// One element of a batch.
pub struct BatchItem<'t> {
    pub features: Tensor,
    pub label: f64,
    pub texts: &'t [TokenizedText],
}

struct Objective {
    total: Var,
    contrastive: f64,
    squared_error: f64,
}

/// `mix * L_cont + (1 - mix) * sum((pred - y)^2) / denom`, with the
/// contrastive term over `items` only when `contrastive` is set.
fn objective<'t>(
    g: &mut Graph,
    b: &Binding,
    model: &FmqeModel,
    items: &[BatchItem<'t>],
    contrastive: bool,
    mix: f64,
    denom: usize,
) -> Result<Objective> {
    let mut sq_sum: Option<Var> = None;
    let mut pooled = Vec::with_capacity(items.len());
    let mut per_view = Vec::with_capacity(items.len());
    for item in items {
        let x = g.constant(item.features.clone());
        let (v, views) = model.embed(g, b, x)?;
        let pred = model.head.forward(g, b, v)?;
        let y = g.constant(Tensor::scalar(item.label));
        let d = g.sub(pred, y)?;
        let sq = g.mul(d, d)?;
        sq_sum = Some(match sq_sum {
            Some(acc) => g.add(acc, sq)?,
            None => sq,
        });
        pooled.push(v);
        per_view.push(views);
    }
    let sq_sum = sq_sum.ok_or(Error::Empty("batch"))?;
    let squared_error = g.value(sq_sum).data()[0];
    let reg = g.scale(sq_sum, (1.0 - mix) / denom as f64);
    if !contrastive {
        return Ok(Objective {
            total: reg,
            contrastive: 0.0,
            squared_error,
        });
    }
    let tau = model.tau_var(g, b);
    // Identical token sequences (empty camera views above all) share one
    // encoding on the tape.
    let mut encoded: HashMap<&[usize], Var> = HashMap::new();
    let mut encode = |g: &mut Graph, t: &'t TokenizedText| -> Result<Var> {
        if let Some(&v) = encoded.get(t.content()) {
            return Ok(v);
        }
        let v = model.encode_text(g, b, t)?;
        encoded.insert(t.content(), v);
        Ok(v)
    };
    let cont = match model.module() {
        Module::Bfem => {
            let img = g.stack(&pooled)?;
            let txt = items
                .iter()
                .map(|it| encode(g, &it.texts[0]))
                .collect::<Result<Vec<_>>>()?;
            let txt = g.stack(&txt)?;
            contrastive_loss(g, img, txt, tau)?
        }
        Module::Ifem => {
            let views = g.value(per_view[0].expect("IFEM embeds per view")).shape()[0];
            let mut acc: Option<Var> = None;
            for c in 0..views {
                let mut img = Vec::with_capacity(items.len());
                let mut txt = Vec::with_capacity(items.len());
                for (it, pv) in items.iter().zip(&per_view) {
                    let row = g.select_rows(pv.expect("IFEM embeds per view"), &[c])?;
                    img.push(g.reshape(row, [super::EMBED_DIM])?);
                    txt.push(encode(g, &it.texts[c])?);
                }
                let img = g.stack(&img)?;
                let txt = g.stack(&txt)?;
                let l = contrastive_loss(g, img, txt, tau)?;
                acc = Some(match acc {
                    Some(a) => g.add(a, l)?,
                    None => l,
                });
            }
            let sum = acc.expect("at least one view");
            g.scale(sum, 1.0 / views as f64)
        }
    };
    let contrastive = g.value(cont).data()[0];
    let weighted = g.scale(cont, mix);
    Ok(Objective {
        total: g.add(weighted, reg)?,
        contrastive,
        squared_error,
    })
}

/// The joint training objective over one batch, recorded on a single tape:
/// `mix * L_cont + (1 - mix) * MSE`.
pub fn combined_loss(g: &mut Graph, b: &Binding, model: &FmqeModel, items: &[BatchItem<'_>], mix: f64) -> Result<Var> {
    Ok(objective(g, b, model, items, true, mix, items.len())?.total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_cont: f64,
    pub train_reg: f64,
    pub val_mse: f64,
}

pub struct TrainedModel {
    /// Parameters from the epoch with the lowest validation MSE.
    pub model: FmqeModel,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

fn split_validation(labels: &[FmqsLabel], fraction: f64, seed: u64) -> (Vec<FmqsLabel>, Vec<FmqsLabel>) {
    let mut samples: Vec<usize> = labels.iter().map(|l| l.sample).collect();
    samples.sort_unstable();
    samples.dedup();
    samples.shuffle(&mut stream(seed, &[0x7a1]));
    let n_val = ((samples.len() as f64 * fraction).round() as usize).min(samples.len() - 1);
    let val: Vec<usize> = samples[..n_val].to_vec();
    labels.iter().cloned().partition(|l| !val.contains(&l.sample))
}

fn add_into(acc: &mut [Tensor], grads: Vec<Tensor>) {
    for (a, g) in acc.iter_mut().zip(grads) {
        a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
    }
}

/// Gradient of the batch objective, accumulated over tapes of at most
/// `chunk_size` items. The first tape carries the contrastive term over the
/// first occurrence of up to `contrastive_samples` distinct samples.
fn batch_gradients(
    model: &FmqeModel,
    data: &TrainingData<'_>,
    batch: &[usize],
    cfg: &TrainRunConfig,
) -> Result<(Vec<Tensor>, f64, f64)> {
    let mut seen = Vec::new();
    let mut reps = Vec::new();
    let mut rest = Vec::new();
    for &idx in batch {
        let s = data.labels[idx].sample;
        if reps.len() < cfg.contrastive_samples && !seen.contains(&s) {
            seen.push(s);
            reps.push(idx);
        } else {
            rest.push(idx);
        }
    }
    let items = |ids: &[usize]| -> Result<Vec<BatchItem<'_>>> {
        ids.iter()
            .map(|&i| {
                let l = &data.labels[i];
                Ok(BatchItem {
                    features: data.features(l)?,
                    label: l.fmqs,
                    texts: data.texts(l.sample),
                })
            })
            .collect()
    };
    let mut grads: Vec<Tensor> = model
        .params
        .tensors()
        .iter()
        .map(|t| Tensor::zeros(t.shape().to_vec()).expect("parameter shapes are positive"))
        .collect();
    let mut tapes: Vec<(&[usize], bool)> = vec![(&reps, true)];
    tapes.extend(rest.chunks(cfg.chunk_size).map(|c| (c, false)));
    // Tapes are independent; their gradients are summed in tape order so the
    // result does not depend on scheduling.
    let per_tape = tapes
        .par_iter()
        .map(|&(ids, with_cont)| -> Result<(Vec<Tensor>, f64, f64)> {
            let mut g = Graph::new();
            let b = model.params.bind(&mut g, true);
            let obj = objective(&mut g, &b, model, &items(ids)?, with_cont, cfg.mix, batch.len())?;
            let gr = g.backward(obj.total)?;
            Ok((b.gradients(&gr, &model.params), obj.contrastive, obj.squared_error))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut cont = 0.0;
    let mut sq = 0.0;
    for (i, (gr, c, s)) in per_tape.into_iter().enumerate() {
        if i == 0 {
            cont = c;
        }
        sq += s;
        add_into(&mut grads, gr);
    }
    Ok((grads, cont, sq / batch.len() as f64))
}

fn predictions(model: &FmqeModel, data: &TrainingData<'_>) -> Result<Vec<f64>> {
    data.labels
        .par_iter()
        .map(|l| model.predict(&data.features(l)?))
        .collect()
}

fn mse(model: &FmqeModel, data: &TrainingData<'_>) -> Result<f64> {
    let preds = predictions(model, data)?;
    let n = preds.len() as f64;
    Ok(preds.iter().zip(&data.labels).map(|(p, l)| (p - l.fmqs).powi(2)).sum::<f64>() / n)
}

/// Trains one evaluator variant with Adam under a cosine schedule and keeps
/// the parameters with the best validation MSE.
pub fn train_fmqe(data: &TrainingData<'_>, cfg: &TrainRunConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    if data.labels.is_empty() {
        return Err(Error::Empty("training labels"));
    }
    let (fit, val) = split_validation(&data.labels, cfg.val_fraction, cfg.seed);
    let fit = data.subset(fit);
    let val = if val.is_empty() { None } else { Some(data.subset(val)) };

    let input_shape = data.archive.shapes.of(data.module);
    let mut spec = ModelSpec::new(data.module, input_shape, Vocabulary::v1().len());
    spec.head = cfg.head;
    spec.text = cfg.text;
    let mut model = FmqeModel::new(spec, cfg.tau_init, cfg.seed)?;
    // Start the scalar output at the label mean so the small learning rate is
    // spent on structure rather than on the offset.
    let mean = fit.labels.iter().map(|l| l.fmqs).sum::<f64>() / fit.labels.len() as f64;
    model.params.set(model.head.output.bias, Tensor::scalar(mean))?;

    let mut adam = Adam::new(&model.params, AdamConfig::default(), CosineAnnealing::new(cfg.lr, cfg.epochs));
    let mut order: Vec<usize> = (0..fit.labels.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, crate::nn::Params)> = None;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut stream(cfg.seed, &[0xe90c, epoch as u64]));
        let (mut cont_sum, mut reg_sum, mut steps) = (0.0, 0.0, 0usize);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (grads, cont, reg) = batch_gradients(&model, &fit, batch, cfg)?;
            let finite = cont.is_finite() && reg.is_finite() && grads.iter().all(|g| g.data().iter().all(|v| v.is_finite()));
            if !finite {
                return Err(Error::Diverged { epoch, step });
            }
            adam.step(&mut model.params, &grads, epoch)?;
            cont_sum += cont;
            reg_sum += reg;
            steps += 1;
        }
        let val_mse = mse(&model, val.as_ref().unwrap_or(&fit))?;
        if !val_mse.is_finite() {
            return Err(Error::Diverged { epoch, step: steps });
        }
        let entry = EpochLog {
            epoch,
            lr: adam.schedule.lr(epoch),
            train_cont: cont_sum / steps as f64,
            train_reg: reg_sum / steps as f64,
            val_mse,
        };
        log::info!(
            "{} epoch {epoch}: lr {:.3e} cont {:.4} reg {:.5} val {:.5}",
            data.module,
            entry.lr,
            entry.train_cont,
            entry.train_reg,
            entry.val_mse
        );
        log.push(entry);
        if best.as_ref().is_none_or(|(b, _, _)| val_mse < *b) {
            best = Some((val_mse, epoch, model.params.clone()));
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    model.params = params;
    Ok(TrainedModel {
        model,
        best_epoch,
        log,
    })
}

/// Regression metrics of `model` on every label of `data`.
pub fn evaluate_regression(model: &FmqeModel, data: &TrainingData<'_>) -> Result<RegressionReport> {
    if data.labels.is_empty() {
        return Err(Error::Empty("evaluation labels"));
    }
    if model.module() != data.module {
        return Err(Error::InvalidArgument(format!(
            "{} evaluator applied to {} labels",
            model.module(),
            data.module
        )));
    }
    let preds = predictions(model, data)?;
    let rows: Vec<(usize, f64, f64)> = data.labels.iter().zip(preds).map(|(l, p)| (l.config, p, l.fmqs)).collect();
    RegressionReport::from_rows(data.module, &rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub matched: f64,
    pub mismatched: f64,
    pub gap: f64,
    pub pairs_matched: usize,
    pub pairs_mismatched: usize,
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean cosine between each feature map's embedding and its own sample's text
/// against texts of other samples. Pairs whose rendered texts coincide are not
/// counted as mismatched. IFEM compares view by view with camera texts.
pub fn alignment_gap(model: &FmqeModel, data: &TrainingData<'_>) -> Result<AlignmentReport> {
    let samples: Vec<usize> = data
        .labels
        .iter()
        .map(|l| l.sample)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let text_vecs: BTreeMap<usize, Vec<Vec<f64>>> = samples
        .par_iter()
        .map(|&s| -> Result<(usize, Vec<Vec<f64>>)> {
            let vecs = data
                .texts(s)
                .iter()
                .map(|t| {
                    let mut g = Graph::new();
                    let b = model.params.bind(&mut g, false);
                    let v = model.encode_text(&mut g, &b, t)?;
                    Ok(unit(g.value(v).data()))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((s, vecs))
        })
        .collect::<Result<_>>()?;
    let rows = data
        .labels
        .par_iter()
        .map(|l| -> Result<(f64, usize, f64, usize)> {
            let mut g = Graph::new();
            let b = model.params.bind(&mut g, false);
            let x = g.constant(data.features(l)?);
            let (pooled, views) = model.embed(&mut g, &b, x)?;
            let embed = g.value(views.unwrap_or(pooled)).clone();
            let dim = super::EMBED_DIM;
            let (mut m, mut nm, mut mm, mut nmm) = (0.0, 0, 0.0, 0);
            for (c, row) in embed.data().chunks(dim).enumerate() {
                let img = unit(row);
                let own = &data.rendered[&l.sample][c];
                m += dot(&img, &text_vecs[&l.sample][c]);
                nm += 1;
                for &s in &samples {
                    if s != l.sample && data.rendered[&s][c] != *own {
                        mm += dot(&img, &text_vecs[&s][c]);
                        nmm += 1;
                    }
                }
            }
            Ok((m, nm, mm, nmm))
        })
        .collect::<Result<Vec<_>>>()?;
    let (m, nm, mm, nmm) = rows
        .into_iter()
        .fold((0.0, 0, 0.0, 0), |a, r| (a.0 + r.0, a.1 + r.1, a.2 + r.2, a.3 + r.3));
    let matched = if nm > 0 { m / nm as f64 } else { 0.0 };
    let mismatched = if nmm > 0 { mm / nmm as f64 } else { 0.0 };
    Ok(AlignmentReport {
        matched,
        mismatched,
        gap: matched - mismatched,
        pairs_matched: nm,
        pairs_mismatched: nmm,
    })
}
