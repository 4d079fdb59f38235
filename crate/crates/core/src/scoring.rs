//! Model-level and feature-level scores and their fusion into quality labels.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archive::{FeatureKey, Module, RunArchive};
use crate::error::{Error, Result};
use crate::similarity::{cs_cossim, CsCosSimConfig};
use crate::synth::stream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SotaCell {
    pub config: usize,
    pub stage: usize,
    /// Another cell shares the maximum metric.
    pub tied: bool,
}

/// Arg-max of the metric grid, ties going to the lowest (config, stage).
pub fn select_sota(grid: &[Vec<f64>]) -> Result<SotaCell> {
    let mut best: Option<(usize, usize, f64)> = None;
    let mut tied = false;
    for (i, row) in grid.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if v.is_nan() {
                return Err(Error::InvalidArgument(format!("metric ({i}, {j}) is NaN")));
            }
            match best {
                Some((_, _, b)) if v < b => {}
                Some((_, _, b)) if v == b => tied = true,
                _ => {
                    best = Some((i, j, v));
                    tied = false;
                }
            }
        }
    }
    let (config, stage, _) = best.ok_or(Error::Empty("metric grid"))?;
    Ok(SotaCell { config, stage, tied })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreGrid {
    pub model_scores: Vec<Vec<f64>>,
    pub sota: SotaCell,
}

impl ScoreGrid {
    pub fn get(&self, config: usize, stage: usize) -> f64 {
        self.model_scores[config][stage]
    }
}

/// Every cell divided by the reference cell's metric; the reference scores 1.
pub fn macro_score(grid: &[Vec<f64>], sota: SotaCell) -> Result<ScoreGrid> {
    let reference = grid
        .get(sota.config)
        .and_then(|r| r.get(sota.stage))
        .copied()
        .ok_or_else(|| Error::InvalidArgument(format!("reference cell {sota:?} outside the grid")))?;
    if !(reference > 0.0) {
        return Err(Error::InvalidArgument(format!("reference metric must be positive, got {reference}")));
    }
    let model_scores = grid
        .iter()
        .enumerate()
        .map(|(i, row)| {
            row.iter()
                .enumerate()
                .map(|(j, &v)| if (i, j) == (sota.config, sota.stage) { 1.0 } else { v / reference })
                .collect()
        })
        .collect();
    Ok(ScoreGrid { model_scores, sota })
}

/// CS-CosSim of a feature map, averaged over views for stacked `[V, C, H, W]`
/// inputs.
pub fn feature_similarity(a: &Tensor, b: &Tensor, cfg: &CsCosSimConfig) -> Result<f64> {
    match a.rank() {
        3 => cs_cossim(a, b, cfg),
        4 => {
            if a.shape() != b.shape() {
                return Err(Error::shape("feature_similarity", format!("{:?} vs {:?}", a.shape(), b.shape())));
            }
            let views = a.shape()[0];
            let mut total = 0.0;
            for v in 0..views {
                total += cs_cossim(&a.index_axis0(v)?, &b.index_axis0(v)?, cfg)?;
            }
            Ok(total / views as f64)
        }
        _ => Err(Error::shape(
            "feature_similarity",
            format!("expected [C, H, W] or [V, C, H, W], got {:?}", a.shape()),
        )),
    }
}

/// Similarity of cell `(config, stage)`'s feature map to the reference cell's
/// map for the same sample.
pub fn micro_score(
    archive: &RunArchive,
    sota: SotaCell,
    key: FeatureKey,
    cfg: &CsCosSimConfig,
) -> Result<f64> {
    let reference = archive.feature(FeatureKey {
        config: sota.config,
        stage: sota.stage,
        ..key
    })?;
    feature_similarity(&archive.feature(key)?, &reference, cfg)
}

pub fn fuse_fmqs(score_model: f64, score_feature: f64, w: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::InvalidArgument(format!("fusion weight must lie in [0, 1], got {w}")));
    }
    if w == 1.0 {
        return Ok(score_model);
    }
    Ok(w * score_model + (1.0 - w) * score_feature)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FmqsLabel {
    pub config: usize,
    pub stage: usize,
    pub sample: usize,
    pub module: Module,
    pub score_model: f64,
    pub score_feature: f64,
    pub fmqs: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoringConfig {
    pub similarity: CsCosSimConfig,
    /// Weight of the model-level score in the fused label.
    pub w: f64,
    pub test_fraction: f64,
    pub split_seed: u64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            similarity: CsCosSimConfig::default(),
            w: 0.8,
            test_fraction: 0.2,
            split_seed: 0,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<()> {
        self.similarity.validate()?;
        if !(0.0..=1.0).contains(&self.w) {
            return Err(Error::InvalidArgument(format!("w must lie in [0, 1], got {}", self.w)));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::InvalidArgument(format!(
                "test_fraction must lie in [0, 1), got {}",
                self.test_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Seeded permutation of sample indices; the first `round(f * S)` go to test.
    pub fn by_sample(samples: usize, test_fraction: f64, seed: u64) -> Split {
        let mut order: Vec<usize> = (0..samples).collect();
        order.shuffle(&mut stream(seed, &[0x5317]));
        let n_test = ((samples as f64) * test_fraction).round() as usize;
        let n_test = n_test.min(samples.saturating_sub(1));
        let mut test = order[..n_test].to_vec();
        let mut train = order[n_test..].to_vec();
        test.sort_unstable();
        train.sort_unstable();
        Split { train, test }
    }

    pub fn is_test(&self, sample: usize) -> bool {
        self.test.binary_search(&sample).is_ok()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelDataset {
    pub labels: Vec<FmqsLabel>,
    pub split: Split,
    pub grid: ScoreGrid,
    pub config: ScoringConfig,
}

impl LabelDataset {
    pub fn module(&self, module: Module) -> impl Iterator<Item = &FmqsLabel> {
        self.labels.iter().filter(move |l| l.module == module)
    }

    pub fn train(&self, module: Module) -> Vec<FmqsLabel> {
        self.module(module).filter(|l| !self.split.is_test(l.sample)).cloned().collect()
    }

    pub fn test(&self, module: Module) -> Vec<FmqsLabel> {
        self.module(module).filter(|l| self.split.is_test(l.sample)).cloned().collect()
    }
}

/// One label per (config, stage, sample, module), ordered by sample, then
/// config, stage and module.
pub fn build_label_dataset(archive: &RunArchive, cfg: &ScoringConfig) -> Result<LabelDataset> {
    cfg.validate()?;
    archive.validate()?;
    let sota = select_sota(&archive.metric_grid)?;
    if sota.tied {
        log::warn!(
            "reference cell ({}, {}) shares the maximum metric with another cell",
            sota.config,
            sota.stage
        );
    }
    let grid = macro_score(&archive.metric_grid, sota)?;
    let incomplete = |e: Error| match e {
        Error::MissingFeature { .. } => Error::IncompleteArchive(e.to_string()),
        other => other,
    };
    let per_sample: Vec<Vec<FmqsLabel>> = (0..archive.samples)
        .into_par_iter()
        .map(|k| -> Result<Vec<FmqsLabel>> {
            let mut out = Vec::with_capacity(archive.configs.len() * archive.stages * 2);
            let refs = Module::ALL
                .iter()
                .map(|&module| {
                    archive.feature(FeatureKey {
                        config: sota.config,
                        stage: sota.stage,
                        sample: k,
                        module,
                    })
                })
                .collect::<Result<Vec<_>>>()
                .map_err(incomplete)?;
            for i in 0..archive.configs.len() {
                for j in 0..archive.stages {
                    for (m, &module) in Module::ALL.iter().enumerate() {
                        let key = FeatureKey { config: i, stage: j, sample: k, module };
                        let f = archive.feature(key).map_err(incomplete)?;
                        let score_feature = feature_similarity(&f, &refs[m], &cfg.similarity)?;
                        let score_model = grid.get(i, j);
                        out.push(FmqsLabel {
                            config: i,
                            stage: j,
                            sample: k,
                            module,
                            score_model,
                            score_feature,
                            fmqs: fuse_fmqs(score_model, score_feature, cfg.w)?,
                        });
                    }
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LabelDataset {
        labels: per_sample.into_iter().flatten().collect(),
        split: Split::by_sample(archive.samples, cfg.test_fraction, cfg.split_seed),
        grid,
        config: *cfg,
    })
}
