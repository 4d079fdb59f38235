//! The command-line stages as library calls: generate, score, train, eval
//! and the downstream demo. Every stage reads its inputs from and writes its
//! outputs to the locations named in [`PathsConfig`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::archive::{Module, RunArchive};
use crate::auxiliary::{run_ablation, AblationReport, Evaluators, FrozenEvaluator};
use crate::config::{PathsConfig, PipelineConfig};
use crate::error::{Error, Result};
use crate::fmqe::{
    alignment_gap, evaluate_regression, load_checkpoint, save_checkpoint, train_fmqe, AlignmentReport, EpochLog,
    RegressionReport, TrainingData,
};
use crate::io;
use crate::scoring::{build_label_dataset, FmqsLabel, ScoreGrid, ScoringConfig, Split};
use crate::synth::generate_synthetic_archive;
use crate::text::Vocabulary;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchiveSummary {
    pub configs: usize,
    pub stages: usize,
    pub samples: usize,
    pub ifem_shape: Vec<usize>,
    pub bfem_shape: Vec<usize>,
    pub feature_files: usize,
    pub dir: PathBuf,
}

impl ArchiveSummary {
    fn of(archive: &RunArchive, files: usize, dir: &Path) -> Self {
        ArchiveSummary {
            configs: archive.configs.len(),
            stages: archive.stages,
            samples: archive.samples,
            ifem_shape: archive.shapes.of(Module::Ifem),
            bfem_shape: archive.shapes.of(Module::Bfem),
            feature_files: files,
            dir: dir.to_path_buf(),
        }
    }
}

/// Generates the synthetic archive described by `cfg.generator`.
pub fn generate(cfg: &PipelineConfig, paths: &PathsConfig) -> Result<ArchiveSummary> {
    let archive = generate_synthetic_archive(&cfg.generator)?;
    let manifest = archive.save(&paths.archive, cfg.storage)?;
    Ok(ArchiveSummary::of(&archive, manifest.features.len(), &paths.archive))
}

/// Scoring output next to the label file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreReport {
    pub schema_version: u32,
    pub alpha: f64,
    pub w: f64,
    pub sota_config: String,
    /// One-based stage number of the reference cell.
    pub sota_stage: usize,
    pub sota_tied: bool,
    pub grid: ScoreGrid,
    pub split: Split,
    pub scoring: ScoringConfig,
    pub labels: usize,
}

pub const LABELS_FILE: &str = "labels.jsonl";
pub const SCORE_REPORT_FILE: &str = "score.json";

/// Scores every feature map of the archive and writes labels plus the
/// score report.
pub fn score(cfg: &PipelineConfig, paths: &PathsConfig) -> Result<ScoreReport> {
    let archive = RunArchive::open(&paths.archive)?;
    archive.check_complete()?;
    let ds = build_label_dataset(&archive, &cfg.scoring)?;
    let sota = ds.grid.sota;
    let report = ScoreReport {
        schema_version: REPORT_SCHEMA_VERSION,
        alpha: cfg.scoring.similarity.alpha,
        w: cfg.scoring.w,
        sota_config: archive.configs[sota.config].clone(),
        sota_stage: sota.stage + 1,
        sota_tied: sota.tied,
        grid: ds.grid.clone(),
        split: ds.split.clone(),
        scoring: cfg.scoring,
        labels: ds.labels.len(),
    };
    io::write_json_lines(&paths.labels.join(LABELS_FILE), &ds.labels)?;
    io::write_json(&paths.labels.join(SCORE_REPORT_FILE), &report)?;
    Ok(report)
}

fn load_labels(paths: &PathsConfig) -> Result<(Vec<FmqsLabel>, ScoreReport)> {
    let labels = io::read_json_lines(&paths.labels.join(LABELS_FILE))?;
    let report = io::read_json(&paths.labels.join(SCORE_REPORT_FILE))?;
    Ok((labels, report))
}

fn select(labels: &[FmqsLabel], split: &Split, module: Module, test: bool) -> Vec<FmqsLabel> {
    labels
        .iter()
        .filter(|l| l.module == module && split.is_test(l.sample) == test)
        .cloned()
        .collect()
}

pub fn checkpoint_path(paths: &PathsConfig, module: Module) -> PathBuf {
    paths.checkpoints.join(format!("{}.fmqe", module.name().to_ascii_lowercase()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSummary {
    pub module: Module,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub checkpoint: PathBuf,
}

/// Trains both evaluator variants on the training split; writes one
/// checkpoint and one JSON-lines epoch log per variant.
pub fn train(cfg: &PipelineConfig, paths: &PathsConfig) -> Result<Vec<TrainSummary>> {
    let archive = RunArchive::open(&paths.archive)?;
    let (labels, report) = load_labels(paths)?;
    let vocab = Vocabulary::v1();
    Module::ALL
        .iter()
        .map(|&module| {
            let data = TrainingData::new(&archive, module, select(&labels, &report.split, module, false), &vocab)?;
            let trained = train_fmqe(&data, &cfg.training)?;
            let path = checkpoint_path(paths, module);
            save_checkpoint(&path, &trained.model)?;
            let log_path = paths.reports.join(format!("train_{}.jsonl", module.name().to_ascii_lowercase()));
            io::write_json_lines(&log_path, &trained.log)?;
            Ok(TrainSummary {
                module,
                best_epoch: trained.best_epoch,
                best_val_mse: trained.log[trained.best_epoch].val_mse,
                checkpoint: path,
            })
        })
        .collect()
}

pub fn read_training_log(paths: &PathsConfig, module: Module) -> Result<Vec<EpochLog>> {
    io::read_json_lines(&paths.reports.join(format!("train_{}.jsonl", module.name().to_ascii_lowercase())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub schema_version: u32,
    /// `checkpoint` or `label-oracle`.
    pub predictor: String,
    pub regression: RegressionReport,
    pub alignment: Option<AlignmentReport>,
}

/// How `eval` obtains predictions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Predictor {
    Checkpoint,
    /// Predicts each label exactly; checks the report path end to end.
    LabelOracle,
}

pub fn eval_report_path(paths: &PathsConfig, module: Module) -> PathBuf {
    paths.reports.join(format!("eval_{}.json", module.name().to_ascii_lowercase()))
}

/// Evaluates both variants on the held-out split.
pub fn eval(paths: &PathsConfig, predictor: Predictor) -> Result<Vec<EvalReport>> {
    let (labels, report) = load_labels(paths)?;
    let archive = match predictor {
        Predictor::Checkpoint => Some(RunArchive::open(&paths.archive)?),
        Predictor::LabelOracle => None,
    };
    let vocab = Vocabulary::v1();
    Module::ALL
        .iter()
        .map(|&module| {
            let test = select(&labels, &report.split, module, true);
            if test.is_empty() {
                return Err(Error::Empty("held-out labels"));
            }
            let out = match &archive {
                Some(archive) => {
                    let model = load_checkpoint(&checkpoint_path(paths, module))?;
                    let data = TrainingData::new(archive, module, test, &vocab)?;
                    EvalReport {
                        schema_version: REPORT_SCHEMA_VERSION,
                        predictor: "checkpoint".into(),
                        regression: evaluate_regression(&model, &data)?,
                        alignment: Some(alignment_gap(&model, &data)?),
                    }
                }
                None => {
                    let rows: Vec<(usize, f64, f64)> = test.iter().map(|l| (l.config, l.fmqs, l.fmqs)).collect();
                    EvalReport {
                        schema_version: REPORT_SCHEMA_VERSION,
                        predictor: "label-oracle".into(),
                        regression: RegressionReport::from_rows(module, &rows)?,
                        alignment: None,
                    }
                }
            };
            io::write_json(&eval_report_path(paths, module), &out)?;
            Ok(out)
        })
        .collect()
}

pub const ABLATION_JSON: &str = "ablation.json";
pub const ABLATION_CSV: &str = "ablation.csv";

/// Runs the four-arm downstream ablation against the trained checkpoints.
pub fn demo_aux(cfg: &PipelineConfig, paths: &PathsConfig) -> Result<AblationReport> {
    let ifem = FrozenEvaluator::load(&checkpoint_path(paths, Module::Ifem))?;
    let bfem = FrozenEvaluator::load(&checkpoint_path(paths, Module::Bfem))?;
    let evaluators = Evaluators { ifem: &ifem, bfem: &bfem };
    let report = run_ablation(&evaluators, &cfg.toy, &cfg.aux, &cfg.ablation_seeds)?;
    if !report.checkpoints_unchanged {
        return Err(Error::InvalidArgument("evaluator checkpoints changed during downstream training".into()));
    }
    io::write_json(&paths.reports.join(ABLATION_JSON), &report)?;
    io::write_atomic(&paths.reports.join(ABLATION_CSV), report.to_csv().as_bytes())?;
    Ok(report)
}
