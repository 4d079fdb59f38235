//! Pipeline configuration file.
//!
//! A JSON document with a `schema_version` field. Every section is optional
//! and falls back to its defaults; unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::auxiliary::{AuxLossConfig, ToyTaskConfig};
use crate::error::{Error, Result};
use crate::fmqe::TrainRunConfig;
use crate::io::Storage;
use crate::scoring::ScoringConfig;
use crate::synth::SyntheticGenSpec;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Output locations, relative to the output directory unless absolute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub archive: PathBuf,
    pub labels: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            archive: "archive".into(),
            labels: "labels".into(),
            checkpoints: "checkpoints".into(),
            reports: "reports".into(),
        }
    }
}

impl PathsConfig {
    pub fn resolve(&self, out: &Path) -> PathsConfig {
        let r = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { out.join(p) };
        PathsConfig {
            archive: r(&self.archive),
            labels: r(&self.labels),
            checkpoints: r(&self.checkpoints),
            reports: r(&self.reports),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub schema_version: u32,
    /// Seeds the split, training and the downstream demo; `--seed` also
    /// overrides the generator seed.
    pub seed: u64,
    pub paths: PathsConfig,
    pub storage: Storage,
    pub generator: SyntheticGenSpec,
    pub scoring: ScoringConfig,
    pub training: TrainRunConfig,
    pub aux: AuxLossConfig,
    pub toy: ToyTaskConfig,
    /// Seeds of the downstream ablation.
    pub ablation_seeds: Vec<u64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 0,
            paths: PathsConfig::default(),
            storage: Storage::F64,
            generator: SyntheticGenSpec::default(),
            scoring: ScoringConfig::default(),
            training: TrainRunConfig::default(),
            aux: AuxLossConfig::default(),
            toy: ToyTaskConfig::default(),
            ablation_seeds: vec![0],
        }
    }
}

impl PipelineConfig {
    /// Parses and validates a config document. `origin` names the source in
    /// diagnostics.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(text).map_err(|e| {
            Error::Config(format!("{}: line {}, column {}: {e}", origin.display(), e.line(), e.column()))
        })?;
        cfg.validate()
            .map_err(|e| Error::Config(format!("{}: {e}", origin.display())))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Sets every seed in the config to `seed`.
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.generator.seed = seed;
        self.scoring.split_seed = seed;
        self.training.seed = seed;
        self.ablation_seeds = vec![seed];
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let field = |section: &str, e: Error| Error::Config(format!("{section}: {e}"));
        self.generator.validate().map_err(|e| field("generator", e))?;
        self.scoring.validate().map_err(|e| field("scoring", e))?;
        self.training.validate().map_err(|e| field("training", e))?;
        self.aux.validate().map_err(|e| field("aux", e))?;
        self.toy.validate(&self.generator.shapes).map_err(|e| field("toy", e))?;
        if self.ablation_seeds.is_empty() {
            return Err(Error::Config("ablation_seeds must not be empty".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<PipelineConfig> {
        PipelineConfig::parse(s, Path::new("test.json"))
    }

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = parse("{}").unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        assert_eq!(cfg.scoring.similarity.alpha, 0.5);
        assert_eq!(cfg.scoring.w, 0.8);
        assert_eq!(cfg.training.tau_init, 0.07);
        assert_eq!((cfg.aux.w_bev, cfg.aux.w_ifem, cfg.aux.w_bfem), (1.0, 0.1, 0.1));
    }

    #[test]
    fn defaults_round_trip() {
        let text = serde_json::to_string_pretty(&PipelineConfig::default()).unwrap();
        assert_eq!(parse(&text).unwrap(), PipelineConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected_with_position() {
        let err = parse("{\n  \"scoring\": {\"alhpa\": 0.5}\n}").unwrap_err().to_string();
        assert!(err.contains("alhpa"), "{err}");
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        for doc in [
            r#"{"scoring": {"similarity": {"alpha": 1.5}}}"#,
            r#"{"scoring": {"w": -0.1}}"#,
            r#"{"training": {"tau_init": 0.0}}"#,
            r#"{"aux": {"w_ifem": -1.0}}"#,
            r#"{"generator": {"samples": 0}}"#,
            r#"{"schema_version": 2}"#,
        ] {
            assert!(parse(doc).is_err(), "{doc}");
        }
    }

    #[test]
    fn seed_override_reaches_every_stage() {
        let mut cfg = PipelineConfig::default();
        cfg.override_seed(7);
        assert_eq!(
            (cfg.seed, cfg.generator.seed, cfg.scoring.split_seed, cfg.training.seed),
            (7, 7, 7, 7)
        );
        assert_eq!(cfg.ablation_seeds, vec![7]);
    }
}
