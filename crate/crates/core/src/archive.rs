//! The configuration x stage run archive and its feature stores.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, Storage};
use crate::tensor::Tensor;
use crate::text::{GroundTruthRecord, CAMERAS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Module {
    #[serde(rename = "IFEM")]
    Ifem,
    #[serde(rename = "BFEM")]
    Bfem,
}

impl Module {
    pub const ALL: [Module; 2] = [Module::Ifem, Module::Bfem];

    pub fn name(self) -> &'static str {
        match self {
            Module::Ifem => "IFEM",
            Module::Bfem => "BFEM",
        }
    }

    pub fn tag(self) -> u64 {
        match self {
            Module::Ifem => 0,
            Module::Bfem => 1,
        }
    }
}

impl fmt::Display for Module {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Module {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "IFEM" => Ok(Module::Ifem),
            "BFEM" => Ok(Module::Bfem),
            _ => Err(Error::InvalidArgument(format!("unknown module {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FeatureKey {
    pub config: usize,
    pub stage: usize,
    pub sample: usize,
    pub module: Module,
}

/// Per-module feature shapes: `[views, C, H, W]` for IFEM, `[C, H, W]` for BFEM.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureShapes {
    pub ifem: [usize; 4],
    pub bfem: [usize; 3],
}

impl Default for FeatureShapes {
    fn default() -> Self {
        FeatureShapes {
            ifem: [CAMERAS, 32, 8, 12],
            bfem: [32, 16, 16],
        }
    }
}

impl FeatureShapes {
    pub fn of(&self, module: Module) -> Vec<usize> {
        match module {
            Module::Ifem => self.ifem.to_vec(),
            Module::Bfem => self.bfem.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ifem.iter().chain(&self.bfem).any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!("feature shapes must be positive: {self:?}")));
        }
        if self.ifem[0] != CAMERAS {
            return Err(Error::InvalidArgument(format!(
                "IFEM features need {CAMERAS} views, got {}",
                self.ifem[0]
            )));
        }
        Ok(())
    }
}

/// The six per-camera 2-D records and the 3-D record of one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<GroundTruthRecord>", into = "Vec<GroundTruthRecord>")]
pub struct SampleAnnotations {
    pub views: Vec<GroundTruthRecord>,
    pub bev: GroundTruthRecord,
}

impl TryFrom<Vec<GroundTruthRecord>> for SampleAnnotations {
    type Error = Error;

    fn try_from(mut records: Vec<GroundTruthRecord>) -> Result<Self> {
        if records.len() != CAMERAS + 1 {
            return Err(Error::InvalidArgument(format!(
                "expected {} records per sample, got {}",
                CAMERAS + 1,
                records.len()
            )));
        }
        let bev = records.pop().expect("length checked");
        let ann = SampleAnnotations { views: records, bev };
        ann.validate()?;
        Ok(ann)
    }
}

impl From<SampleAnnotations> for Vec<GroundTruthRecord> {
    fn from(a: SampleAnnotations) -> Self {
        let mut v = a.views;
        v.push(a.bev);
        v
    }
}

impl SampleAnnotations {
    pub fn validate(&self) -> Result<()> {
        for (c, r) in self.views.iter().enumerate() {
            r.validate()?;
            if r.camera != Some(c) {
                return Err(Error::InvalidArgument(format!("view record {c} carries camera {:?}", r.camera)));
            }
        }
        self.bev.validate()?;
        if !self.bev.is_3d() {
            return Err(Error::InvalidArgument("last record of a sample must be 3-D".into()));
        }
        Ok(())
    }
}

/// Source of feature maps keyed by (config, stage, sample, module).
pub trait FeatureStore: Send + Sync {
    fn feature(&self, key: FeatureKey) -> Result<Tensor>;
}

#[derive(Default)]
pub struct MemoryStore {
    maps: HashMap<FeatureKey, Tensor>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: FeatureKey, t: Tensor) {
        self.maps.insert(key, t);
    }
}

impl FeatureStore for MemoryStore {
    fn feature(&self, key: FeatureKey) -> Result<Tensor> {
        self.maps.get(&key).cloned().ok_or_else(|| missing(key))
    }
}

pub(crate) fn missing(key: FeatureKey) -> Error {
    Error::MissingFeature {
        config: key.config,
        stage: key.stage,
        sample: key.sample,
        module: key.module.name(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureFileEntry {
    pub config: usize,
    pub stage: usize,
    pub module: Module,
    pub path: String,
}

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub configs: Vec<String>,
    pub stages: usize,
    pub samples: usize,
    pub metric_grid: Vec<Vec<f64>>,
    pub shapes: FeatureShapes,
    pub storage: Storage,
    pub annotations: Vec<String>,
    /// Stacked `[samples, ...]` tensor files, one per (config, stage, module).
    pub features: Vec<FeatureFileEntry>,
}

/// Reads single samples out of stacked tensor files.
pub struct DiskStore {
    root: PathBuf,
    files: HashMap<(usize, usize, Module), PathBuf>,
}

impl FeatureStore for DiskStore {
    fn feature(&self, key: FeatureKey) -> Result<Tensor> {
        let path = self.files.get(&(key.config, key.stage, key.module)).ok_or_else(|| missing(key))?;
        io::read_tensor_slice(&self.root.join(path), key.sample)
    }
}

pub struct RunArchive {
    pub configs: Vec<String>,
    pub stages: usize,
    /// `metric_grid[i][j]` is the task metric of config `i` at stage `j`.
    pub metric_grid: Vec<Vec<f64>>,
    pub samples: usize,
    pub shapes: FeatureShapes,
    pub annotations: Vec<SampleAnnotations>,
    pub store: Arc<dyn FeatureStore>,
}

impl fmt::Debug for RunArchive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RunArchive")
            .field("configs", &self.configs)
            .field("stages", &self.stages)
            .field("samples", &self.samples)
            .field("shapes", &self.shapes)
            .finish_non_exhaustive()
    }
}

impl RunArchive {
    pub fn feature(&self, key: FeatureKey) -> Result<Tensor> {
        if key.config >= self.configs.len() || key.stage >= self.stages || key.sample >= self.samples {
            return Err(missing(key));
        }
        let t = self.store.feature(key)?;
        let expected = self.shapes.of(key.module);
        if t.shape() != expected.as_slice() {
            return Err(Error::shape(
                "feature",
                format!("{key:?} has shape {:?}, expected {expected:?}", t.shape()),
            ));
        }
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.configs.len();
        if n == 0 || self.stages == 0 || self.samples == 0 {
            return Err(Error::IncompleteArchive("archive has an empty axis".into()));
        }
        if self.metric_grid.len() != n || self.metric_grid.iter().any(|r| r.len() != self.stages) {
            return Err(Error::IncompleteArchive(format!("metric grid is not {n}x{}", self.stages)));
        }
        if let Some(v) = self.metric_grid.iter().flatten().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::IncompleteArchive(format!("metric value {v} outside [0, 1]")));
        }
        if self.annotations.len() != self.samples {
            return Err(Error::IncompleteArchive(format!(
                "{} annotation sets for {} samples",
                self.annotations.len(),
                self.samples
            )));
        }
        self.shapes.validate()
    }

    /// Writes the manifest, stacked feature files and per-sample annotations.
    pub fn save(&self, dir: &Path, storage: Storage) -> Result<Manifest> {
        self.validate()?;
        let mut features = Vec::new();
        for i in 0..self.configs.len() {
            for j in 0..self.stages {
                for module in Module::ALL {
                    let maps = (0..self.samples)
                        .map(|k| self.feature(FeatureKey { config: i, stage: j, sample: k, module }))
                        .collect::<Result<Vec<_>>>()?;
                    let rel = format!("features/c{i}_s{j}_{}.fmqt", module.name().to_ascii_lowercase());
                    io::write_tensor(&dir.join(&rel), &Tensor::stack(&maps)?, storage)?;
                    features.push(FeatureFileEntry { config: i, stage: j, module, path: rel });
                }
            }
        }
        let mut annotations = Vec::with_capacity(self.samples);
        for (k, ann) in self.annotations.iter().enumerate() {
            let rel = format!("annotations/sample-{k:04}.json");
            io::write_json(&dir.join(&rel), ann)?;
            annotations.push(rel);
        }
        let manifest = Manifest {
            schema_version: MANIFEST_VERSION,
            configs: self.configs.clone(),
            stages: self.stages,
            samples: self.samples,
            metric_grid: self.metric_grid.clone(),
            shapes: self.shapes.clone(),
            storage,
            annotations,
            features,
        };
        io::write_json(&dir.join("manifest.json"), &manifest)?;
        Ok(manifest)
    }

    pub fn open(dir: &Path) -> Result<RunArchive> {
        let manifest: Manifest = io::read_json(&dir.join("manifest.json"))?;
        RunArchive::from_manifest(dir, manifest)
    }

    /// Builds an archive from a manifest whose paths are relative to `dir`.
    pub fn from_manifest(dir: &Path, manifest: Manifest) -> Result<RunArchive> {
        if manifest.schema_version != MANIFEST_VERSION {
            return Err(Error::Format {
                path: dir.join("manifest.json"),
                detail: format!("unsupported schema_version {}", manifest.schema_version),
            });
        }
        let annotations = manifest
            .annotations
            .iter()
            .map(|rel| io::read_json::<SampleAnnotations>(&dir.join(rel)))
            .collect::<Result<Vec<_>>>()?;
        let files = manifest
            .features
            .iter()
            .map(|e| ((e.config, e.stage, e.module), PathBuf::from(&e.path)))
            .collect();
        let archive = RunArchive {
            configs: manifest.configs,
            stages: manifest.stages,
            metric_grid: manifest.metric_grid,
            samples: manifest.samples,
            shapes: manifest.shapes,
            annotations,
            store: Arc::new(DiskStore {
                root: dir.to_path_buf(),
                files,
            }),
        };
        archive.validate()?;
        Ok(archive)
    }

    /// Confirms every (config, stage, sample, module) key resolves.
    pub fn check_complete(&self) -> Result<()> {
        self.validate()?;
        for i in 0..self.configs.len() {
            for j in 0..self.stages {
                for k in 0..self.samples {
                    for module in Module::ALL {
                        self.feature(FeatureKey { config: i, stage: j, sample: k, module })
                            .map_err(|e| Error::IncompleteArchive(e.to_string()))?;
                    }
                }
            }
        }
        Ok(())
    }
}
