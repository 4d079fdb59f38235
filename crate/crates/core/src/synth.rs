//! Seeded synthetic run archives.
//!
//! Each sample gets a random scene. Its reference feature maps are rendered
//! from the scene as Gaussian blobs carrying a per-class channel pattern on
//! top of a constant background. A cell `(i, j)` of the grid observes
//! `gain_j * reference + sigma_ij * noise` where
//!
//! ```text
//! q_i      = i / (N - 1)                          config quality
//! s_j      = e + (s - e) (r^j - r^(M-1)) / (1 - r^(M-1))
//! sigma_ij = (1 + spread (1 - q_i)) s_j
//! metric   = floor + (ceil - floor) (1 - sigma_ij / sigma_max) + jitter
//! ```
//!
//! with `s = noise_start`, `e = noise_end`, `r = noise_decay`. The metric is
//! clipped to `[0, 1]`. Every random draw comes from a generator seeded by
//! the spec seed and the key it belongs to, so any single feature map can be
//! regenerated on demand.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::archive::{missing, FeatureKey, FeatureShapes, FeatureStore, Module, RunArchive, SampleAnnotations};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::text::{GroundTruthRecord, ObjectAnnotation, CAMERAS, CLASSES};

/// Side length of the square ground-plane region objects are placed in, metres.
pub const SCENE_EXTENT: f64 = 10.0;

/// Nominal (width, length) per class, metres.
const NOMINAL_SIZE: [(f64, f64); 10] = [
    (1.8, 4.5),
    (2.5, 7.0),
    (2.9, 11.0),
    (2.5, 9.0),
    (2.8, 6.0),
    (0.7, 0.7),
    (0.8, 2.1),
    (0.6, 1.7),
    (0.4, 0.4),
    (0.5, 2.0),
];

const BACKGROUND_LEVEL: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticGenSpec {
    pub seed: u64,
    pub configs: usize,
    pub stages: usize,
    pub samples: usize,
    pub shapes: FeatureShapes,
    pub max_objects: usize,
    pub noise_start: f64,
    pub noise_end: f64,
    pub noise_decay: f64,
    /// Extra noise multiplier of the worst config relative to the best.
    pub quality_spread: f64,
    /// Signal gain at stage 0; rises linearly to 1 at the last stage.
    pub gain_min: f64,
    pub metric_floor: f64,
    pub metric_ceil: f64,
    /// Half-width of the uniform metric jitter.
    pub metric_jitter: f64,
}

impl Default for SyntheticGenSpec {
    fn default() -> Self {
        SyntheticGenSpec {
            seed: 0,
            configs: 8,
            stages: 8,
            samples: 64,
            shapes: FeatureShapes::default(),
            max_objects: 4,
            noise_start: 1.0,
            noise_end: 0.05,
            noise_decay: 0.6,
            quality_spread: 1.0,
            gain_min: 1.0,
            metric_floor: 0.22,
            metric_ceil: 0.62,
            metric_jitter: 0.005,
        }
    }
}

/// Mixes a seed with a key path into an independent stream seed.
pub fn stream_seed(seed: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    parts
        .iter()
        .fold(mix(seed ^ 0x9e37_79b9_7f4a_7c15), |acc, &p| mix(acc.wrapping_add(p).wrapping_add(0x9e37_79b9_7f4a_7c15)))
}

pub(crate) fn stream(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, parts))
}

const TAG_SCENE: u64 = 1;
const TAG_PATTERN: u64 = 2;
const TAG_NOISE: u64 = 3;
const TAG_METRIC: u64 = 4;

impl SyntheticGenSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.configs == 0 || self.stages == 0 || self.samples == 0 {
            return bad(format!(
                "configs, stages and samples must be positive (got {}, {}, {})",
                self.configs, self.stages, self.samples
            ));
        }
        self.shapes.validate()?;
        if self.max_objects == 0 {
            return bad("max_objects must be positive".into());
        }
        if !(self.noise_end >= 0.0 && self.noise_start >= self.noise_end && self.noise_start.is_finite()) {
            return bad(format!(
                "need noise_start >= noise_end >= 0 (got {}, {})",
                self.noise_start, self.noise_end
            ));
        }
        if !(self.noise_decay > 0.0 && self.noise_decay < 1.0) {
            return bad(format!("noise_decay must lie in (0, 1), got {}", self.noise_decay));
        }
        if !(self.quality_spread >= 0.0 && self.quality_spread.is_finite()) {
            return bad(format!("quality_spread must be non-negative, got {}", self.quality_spread));
        }
        if !(self.gain_min > 0.0 && self.gain_min <= 1.0) {
            return bad(format!("gain_min must lie in (0, 1], got {}", self.gain_min));
        }
        let unit = 0.0..=1.0;
        if !(unit.contains(&self.metric_floor) && unit.contains(&self.metric_ceil) && self.metric_floor <= self.metric_ceil) {
            return bad("need 0 <= metric_floor <= metric_ceil <= 1".into());
        }
        if !(self.metric_jitter >= 0.0 && self.metric_jitter.is_finite()) {
            return bad("metric_jitter must be non-negative".into());
        }
        Ok(())
    }

    pub fn quality(&self, config: usize) -> f64 {
        if self.configs == 1 {
            1.0
        } else {
            config as f64 / (self.configs - 1) as f64
        }
    }

    pub fn stage_noise(&self, stage: usize) -> f64 {
        let last = self.stages.saturating_sub(1) as i32;
        if last == 0 {
            return self.noise_end;
        }
        let r = self.noise_decay;
        let t = (r.powi(stage as i32) - r.powi(last)) / (1.0 - r.powi(last));
        self.noise_end + (self.noise_start - self.noise_end) * t
    }

    pub fn noise_scale(&self, config: usize, stage: usize) -> f64 {
        (1.0 + self.quality_spread * (1.0 - self.quality(config))) * self.stage_noise(stage)
    }

    pub fn gain(&self, stage: usize) -> f64 {
        if self.stages == 1 {
            return 1.0;
        }
        self.gain_min + (1.0 - self.gain_min) * stage as f64 / (self.stages - 1) as f64
    }

    pub fn metric_grid(&self) -> Vec<Vec<f64>> {
        let max = self.noise_scale(0, 0);
        (0..self.configs)
            .map(|i| {
                (0..self.stages)
                    .map(|j| {
                        let maturity = if max > 0.0 { 1.0 - self.noise_scale(i, j) / max } else { 1.0 };
                        let mut rng = stream(self.seed, &[TAG_METRIC, i as u64, j as u64]);
                        let jitter = if self.metric_jitter > 0.0 {
                            rng.random_range(-self.metric_jitter..=self.metric_jitter)
                        } else {
                            0.0
                        };
                        let v = self.metric_floor + (self.metric_ceil - self.metric_floor) * maturity + jitter;
                        v.clamp(0.0, 1.0)
                    })
                    .collect()
            })
            .collect()
    }
}

/// Random scene for one sample as seven records (six views, then ground plane).
pub fn generate_scene(spec: &SyntheticGenSpec, sample: usize) -> SampleAnnotations {
    let mut rng = stream(spec.seed, &[TAG_SCENE, sample as u64]);
    let count = rng.random_range(1..=spec.max_objects);
    let [_, _, vh, vw] = spec.shapes.ifem;
    let mut bev = Vec::with_capacity(count);
    let mut views: Vec<Vec<ObjectAnnotation>> = vec![Vec::new(); CAMERAS];
    for _ in 0..count {
        let class = rng.random_range(0..CLASSES.len());
        let (w, l) = NOMINAL_SIZE[class];
        let scale = rng.random_range(0.9..1.1);
        let x = rng.random_range(0.0..SCENE_EXTENT);
        let y = rng.random_range(0.0..SCENE_EXTENT);
        let yaw = rng.random_range(-PI..PI);
        let size = [w * scale, l * scale];
        bev.push(ObjectAnnotation {
            class: CLASSES[class].into(),
            center: [x, y],
            size,
            yaw: Some(yaw),
        });
        // Ego sits at the centre; each camera covers a 60 degree sector.
        let (dx, dy) = (x - SCENE_EXTENT / 2.0, y - SCENE_EXTENT / 2.0);
        let angle = dy.atan2(dx).rem_euclid(2.0 * PI);
        let sector = 2.0 * PI / CAMERAS as f64;
        let cam = ((angle / sector) as usize).min(CAMERAS - 1);
        let dist = dx.hypot(dy).max(0.5);
        let reach = SCENE_EXTENT / 2.0 * std::f64::consts::SQRT_2;
        let u = (angle - cam as f64 * sector) / sector * vw as f64;
        let v = (1.0 - dist / reach).clamp(0.0, 1.0) * (vh as f64 - 1.0);
        let apparent = |m: f64| (m * 2.0 / dist).min(vw as f64);
        views[cam].push(ObjectAnnotation {
            class: CLASSES[class].into(),
            center: [u, v],
            size: [apparent(size[0].max(size[1])), apparent(1.5)],
            yaw: None,
        });
    }
    SampleAnnotations {
        views: views
            .into_iter()
            .enumerate()
            .map(|(c, objects)| GroundTruthRecord {
                sample,
                camera: Some(c),
                objects,
            })
            .collect(),
        bev: GroundTruthRecord {
            sample,
            camera: None,
            objects: bev,
        },
    }
}

/// Per-class channel patterns (index 10 is the background), unit RMS.
fn class_patterns(seed: u64, channels: usize, module: Module) -> Vec<Vec<f64>> {
    let mut rng = stream(seed, &[TAG_PATTERN, module.tag()]);
    (0..=CLASSES.len())
        .map(|_| {
            let v: Vec<f64> = (0..channels).map(|_| StandardNormal.sample(&mut rng)).collect();
            let rms = (v.iter().map(|x| x * x).sum::<f64>() / channels as f64).sqrt().max(1e-12);
            v.into_iter().map(|x| x / rms).collect()
        })
        .collect()
}

fn class_index(name: &str) -> usize {
    CLASSES.iter().position(|c| *c == name).expect("validated class")
}

/// Paints blobs for `objects` into a `[C, H, W]` slice. `cell` maps an object
/// to (row, col, radius) in grid units.
fn paint(
    out: &mut [f64],
    (c, h, w): (usize, usize, usize),
    objects: &[ObjectAnnotation],
    patterns: &[Vec<f64>],
    cell: impl Fn(&ObjectAnnotation) -> (f64, f64, f64),
) {
    let bg = &patterns[CLASSES.len()];
    for ch in 0..c {
        out[ch * h * w..(ch + 1) * h * w].fill(BACKGROUND_LEVEL * bg[ch]);
    }
    for o in objects {
        let p = &patterns[class_index(&o.class)];
        let (r0, c0, rad) = cell(o);
        let denom = 2.0 * rad * rad;
        for row in 0..h {
            for col in 0..w {
                let d2 = (row as f64 + 0.5 - r0).powi(2) + (col as f64 + 0.5 - c0).powi(2);
                let amp = (-d2 / denom).exp();
                if amp < 1e-6 {
                    continue;
                }
                for ch in 0..c {
                    out[(ch * h + row) * w + col] += amp * p[ch];
                }
            }
        }
    }
}

/// Noise-free feature maps of one sample for both modules.
pub fn reference_features(spec: &SyntheticGenSpec, ann: &SampleAnnotations) -> (Tensor, Tensor) {
    let [views, ci, vh, vw] = spec.shapes.ifem;
    let [cb, bh, bw] = spec.shapes.bfem;
    let ip = class_patterns(spec.seed, ci, Module::Ifem);
    let bp = class_patterns(spec.seed, cb, Module::Bfem);
    let plane = ci * vh * vw;
    let mut ifem = vec![0.0; views * plane];
    for (v, rec) in ann.views.iter().enumerate() {
        paint(&mut ifem[v * plane..(v + 1) * plane], (ci, vh, vw), &rec.objects, &ip, |o| {
            (o.center[1] + 0.5, o.center[0], (0.35 * o.size[0]).clamp(0.6, 2.5))
        });
    }
    let mut bfem = vec![0.0; cb * bh * bw];
    let (sy, sx) = (bh as f64 / SCENE_EXTENT, bw as f64 / SCENE_EXTENT);
    paint(&mut bfem, (cb, bh, bw), &ann.bev.objects, &bp, |o| {
        let extent = 0.5 * (o.size[0] + o.size[1]);
        (o.center[1] * sy, o.center[0] * sx, (0.3 * extent * sx).clamp(0.6, 2.5))
    });
    (
        Tensor::new(spec.shapes.ifem.to_vec(), ifem).expect("shape matches"),
        Tensor::new(spec.shapes.bfem.to_vec(), bfem).expect("shape matches"),
    )
}

/// Regenerates feature maps on demand from cached references.
pub struct SyntheticStore {
    spec: SyntheticGenSpec,
    references: Vec<(Tensor, Tensor)>,
}

impl SyntheticStore {
    pub fn reference(&self, sample: usize, module: Module) -> Option<&Tensor> {
        self.references.get(sample).map(|(i, b)| match module {
            Module::Ifem => i,
            Module::Bfem => b,
        })
    }
}

impl FeatureStore for SyntheticStore {
    fn feature(&self, key: FeatureKey) -> Result<Tensor> {
        let spec = &self.spec;
        if key.config >= spec.configs || key.stage >= spec.stages {
            return Err(missing(key));
        }
        let reference = self.reference(key.sample, key.module).ok_or_else(|| missing(key))?;
        let gain = spec.gain(key.stage);
        let sigma = spec.noise_scale(key.config, key.stage);
        let mut rng = stream(
            spec.seed,
            &[TAG_NOISE, key.config as u64, key.stage as u64, key.sample as u64, key.module.tag()],
        );
        // The noise is drawn even when sigma is zero so streams stay aligned.
        let data = reference
            .data()
            .iter()
            .map(|&r| {
                let n: f64 = StandardNormal.sample(&mut rng);
                gain * r + sigma * n
            })
            .collect();
        Tensor::new(reference.shape().to_vec(), data)
    }
}

/// Builds an archive whose features are regenerated lazily from `spec`.
pub fn generate_synthetic_archive(spec: &SyntheticGenSpec) -> Result<RunArchive> {
    spec.validate()?;
    let annotations: Vec<SampleAnnotations> = (0..spec.samples).map(|k| generate_scene(spec, k)).collect();
    let references = annotations.iter().map(|a| reference_features(spec, a)).collect();
    let archive = RunArchive {
        configs: (0..spec.configs).map(|i| format!("config-{i}")).collect(),
        stages: spec.stages,
        metric_grid: spec.metric_grid(),
        samples: spec.samples,
        shapes: spec.shapes.clone(),
        annotations,
        store: Arc::new(SyntheticStore {
            spec: spec.clone(),
            references,
        }),
    };
    archive.validate()?;
    Ok(archive)
}
