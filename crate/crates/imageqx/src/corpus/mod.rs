//! Synthetic corpus generation, manifest storage, and loading. Ground-truth
//! quality labels and explanation sets are known by construction: degraded
//! images are poor quality with exactly the applied degradation kinds.

pub mod degrade;
pub mod image;
pub mod raters;
pub mod scene;

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use degrade::{apply_degradation, DegradationSpec, F_MAX, SIGMA_MAX};
pub use image::ImageTensor;
pub use raters::{simulate_raters, RaterProfile, RaterSimConfig};
pub use scene::{generate_scene, SceneConfig, SceneMeta};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};
use crate::types::{ExplanationKind, ExplanationSet, FusedRecord, QualityClass, RaterAnnotation};

/// Requested number of images per quality class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassCounts {
    pub lesion: usize,
    pub no_skin: usize,
    pub healthy_skin: usize,
    pub poor_quality: usize,
}

impl Default for ClassCounts {
    fn default() -> Self {
        Self {
            lesion: 40,
            no_skin: 10,
            healthy_skin: 20,
            poor_quality: 30,
        }
    }
}

impl ClassCounts {
    pub fn total(&self) -> usize {
        self.lesion + self.no_skin + self.healthy_skin + self.poor_quality
    }

    pub fn get(&self, class: QualityClass) -> usize {
        match class {
            QualityClass::Lesion => self.lesion,
            QualityClass::NoSkin => self.no_skin,
            QualityClass::HealthySkin => self.healthy_skin,
            QualityClass::PoorQuality => self.poor_quality,
        }
    }
}

/// How degradations are sampled for poor-quality records: 1..=max_kinds
/// distinct kinds per image, magnitudes uniform in the configured range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradationMix {
    pub max_kinds: usize,
    pub magnitude_min: f32,
    pub magnitude_max: f32,
}

impl Default for DegradationMix {
    fn default() -> Self {
        Self {
            max_kinds: 3,
            magnitude_min: 0.4,
            magnitude_max: 1.0,
        }
    }
}

impl DegradationMix {
    fn validate(&self) -> Result<()> {
        if self.max_kinds == 0 || self.max_kinds > ExplanationKind::COUNT {
            return Err(Error::Config(format!(
                "max_kinds must be 1..={}, got {}",
                ExplanationKind::COUNT,
                self.max_kinds
            )));
        }
        if !(self.magnitude_min > 0.0
            && self.magnitude_min <= self.magnitude_max
            && self.magnitude_max <= 1.0)
        {
            return Err(Error::Config(format!(
                "magnitude range ({}, {}) must satisfy 0 < min <= max <= 1",
                self.magnitude_min, self.magnitude_max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub scene: SceneConfig,
    pub counts: ClassCounts,
    pub degradations: DegradationMix,
    /// When present, each record carries simulated rater annotations.
    pub raters: Option<RaterSimConfig>,
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.degradations.validate()?;
        if let Some(r) = &self.raters {
            r.to_profiles()?;
        }
        Ok(())
    }

    pub fn resolution(&self) -> usize {
        self.scene.resolution
    }
}

/// One manifest entry. `truth_explanations` is nonempty iff the truth class is
/// poor quality; `scene` is present only for scenes containing a lesion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub image_path: String,
    pub truth_quality: QualityClass,
    #[serde(default)]
    pub truth_explanations: Vec<ExplanationKind>,
    #[serde(default)]
    pub annotations: Vec<RaterAnnotation>,
    #[serde(default)]
    pub scene: Option<SceneMeta>,
}

impl CorpusRecord {
    pub fn truth_set(&self) -> ExplanationSet {
        ExplanationSet::from_kinds(&self.truth_explanations)
    }

    pub fn truth(&self) -> FusedRecord {
        FusedRecord {
            quality: self.truth_quality,
            explanations: self.truth_set(),
        }
    }

    fn validate(&self) -> Result<()> {
        let poor = self.truth_quality == QualityClass::PoorQuality;
        if poor && self.truth_explanations.is_empty() {
            return Err(Error::Data(
                "poor_quality record with empty truth_explanations".into(),
            ));
        }
        if !poor && !self.truth_explanations.is_empty() {
            return Err(Error::Data(format!(
                "`{}` record with nonempty truth_explanations",
                self.truth_quality.name()
            )));
        }
        for ann in &self.annotations {
            ann.validate()?;
        }
        Ok(())
    }
}

/// A loaded corpus: records plus the directory image paths are relative to.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub dir: PathBuf,
    pub records: Vec<CorpusRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

impl Manifest {
    pub fn image_path(&self, record: &CorpusRecord) -> PathBuf {
        self.dir.join(&record.image_path)
    }

    pub fn load_image(&self, record: &CorpusRecord) -> Result<ImageTensor> {
        ImageTensor::load_png(&self.image_path(record))
    }

    /// Image side length, read from the first record's image.
    pub fn resolution(&self) -> Result<usize> {
        let first = self
            .records
            .first()
            .ok_or_else(|| Error::Data("manifest has no records".into()))?;
        Ok(self.load_image(first)?.resolution())
    }

    pub fn class_counts(&self) -> [usize; QualityClass::COUNT] {
        let mut counts = [0usize; QualityClass::COUNT];
        for r in &self.records {
            counts[r.truth_quality.index()] += 1;
        }
        counts
    }
}

struct PlannedRecord {
    index: usize,
    class: QualityClass,
}

fn generate_record(
    plan: &PlannedRecord,
    config: &CorpusConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<CorpusRecord> {
    let record_seed = derive_seed(seed, "record", plan.index as u64);
    let image_path = format!("img_{:05}.png", plan.index);

    let (image, truth_set, scene) = match plan.class {
        QualityClass::Lesion => {
            let (img, meta) = scene::generate_scene(record_seed, &config.scene)?;
            (img, ExplanationSet::empty(), Some(meta))
        }
        QualityClass::NoSkin => (
            scene::generate_no_skin_scene(record_seed, &config.scene)?,
            ExplanationSet::empty(),
            None,
        ),
        QualityClass::HealthySkin => (
            scene::generate_healthy_scene(record_seed, &config.scene)?,
            ExplanationSet::empty(),
            None,
        ),
        QualityClass::PoorQuality => {
            let (mut img, mut meta) = scene::generate_scene(record_seed, &config.scene)?;
            let mut rng = stream(record_seed, "mix", 0);
            let n_kinds = rng.gen_range(1..=config.degradations.max_kinds);
            let mut kinds = ExplanationKind::ALL.to_vec();
            kinds.shuffle(&mut rng);
            kinds.truncate(n_kinds);
            kinds.sort(); // apply in canonical order
            let mut set = ExplanationSet::empty();
            for (k_idx, kind) in kinds.iter().enumerate() {
                let magnitude = rng
                    .gen_range(config.degradations.magnitude_min..=config.degradations.magnitude_max);
                let spec = DegradationSpec { kind: *kind, magnitude };
                let (next, next_meta) =
                    apply_degradation(&img, &meta, &spec, derive_seed(record_seed, "degrade", k_idx as u64))?;
                img = next;
                meta = next_meta;
                set.insert(*kind);
            }
            (img, set, Some(meta))
        }
    };

    image.save_png(&out_dir.join(&image_path))?;

    let truth = FusedRecord {
        quality: plan.class,
        explanations: truth_set,
    };
    let annotations = match &config.raters {
        Some(sim) => {
            let profiles = sim.to_profiles()?;
            simulate_raters(&truth, &profiles, derive_seed(record_seed, "panel", 0))?
        }
        None => Vec::new(),
    };

    Ok(CorpusRecord {
        image_path,
        truth_quality: plan.class,
        truth_explanations: truth_set.iter().collect(),
        annotations,
        scene,
    })
}

/// Generate a corpus under `out_dir`: one PNG per record plus
/// `manifest.jsonl`. Deterministic for fixed `(config, seed)`; records are
/// generated in parallel, each from its own seed stream.
pub fn generate_corpus(config: &CorpusConfig, seed: u64, out_dir: &Path) -> Result<Manifest> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut plans = Vec::with_capacity(config.counts.total());
    for class in QualityClass::ALL {
        for _ in 0..config.counts.get(class) {
            plans.push(PlannedRecord {
                index: plans.len(),
                class,
            });
        }
    }

    let records: Vec<CorpusRecord> = plans
        .par_iter()
        .map(|plan| generate_record(plan, config, seed, out_dir))
        .collect::<Result<_>>()?;

    let manifest_path = out_dir.join(MANIFEST_FILE);
    let mut file = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    for record in &records {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::Data(format!("serializing record: {e}")))?;
        writeln!(file, "{line}").map_err(|e| Error::io(&manifest_path, e))?;
    }

    Ok(Manifest {
        dir: out_dir.to_path_buf(),
        records,
    })
}

/// Load and validate a manifest. Every record must satisfy the corpus
/// invariants and its image file must exist and decode to a square image of
/// consistent resolution. Errors name the offending line.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();

    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CorpusRecord = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        record.validate().map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        records.push((line_no, record));
    }

    // Image files must exist and decode; checked in parallel.
    let resolutions: Vec<usize> = records
        .par_iter()
        .map(|(line_no, record)| {
            let img_path = dir.join(&record.image_path);
            if !img_path.exists() {
                return Err(Error::Manifest {
                    path: path.to_path_buf(),
                    line: *line_no,
                    message: format!("image file `{}` does not exist", record.image_path),
                });
            }
            let img = ImageTensor::load_png(&img_path).map_err(|e| Error::Manifest {
                path: path.to_path_buf(),
                line: *line_no,
                message: e.to_string(),
            })?;
            Ok(img.resolution())
        })
        .collect::<Result<_>>()?;
    if let Some(&first) = resolutions.first() {
        if let Some(pos) = resolutions.iter().position(|&r| r != first) {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                line: records[pos].0,
                message: format!("image resolution {} differs from {}", resolutions[pos], first),
            });
        }
    }

    Ok(Manifest {
        dir,
        records: records.into_iter().map(|(_, r)| r).collect(),
    })
}
