//! Multi-rater label fusion: plurality voting for the quality class, union of
//! explanation sets, and inverse-frequency class weights.

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusRecord;
use crate::error::{Error, Result};
use crate::types::{ExplanationSet, FusedRecord, QualityClass, RaterAnnotation};

pub const WEIGHT_CLIP: f64 = 10.0;

/// Plurality vote over the raters' quality verdicts. Ties break by the fixed
/// priority poor_quality > no_skin > healthy_skin > lesion.
pub fn fuse_quality(annotations: &[RaterAnnotation]) -> Result<QualityClass> {
    if annotations.is_empty() {
        return Err(Error::Argument("cannot fuse an empty annotation list".into()));
    }
    let mut votes = [0usize; QualityClass::COUNT];
    for ann in annotations {
        votes[ann.quality.index()] += 1;
    }
    Ok(QualityClass::ALL
        .into_iter()
        .max_by_key(|c| (votes[c.index()], c.tie_priority()))
        .unwrap())
}

/// Union rule: explanation `c` is relevant if at least one rater marked it.
pub fn fuse_explanations(annotations: &[RaterAnnotation]) -> ExplanationSet {
    annotations
        .iter()
        .fold(ExplanationSet::empty(), |acc, ann| acc.union(&ann.explanation_set()))
}

/// Per-class loss weights `w_c = min(n_max / n_c, 10.0)`, indexed in
/// canonical quality-class order. The most frequent class gets weight 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub weights: [f64; QualityClass::COUNT],
}

impl ClassWeights {
    pub fn uniform() -> Self {
        Self { weights: [1.0; 4] }
    }

    pub fn get(&self, class: QualityClass) -> f64 {
        self.weights[class.index()]
    }
}

pub fn compute_class_weights(train_counts: [usize; QualityClass::COUNT]) -> Result<ClassWeights> {
    if let Some(i) = train_counts.iter().position(|&n| n == 0) {
        return Err(Error::Argument(format!(
            "class `{}` has zero training samples",
            QualityClass::from_index(i).unwrap().name()
        )));
    }
    let n_max = *train_counts.iter().max().unwrap() as f64;
    let mut weights = [0.0; QualityClass::COUNT];
    for (w, &n) in weights.iter_mut().zip(&train_counts) {
        *w = (n_max / n as f64).min(WEIGHT_CLIP);
    }
    Ok(ClassWeights { weights })
}

/// Where training targets come from: synthetic ground truth or rater fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TargetSource {
    #[default]
    Truth,
    Fused,
}

/// One training target per record. Fused mode requires every record to carry
/// at least one annotation.
pub fn build_targets(records: &[CorpusRecord], source: TargetSource) -> Result<Vec<FusedRecord>> {
    records
        .iter()
        .map(|record| match source {
            TargetSource::Truth => Ok(record.truth()),
            TargetSource::Fused => {
                if record.annotations.is_empty() {
                    return Err(Error::Data(format!(
                        "record `{}` has no annotations; cannot fuse",
                        record.image_path
                    )));
                }
                Ok(FusedRecord {
                    quality: fuse_quality(&record.annotations)?,
                    explanations: fuse_explanations(&record.annotations),
                })
            }
        })
        .collect()
}
