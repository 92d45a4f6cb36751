//! Pairwise inter-rater agreement: per-class (or per-explanation) F1 averaged
//! over all unordered rater pairs on their co-labeled images.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{f1, ConfusionTally};
use crate::error::{Error, Result};
use crate::fusion::{fuse_explanations, fuse_quality};
use crate::types::{ExplanationKind, QualityClass, RaterAnnotation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgreementScope {
    Quality,
    Explanations,
}

/// Agreement statistics for one class or explanation. `pairs` counts the
/// rater pairs with a defined F1; the std is the population standard
/// deviation over those pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementEntry {
    pub name: String,
    pub mean_f1: Option<f64>,
    pub std_f1: Option<f64>,
    pub pairs: usize,
    /// Images whose fused label carries this class (or whose fused
    /// explanation union contains this explanation).
    pub image_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub scope: AgreementScope,
    pub entries: Vec<AgreementEntry>,
    pub total_images: usize,
    pub rater_count: usize,
}

fn population_stats(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (Some(mean), Some(var.sqrt()))
}

fn find<'a>(image: &'a [RaterAnnotation], rater: &str) -> Option<&'a RaterAnnotation> {
    image.iter().find(|a| a.rater_id == rater)
}

/// Compute pairwise inter-rater agreement over `images`, each holding one
/// annotation list. One rater in each unordered pair acts as the reference
/// and the other as the prediction; F1's symmetry makes the order irrelevant.
/// Pairs with no co-labeled images are skipped, and pairs with an undefined
/// F1 for a class are excluded from that class's aggregate.
pub fn pairwise_interrater(
    images: &[Vec<RaterAnnotation>],
    scope: AgreementScope,
) -> Result<AgreementReport> {
    let raters: BTreeSet<&str> = images
        .iter()
        .flatten()
        .map(|a| a.rater_id.as_str())
        .collect();
    if raters.len() < 2 {
        return Err(Error::Argument(format!(
            "pairwise agreement needs >=2 distinct raters, found {}",
            raters.len()
        )));
    }
    let raters: Vec<&str> = raters.into_iter().collect();

    let names: Vec<&'static str> = match scope {
        AgreementScope::Quality => QualityClass::ALL.iter().map(|c| c.name()).collect(),
        AgreementScope::Explanations => ExplanationKind::ALL.iter().map(|k| k.name()).collect(),
    };
    let mut per_name_f1s: Vec<Vec<f64>> = vec![Vec::new(); names.len()];

    for (ai, &a) in raters.iter().enumerate() {
        for &b in &raters[ai + 1..] {
            let co_labeled: Vec<(&RaterAnnotation, &RaterAnnotation)> = images
                .iter()
                .filter_map(|img| Some((find(img, a)?, find(img, b)?)))
                .collect();
            if co_labeled.is_empty() {
                continue;
            }
            for (ni, f1s) in per_name_f1s.iter_mut().enumerate() {
                let mut t = ConfusionTally::default();
                for (ra, rb) in &co_labeled {
                    let (ref_pos, pred_pos) = match scope {
                        AgreementScope::Quality => {
                            let class = QualityClass::from_index(ni).unwrap();
                            (ra.quality == class, rb.quality == class)
                        }
                        AgreementScope::Explanations => {
                            let kind = ExplanationKind::from_index(ni).unwrap();
                            (
                                ra.explanation_set().contains(kind),
                                rb.explanation_set().contains(kind),
                            )
                        }
                    };
                    t.add(ref_pos, pred_pos);
                }
                if let Some(score) = f1(&t) {
                    f1s.push(score);
                }
            }
        }
    }

    // Fused per-image counts, the Table 1/2 "image count" columns.
    let mut image_counts = vec![0usize; names.len()];
    for img in images {
        if img.is_empty() {
            continue;
        }
        match scope {
            AgreementScope::Quality => {
                let fused = fuse_quality(img)?;
                image_counts[fused.index()] += 1;
            }
            AgreementScope::Explanations => {
                for kind in fuse_explanations(img).iter() {
                    image_counts[kind.index()] += 1;
                }
            }
        }
    }

    let entries = names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let (mean_f1, std_f1) = population_stats(&per_name_f1s[i]);
            AgreementEntry {
                name: name.to_string(),
                mean_f1,
                std_f1,
                pairs: per_name_f1s[i].len(),
                image_count: image_counts[i],
            }
        })
        .collect();

    Ok(AgreementReport {
        scope,
        entries,
        total_images: images.len(),
        rater_count: raters.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::raters::{simulate_raters, RaterProfile};
    use crate::types::{ExplanationSet, FusedRecord};
    use rand::Rng;

    fn ann(id: &str, q: QualityClass, ex: &[ExplanationKind]) -> RaterAnnotation {
        RaterAnnotation {
            rater_id: id.into(),
            quality: q,
            explanations: ex.to_vec(),
        }
    }

    #[test]
    fn identical_raters_agree_perfectly() {
        let mut rng = crate::rng::stream(2, "agree-test", 0);
        let images: Vec<Vec<RaterAnnotation>> = (0..50)
            .map(|_| {
                let q = QualityClass::from_index(rng.gen_range(0..4)).unwrap();
                let ex = if q == QualityClass::PoorQuality {
                    vec![ExplanationKind::Blurry]
                } else {
                    vec![]
                };
                vec![ann("a", q, &ex), ann("b", q, &ex)]
            })
            .collect();
        let report = pairwise_interrater(&images, AgreementScope::Quality).unwrap();
        for entry in &report.entries {
            if let Some(mean) = entry.mean_f1 {
                assert_eq!(mean, 1.0);
                assert_eq!(entry.std_f1, Some(0.0));
            }
        }
    }

    #[test]
    fn fewer_than_two_raters_is_an_error() {
        let images = vec![vec![ann("solo", QualityClass::Lesion, &[])]];
        assert!(pairwise_interrater(&images, AgreementScope::Quality).is_err());
    }

    #[test]
    fn f1_is_symmetric_in_pair_order() {
        // Swapping reference/prediction exchanges FP and FN; F1 is unchanged.
        let t = ConfusionTally { tp: 3, fp: 2, fn_: 5, tn: 1 };
        let swapped = ConfusionTally { tp: 3, fp: 5, fn_: 2, tn: 1 };
        assert_eq!(f1(&t), f1(&swapped));
    }

    /// Independent oracle: enumerate all pairs and recount per image.
    fn oracle_quality(images: &[Vec<RaterAnnotation>]) -> Vec<Vec<f64>> {
        let mut raters = BTreeSet::new();
        for img in images {
            for a in img {
                raters.insert(a.rater_id.clone());
            }
        }
        let raters: Vec<String> = raters.into_iter().collect();
        let mut out = vec![Vec::new(); 4];
        for i in 0..raters.len() {
            for j in (i + 1)..raters.len() {
                for (ci, class) in QualityClass::ALL.into_iter().enumerate() {
                    let (mut tp, mut fp, mut fn_, mut any) = (0usize, 0usize, 0usize, false);
                    for img in images {
                        let (Some(a), Some(b)) = (find(img, &raters[i]), find(img, &raters[j]))
                        else {
                            continue;
                        };
                        any = true;
                        match (a.quality == class, b.quality == class) {
                            (true, true) => tp += 1,
                            (false, true) => fp += 1,
                            (true, false) => fn_ += 1,
                            _ => {}
                        }
                    }
                    if any && 2 * tp + fp + fn_ > 0 {
                        out[ci].push(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_pair_enumeration_oracle_on_simulated_raters() {
        let profiles: Vec<RaterProfile> = (0..3)
            .map(|i| RaterProfile::with_accuracy(format!("r{i}"), 0.7, 0.2, 0.1))
            .collect();
        let mut rng = crate::rng::stream(9, "oracle-test", 0);
        let images: Vec<Vec<RaterAnnotation>> = (0..200u64)
            .map(|img| {
                let truth = FusedRecord {
                    quality: QualityClass::from_index(rng.gen_range(0..4)).unwrap(),
                    explanations: ExplanationSet::from_kinds(&[ExplanationKind::BadLight]),
                };
                simulate_raters(&truth, &profiles, img).unwrap()
            })
            .collect();

        let report = pairwise_interrater(&images, AgreementScope::Quality).unwrap();
        let oracle = oracle_quality(&images);
        for (entry, f1s) in report.entries.iter().zip(&oracle) {
            assert_eq!(entry.pairs, f1s.len());
            let (mean, std) = population_stats(f1s);
            assert_eq!(entry.mean_f1, mean);
            assert_eq!(entry.std_f1, std);
        }
    }

    #[test]
    fn invariant_under_rater_relabeling_and_image_reorder() {
        let mut rng = crate::rng::stream(4, "relabel-test", 0);
        let images: Vec<Vec<RaterAnnotation>> = (0..60)
            .map(|_| {
                ["x", "y", "z"]
                    .iter()
                    .map(|id| {
                        ann(
                            id,
                            QualityClass::from_index(rng.gen_range(0..4)).unwrap(),
                            &[],
                        )
                    })
                    .collect()
            })
            .collect();
        let base = pairwise_interrater(&images, AgreementScope::Quality).unwrap();

        let mut renamed: Vec<Vec<RaterAnnotation>> = images
            .iter()
            .map(|img| {
                img.iter()
                    .map(|a| RaterAnnotation {
                        rater_id: format!("rater-{}", a.rater_id),
                        ..a.clone()
                    })
                    .collect()
            })
            .collect();
        renamed.reverse();
        let permuted = pairwise_interrater(&renamed, AgreementScope::Quality).unwrap();
        for (a, b) in base.entries.iter().zip(&permuted.entries) {
            assert_eq!(a.mean_f1, b.mean_f1);
            assert_eq!(a.std_f1, b.std_f1);
            assert_eq!(a.image_count, b.image_count);
        }
    }
}
