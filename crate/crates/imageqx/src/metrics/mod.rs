//! Sensitivity, specificity, F1, model evaluation reports, and threshold
//! calibration. Undefined metrics (zero denominators) are reported as absent,
//! never as 0, and are excluded from macro means.

pub mod agreement;
pub mod report_io;

pub use agreement::{pairwise_interrater, AgreementEntry, AgreementReport, AgreementScope};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{ExplanationKind, FusedRecord, QualityClass};

/// One-vs-rest confusion counts for a single class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionTally {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionTally {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn add(&mut self, reference_positive: bool, predicted_positive: bool) {
        match (reference_positive, predicted_positive) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (true, false) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }
}

/// One-vs-rest tally of `class` over aligned label lists.
pub fn tally<T: PartialEq>(reference: &[T], predicted: &[T], class: &T) -> Result<ConfusionTally> {
    if reference.len() != predicted.len() {
        return Err(Error::Argument(format!(
            "label list length mismatch: {} vs {}",
            reference.len(),
            predicted.len()
        )));
    }
    let mut t = ConfusionTally::default();
    for (r, p) in reference.iter().zip(predicted) {
        t.add(r == class, p == class);
    }
    Ok(t)
}

/// Se = TP / (TP + FN). `None` when the denominator is zero.
pub fn sensitivity(t: &ConfusionTally) -> Option<f64> {
    ratio(t.tp, t.tp + t.fn_)
}

/// Sp = TN / (TN + FP). `None` when the denominator is zero.
pub fn specificity(t: &ConfusionTally) -> Option<f64> {
    ratio(t.tn, t.tn + t.fp)
}

/// F1 = 2TP / (2TP + FP + FN). `None` when the denominator is zero.
pub fn f1(t: &ConfusionTally) -> Option<f64> {
    ratio(2 * t.tp, 2 * t.tp + t.fp + t.fn_)
}

fn ratio(num: usize, denom: usize) -> Option<f64> {
    (denom > 0).then(|| num as f64 / denom as f64)
}

/// Mean of the defined values, or `None` when none are defined.
pub fn mean_of_defined(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = values.into_iter().flatten().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Per-class (or per-explanation) metric row. `support` counts reference
/// positives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub name: String,
    pub recall: Option<f64>,
    pub specificity: Option<f64>,
    pub f1: Option<f64>,
    pub support: usize,
}

impl MetricRow {
    fn from_tally(name: &str, t: &ConfusionTally) -> Self {
        Self {
            name: name.to_string(),
            recall: sensitivity(t),
            specificity: specificity(t),
            f1: f1(t),
            support: t.tp + t.fn_,
        }
    }
}

/// Evaluation report mirroring the quality-class and explanation tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_class: Vec<MetricRow>,
    pub per_explanation: Vec<MetricRow>,
    /// Mean of defined per-class F1 values.
    pub macro_f1: Option<f64>,
    pub macro_recall: Option<f64>,
    pub macro_specificity: Option<f64>,
    /// Mean of defined per-explanation F1 values.
    pub explanation_macro_f1: Option<f64>,
}

/// Quality prediction from a probability 4-vector: argmax, ties broken toward
/// the lowest canonical class index.
pub fn predict_quality(probs: &[f64; QualityClass::COUNT]) -> QualityClass {
    let mut best = 0;
    for (i, p) in probs.iter().enumerate().skip(1) {
        if *p > probs[best] {
            best = i;
        }
    }
    QualityClass::from_index(best).unwrap()
}

fn validate_probs(
    quality_probs: &[[f64; QualityClass::COUNT]],
    expl_probs: &[[f64; ExplanationKind::COUNT]],
    n: usize,
) -> Result<()> {
    if quality_probs.len() != n || expl_probs.len() != n {
        return Err(Error::Argument(format!(
            "expected {n} probability vectors, got {} quality / {} explanation",
            quality_probs.len(),
            expl_probs.len()
        )));
    }
    for (i, q) in quality_probs.iter().enumerate() {
        if q.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Argument(format!("quality probs out of [0,1] at item {i}")));
        }
        let sum: f64 = q.iter().sum();
        if (sum - 1.0).abs() > 1e-5 {
            return Err(Error::Argument(format!(
                "quality probs at item {i} sum to {sum}, expected 1"
            )));
        }
    }
    for (i, e) in expl_probs.iter().enumerate() {
        if e.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Argument(format!(
                "explanation probs out of [0,1] at item {i}"
            )));
        }
    }
    Ok(())
}

/// Score model outputs against fused targets. Quality prediction is the
/// argmax of the 4-vector; explanation `c` is predicted present iff
/// `expl_probs[c] >= thresholds[c]`.
pub fn evaluate_model(
    targets: &[FusedRecord],
    quality_probs: &[[f64; QualityClass::COUNT]],
    expl_probs: &[[f64; ExplanationKind::COUNT]],
    thresholds: [f64; ExplanationKind::COUNT],
) -> Result<MetricReport> {
    validate_probs(quality_probs, expl_probs, targets.len())?;

    let reference: Vec<QualityClass> = targets.iter().map(|t| t.quality).collect();
    let predicted: Vec<QualityClass> = quality_probs.iter().map(predict_quality).collect();

    let per_class: Vec<MetricRow> = QualityClass::ALL
        .into_iter()
        .map(|class| {
            let t = tally(&reference, &predicted, &class).expect("equal lengths");
            MetricRow::from_tally(class.name(), &t)
        })
        .collect();

    let per_explanation: Vec<MetricRow> = ExplanationKind::ALL
        .into_iter()
        .map(|kind| {
            let mut t = ConfusionTally::default();
            for (target, probs) in targets.iter().zip(expl_probs) {
                let truth = target.explanations.contains(kind);
                let pred = probs[kind.index()] >= thresholds[kind.index()];
                t.add(truth, pred);
            }
            MetricRow::from_tally(kind.name(), &t)
        })
        .collect();

    Ok(MetricReport {
        macro_f1: mean_of_defined(per_class.iter().map(|r| r.f1)),
        macro_recall: mean_of_defined(per_class.iter().map(|r| r.recall)),
        macro_specificity: mean_of_defined(per_class.iter().map(|r| r.specificity)),
        explanation_macro_f1: mean_of_defined(per_explanation.iter().map(|r| r.f1)),
        per_class,
        per_explanation,
    })
}

/// One calibration row: metrics with predicted-positive = score >= threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub threshold: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub f1: Option<f64>,
    pub recommended: bool,
}

/// Sweep a threshold grid over binary poor-quality scores. The row with the
/// highest defined F1 (lowest threshold on ties) is flagged as recommended.
pub fn calibrate_threshold(
    scores: &[f64],
    targets: &[bool],
    grid: &[f64],
) -> Result<Vec<ThresholdRow>> {
    if grid.is_empty() {
        return Err(Error::Argument("threshold grid is empty".into()));
    }
    if grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Argument("threshold grid must be sorted ascending".into()));
    }
    if scores.len() != targets.len() {
        return Err(Error::Argument(format!(
            "scores/targets length mismatch: {} vs {}",
            scores.len(),
            targets.len()
        )));
    }
    if scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
        return Err(Error::Argument("scores must lie in [0,1]".into()));
    }

    let mut rows: Vec<ThresholdRow> = grid
        .iter()
        .map(|&threshold| {
            let mut t = ConfusionTally::default();
            for (&score, &truth) in scores.iter().zip(targets) {
                t.add(truth, score >= threshold);
            }
            ThresholdRow {
                threshold,
                sensitivity: sensitivity(&t),
                specificity: specificity(&t),
                f1: f1(&t),
                recommended: false,
            }
        })
        .collect();

    let best = rows
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.f1.map(|f| (i, f)))
        .max_by(|(ia, fa), (ib, fb)| fa.partial_cmp(fb).unwrap().then(ib.cmp(ia)));
    if let Some((i, _)) = best {
        rows[i].recommended = true;
    }
    Ok(rows)
}
