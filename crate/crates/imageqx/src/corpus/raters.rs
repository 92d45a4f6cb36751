//! Simulated rater panels: fixture generator for the fusion and agreement
//! modules. Each rater draws its quality verdict from a per-class confusion
//! row and perturbs the truth explanation set.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::types::{ExplanationKind, FusedRecord, QualityClass, RaterAnnotation};

pub const MAX_RATERS: usize = 12;

/// Behavioral model of one simulated rater.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaterProfile {
    pub id: String,
    /// `confusion[t][p]` = probability of answering class `p` when the truth
    /// is class `t`. Rows must sum to 1.
    pub confusion: [[f64; QualityClass::COUNT]; QualityClass::COUNT],
    /// Probability of dropping a true explanation.
    pub explanation_miss_rate: f64,
    /// Probability of adding a spurious explanation.
    pub explanation_false_alarm_rate: f64,
}

impl RaterProfile {
    /// Rater that always answers the truth.
    pub fn perfect(id: impl Into<String>) -> Self {
        let mut confusion = [[0.0; 4]; 4];
        for (i, row) in confusion.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        Self {
            id: id.into(),
            confusion,
            explanation_miss_rate: 0.0,
            explanation_false_alarm_rate: 0.0,
        }
    }

    /// Rater with `accuracy` on the diagonal and the rest spread uniformly.
    pub fn with_accuracy(id: impl Into<String>, accuracy: f64, miss: f64, false_alarm: f64) -> Self {
        let off = (1.0 - accuracy) / (QualityClass::COUNT - 1) as f64;
        let mut confusion = [[off; 4]; 4];
        for (i, row) in confusion.iter_mut().enumerate() {
            row[i] = accuracy;
        }
        Self {
            id: id.into(),
            confusion,
            explanation_miss_rate: miss,
            explanation_false_alarm_rate: false_alarm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (t, row) in self.confusion.iter().enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::Config(format!(
                    "rater `{}`: confusion row {t} has probabilities outside [0,1]",
                    self.id
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Config(format!(
                    "rater `{}`: confusion row {t} sums to {sum}, expected 1",
                    self.id
                )));
            }
        }
        for (name, rate) in [
            ("miss", self.explanation_miss_rate),
            ("false-alarm", self.explanation_false_alarm_rate),
        ] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(Error::Config(format!(
                    "rater `{}`: explanation {name} rate {rate} outside [0,1]",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

fn sample_class(row: &[f64; 4], u: f64) -> QualityClass {
    let mut acc = 0.0;
    for (i, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return QualityClass::from_index(i).unwrap();
        }
    }
    QualityClass::PoorQuality
}

/// Simulate one panel's annotations for an image with known truth.
/// Deterministic per `(truth, profiles, seed)`.
pub fn simulate_raters(
    truth: &FusedRecord,
    profiles: &[RaterProfile],
    seed: u64,
) -> Result<Vec<RaterAnnotation>> {
    if profiles.is_empty() || profiles.len() > MAX_RATERS {
        return Err(Error::Argument(format!(
            "rater panel size must be 1..={MAX_RATERS}, got {}",
            profiles.len()
        )));
    }
    for p in profiles {
        p.validate()?;
    }

    let mut annotations = Vec::with_capacity(profiles.len());
    for (i, profile) in profiles.iter().enumerate() {
        let mut rng = stream(seed, "rater", i as u64);
        let quality = sample_class(&profile.confusion[truth.quality.index()], rng.gen::<f64>());
        let mut explanations = Vec::new();
        if quality == QualityClass::PoorQuality {
            for kind in ExplanationKind::ALL {
                let present = if truth.explanations.contains(kind) {
                    rng.gen::<f64>() >= profile.explanation_miss_rate
                } else {
                    rng.gen::<f64>() < profile.explanation_false_alarm_rate
                };
                if present {
                    explanations.push(kind);
                }
            }
        }
        annotations.push(RaterAnnotation {
            rater_id: profile.id.clone(),
            quality,
            explanations,
        });
    }
    Ok(annotations)
}

/// Compact panel description used in corpus configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RaterSimConfig {
    pub raters: usize,
    pub accuracy: f64,
    pub explanation_miss_rate: f64,
    pub explanation_false_alarm_rate: f64,
}

impl Default for RaterSimConfig {
    fn default() -> Self {
        Self {
            raters: 3,
            accuracy: 0.9,
            explanation_miss_rate: 0.1,
            explanation_false_alarm_rate: 0.05,
        }
    }
}

impl RaterSimConfig {
    pub fn to_profiles(&self) -> Result<Vec<RaterProfile>> {
        if self.raters == 0 || self.raters > MAX_RATERS {
            return Err(Error::Config(format!(
                "raters must be 1..={MAX_RATERS}, got {}",
                self.raters
            )));
        }
        Ok((0..self.raters)
            .map(|i| {
                RaterProfile::with_accuracy(
                    format!("sim-{i:02}"),
                    self.accuracy,
                    self.explanation_miss_rate,
                    self.explanation_false_alarm_rate,
                )
            })
            .collect())
    }
}
