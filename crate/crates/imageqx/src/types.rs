//! Shared label vocabulary: quality classes, poor-quality explanations, and
//! per-rater annotations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-image quality verdict. `Lesion` stands for every diagnosable image.
///
/// The declaration order is the canonical index order used for one-hot
/// encodings and argmax tie-breaking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityClass {
    Lesion,
    NoSkin,
    HealthySkin,
    PoorQuality,
}

impl QualityClass {
    pub const COUNT: usize = 4;
    pub const ALL: [QualityClass; 4] = [
        QualityClass::Lesion,
        QualityClass::NoSkin,
        QualityClass::HealthySkin,
        QualityClass::PoorQuality,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<QualityClass> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            QualityClass::Lesion => "lesion",
            QualityClass::NoSkin => "no_skin",
            QualityClass::HealthySkin => "healthy_skin",
            QualityClass::PoorQuality => "poor_quality",
        }
    }

    pub fn parse(s: &str) -> Result<QualityClass> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown quality class `{s}`")))
    }

    /// Plurality tie-break priority: higher wins.
    /// poor_quality > no_skin > healthy_skin > lesion.
    pub fn tie_priority(self) -> u8 {
        match self {
            QualityClass::PoorQuality => 3,
            QualityClass::NoSkin => 2,
            QualityClass::HealthySkin => 1,
            QualityClass::Lesion => 0,
        }
    }
}

/// Reason a poor-quality image cannot be diagnosed. The declaration order is
/// the canonical order for all 5-element vector encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplanationKind {
    BadFraming,
    BadLight,
    Blurry,
    LowResolution,
    TooFarAway,
}

impl ExplanationKind {
    pub const COUNT: usize = 5;
    pub const ALL: [ExplanationKind; 5] = [
        ExplanationKind::BadFraming,
        ExplanationKind::BadLight,
        ExplanationKind::Blurry,
        ExplanationKind::LowResolution,
        ExplanationKind::TooFarAway,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<ExplanationKind> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ExplanationKind::BadFraming => "bad_framing",
            ExplanationKind::BadLight => "bad_light",
            ExplanationKind::Blurry => "blurry",
            ExplanationKind::LowResolution => "low_resolution",
            ExplanationKind::TooFarAway => "too_far_away",
        }
    }

    pub fn parse(s: &str) -> Result<ExplanationKind> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown explanation kind `{s}`")))
    }
}

/// Fixed-order set of explanation kinds, the 5-element binary vector used for
/// training targets and fusion output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct ExplanationSet {
    bits: [bool; ExplanationKind::COUNT],
}

impl ExplanationSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_kinds(kinds: &[ExplanationKind]) -> Self {
        let mut s = Self::default();
        for &k in kinds {
            s.insert(k);
        }
        s
    }

    pub fn insert(&mut self, kind: ExplanationKind) {
        self.bits[kind.index()] = true;
    }

    pub fn contains(&self, kind: ExplanationKind) -> bool {
        self.bits[kind.index()]
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|b| !b)
    }

    pub fn union(&self, other: &ExplanationSet) -> ExplanationSet {
        let mut bits = [false; ExplanationKind::COUNT];
        for i in 0..ExplanationKind::COUNT {
            bits[i] = self.bits[i] || other.bits[i];
        }
        ExplanationSet { bits }
    }

    /// Binary vector in canonical kind order.
    pub fn as_vector(&self) -> [u8; ExplanationKind::COUNT] {
        let mut v = [0u8; ExplanationKind::COUNT];
        for i in 0..ExplanationKind::COUNT {
            v[i] = self.bits[i] as u8;
        }
        v
    }

    pub fn iter(&self) -> impl Iterator<Item = ExplanationKind> + '_ {
        ExplanationKind::ALL
            .into_iter()
            .filter(move |k| self.bits[k.index()])
    }

    pub fn to_names(&self) -> Vec<String> {
        self.iter().map(|k| k.name().to_string()).collect()
    }

    pub fn from_names(names: &[String]) -> Result<Self> {
        let mut s = Self::default();
        for n in names {
            s.insert(ExplanationKind::parse(n)?);
        }
        Ok(s)
    }
}

impl FromIterator<ExplanationKind> for ExplanationSet {
    fn from_iter<T: IntoIterator<Item = ExplanationKind>>(iter: T) -> Self {
        let mut s = Self::default();
        for k in iter {
            s.insert(k);
        }
        s
    }
}

/// One dermatologist's verdict on one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaterAnnotation {
    pub rater_id: String,
    pub quality: QualityClass,
    /// Nonempty only when `quality == PoorQuality`.
    #[serde(default)]
    pub explanations: Vec<ExplanationKind>,
}

impl RaterAnnotation {
    pub fn new(rater_id: impl Into<String>, quality: QualityClass) -> Self {
        Self {
            rater_id: rater_id.into(),
            quality,
            explanations: Vec::new(),
        }
    }

    pub fn explanation_set(&self) -> ExplanationSet {
        ExplanationSet::from_kinds(&self.explanations)
    }

    /// Explanations may be attached only to a poor-quality verdict.
    pub fn validate(&self) -> Result<()> {
        if self.quality != QualityClass::PoorQuality && !self.explanations.is_empty() {
            return Err(Error::Data(format!(
                "rater `{}` attached explanations to a `{}` verdict",
                self.rater_id,
                self.quality.name()
            )));
        }
        Ok(())
    }
}

/// Per-image training target: plurality quality class plus the union of all
/// raters' explanation sets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusedRecord {
    pub quality: QualityClass,
    pub explanations: ExplanationSet,
}
