//! Per-session base features, per-user histories and the history expansion
//! into 110 classifier slots.
//!
//! Every base feature contributes five slots: the current value, the mean of
//! the user's history, and the three nearest-rank quartiles of that history.
//! The current session is part of its own history.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::stats::RunningMean;

pub const BASE_FEATURE_COUNT: usize = 22;
pub const SCORED_FEATURE_COUNT: usize = 20;
pub const STATISTIC_COUNT: usize = 5;
pub const SLOT_COUNT: usize = BASE_FEATURE_COUNT * STATISTIC_COUNT;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FeatureError {
    #[error("empty history")]
    EmptyHistory,
    #[error("unknown slot `{0}`")]
    UnknownSlot(String),
    #[error("quartile must be 1, 2 or 3 (got {0})")]
    InvalidQuartile(u8),
    #[error("history belongs to user `{expected}`, not `{found}`")]
    UserMismatch { expected: String, found: String },
}

/// The 22 per-session measurements. Interactions and Words are counters
/// computed from the transcript; the rest are model-scored in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BaseFeature {
    Amnesia,
    Incoherence,
    Incomprehension,
    Confusion,
    Fluency,
    Initiative,
    Repetitiveness,
    Secretive,
    Interactions,
    Words,
    HealthState,
    Fatigue,
    Loneliness,
    Polarity,
    Sadness,
    ColloquialRegistry,
    ConjugationProblems,
    Disfluency,
    FormalRegistry,
    PlaceholderWords,
    SesquipedalianWords,
    ShortResponse,
}

impl BaseFeature {
    pub const ALL: [BaseFeature; BASE_FEATURE_COUNT] = [
        BaseFeature::Amnesia,
        BaseFeature::Incoherence,
        BaseFeature::Incomprehension,
        BaseFeature::Confusion,
        BaseFeature::Fluency,
        BaseFeature::Initiative,
        BaseFeature::Repetitiveness,
        BaseFeature::Secretive,
        BaseFeature::Interactions,
        BaseFeature::Words,
        BaseFeature::HealthState,
        BaseFeature::Fatigue,
        BaseFeature::Loneliness,
        BaseFeature::Polarity,
        BaseFeature::Sadness,
        BaseFeature::ColloquialRegistry,
        BaseFeature::ConjugationProblems,
        BaseFeature::Disfluency,
        BaseFeature::FormalRegistry,
        BaseFeature::PlaceholderWords,
        BaseFeature::SesquipedalianWords,
        BaseFeature::ShortResponse,
    ];

    /// Scored features in the order their fields appear in the reply schema.
    pub const SCORED: [BaseFeature; SCORED_FEATURE_COUNT] = [
        BaseFeature::Amnesia,
        BaseFeature::Incoherence,
        BaseFeature::Incomprehension,
        BaseFeature::Confusion,
        BaseFeature::Fluency,
        BaseFeature::Initiative,
        BaseFeature::Repetitiveness,
        BaseFeature::Secretive,
        BaseFeature::HealthState,
        BaseFeature::Fatigue,
        BaseFeature::Loneliness,
        BaseFeature::Polarity,
        BaseFeature::Sadness,
        BaseFeature::ColloquialRegistry,
        BaseFeature::ConjugationProblems,
        BaseFeature::Disfluency,
        BaseFeature::FormalRegistry,
        BaseFeature::PlaceholderWords,
        BaseFeature::SesquipedalianWords,
        BaseFeature::ShortResponse,
    ];

    /// 1-based identifier (1..=22).
    pub fn id(self) -> u8 {
        self as u8 + 1
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_id(id: u8) -> Option<BaseFeature> {
        Self::ALL.get(usize::from(id).checked_sub(1)?).copied()
    }

    pub fn is_counter(self) -> bool {
        matches!(self, BaseFeature::Interactions | BaseFeature::Words)
    }

    pub fn display_name(self) -> &'static str {
        match self {
            BaseFeature::Amnesia => "Amnesia",
            BaseFeature::Incoherence => "Incoherence",
            BaseFeature::Incomprehension => "Incomprehension",
            BaseFeature::Confusion => "Confusion",
            BaseFeature::Fluency => "Fluency",
            BaseFeature::Initiative => "Initiative",
            BaseFeature::Repetitiveness => "Repetitiveness",
            BaseFeature::Secretive => "Secretive",
            BaseFeature::Interactions => "Interactions",
            BaseFeature::Words => "Words",
            BaseFeature::HealthState => "Health state",
            BaseFeature::Fatigue => "Fatigue",
            BaseFeature::Loneliness => "Loneliness",
            BaseFeature::Polarity => "Polarity",
            BaseFeature::Sadness => "Sadness",
            BaseFeature::ColloquialRegistry => "Colloquial registry",
            BaseFeature::ConjugationProblems => "Conjugation problems",
            BaseFeature::Disfluency => "Disfluency",
            BaseFeature::FormalRegistry => "Formal registry",
            BaseFeature::PlaceholderWords => "Placeholder words",
            BaseFeature::SesquipedalianWords => "Sesquipedalian words",
            BaseFeature::ShortResponse => "Short response",
        }
    }

    /// Field name used for this feature in the extraction reply, `None` for
    /// the two counters. The names are kept exactly as the prompt spells them,
    /// including the two that use a space instead of an underscore.
    pub fn reply_key(self) -> Option<&'static str> {
        Some(match self {
            BaseFeature::Amnesia => "Amnesia",
            BaseFeature::Incoherence => "Incoherence",
            BaseFeature::Incomprehension => "Incomprehension",
            BaseFeature::Confusion => "Confusion",
            BaseFeature::Fluency => "Fluency",
            BaseFeature::Initiative => "Initiative",
            BaseFeature::Repetitiveness => "Repetitiveness",
            BaseFeature::Secretive => "Secretive",
            BaseFeature::Interactions | BaseFeature::Words => return None,
            BaseFeature::HealthState => "Health_state",
            BaseFeature::Fatigue => "Fatigue",
            BaseFeature::Loneliness => "Loneliness",
            BaseFeature::Polarity => "Polarity",
            BaseFeature::Sadness => "Sadness",
            BaseFeature::ColloquialRegistry => "Colloquial_registry",
            BaseFeature::ConjugationProblems => "Conjugation_problems",
            BaseFeature::Disfluency => "Disfluency",
            BaseFeature::FormalRegistry => "Formal_registry",
            BaseFeature::PlaceholderWords => "Placeholder_words",
            BaseFeature::SesquipedalianWords => "Sesquipedalian words",
            BaseFeature::ShortResponse => "Short response",
        })
    }
}

impl fmt::Display for BaseFeature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display_name())
    }
}

/// The 20 model-scored values, indexed in reply-schema order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredFeatures([f64; SCORED_FEATURE_COUNT]);

impl ScoredFeatures {
    /// Values are clamped into [0, 1]; NaN becomes 0.
    pub fn new(values: [f64; SCORED_FEATURE_COUNT]) -> Self {
        Self(values.map(clamp_unit))
    }

    pub fn uniform(value: f64) -> Self {
        Self::new([value; SCORED_FEATURE_COUNT])
    }

    pub fn get(&self, feature: BaseFeature) -> Option<f64> {
        BaseFeature::SCORED
            .iter()
            .position(|f| *f == feature)
            .map(|i| self.0[i])
    }

    pub fn values(&self) -> &[f64; SCORED_FEATURE_COUNT] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = (BaseFeature, f64)> + '_ {
        BaseFeature::SCORED.iter().copied().zip(self.0.iter().copied())
    }
}

pub(crate) fn clamp_unit(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// The 22 base features of one closed session.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseFeatureVector {
    pub scores: ScoredFeatures,
    pub interactions: u64,
    pub words: u64,
}

impl BaseFeatureVector {
    pub fn new(scores: ScoredFeatures, interactions: u64, words: u64) -> Self {
        Self {
            scores,
            interactions,
            words,
        }
    }

    pub fn value(&self, feature: BaseFeature) -> f64 {
        match feature {
            BaseFeature::Interactions => self.interactions as f64,
            BaseFeature::Words => self.words as f64,
            scored => self.scores.get(scored).unwrap_or_default(),
        }
    }

    /// Values in feature-id order.
    pub fn to_array(&self) -> [f64; BASE_FEATURE_COUNT] {
        BaseFeature::ALL.map(|f| self.value(f))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Statistic {
    Current,
    Avg,
    Q1,
    Q2,
    Q3,
}

impl Statistic {
    pub const ALL: [Statistic; STATISTIC_COUNT] = [
        Statistic::Current,
        Statistic::Avg,
        Statistic::Q1,
        Statistic::Q2,
        Statistic::Q3,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Statistic::Current => "current",
            Statistic::Avg => "avg",
            Statistic::Q1 => "q1",
            Statistic::Q2 => "q2",
            Statistic::Q3 => "q3",
        }
    }
}

static SLOT_NAMES: LazyLock<Vec<String>> = LazyLock::new(|| {
    (0..SLOT_COUNT)
        .map(|i| {
            let slot = SlotId(i as u8);
            format!("f{}.{}", slot.feature().id(), slot.statistic().label())
        })
        .collect()
});

/// One of the 110 expanded slots, named `f<id>.<statistic>` (e.g. `f6.q3`).
///
/// Ordering is the canonical slot order (feature-major), which is not the
/// lexicographic order of the names; use [`SlotId::name`] where name order
/// matters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SlotId(u8);

impl SlotId {
    pub fn new(feature: BaseFeature, statistic: Statistic) -> Self {
        SlotId((feature.index() * STATISTIC_COUNT + statistic as usize) as u8)
    }

    pub fn from_index(index: usize) -> Option<Self> {
        (index < SLOT_COUNT).then_some(SlotId(index as u8))
    }

    pub fn index(self) -> usize {
        usize::from(self.0)
    }

    pub fn feature(self) -> BaseFeature {
        BaseFeature::ALL[self.index() / STATISTIC_COUNT]
    }

    pub fn statistic(self) -> Statistic {
        Statistic::ALL[self.index() % STATISTIC_COUNT]
    }

    pub fn name(self) -> &'static str {
        &SLOT_NAMES[self.index()]
    }

    pub fn is_counter(self) -> bool {
        self.feature().is_counter()
    }

    pub fn all() -> impl Iterator<Item = SlotId> {
        (0..SLOT_COUNT).map(|i| SlotId(i as u8))
    }
}

impl fmt::Display for SlotId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SlotId {
    type Err = FeatureError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SLOT_NAMES
            .iter()
            .position(|n| n == s)
            .map(|i| SlotId(i as u8))
            .ok_or_else(|| FeatureError::UnknownSlot(s.to_string()))
    }
}

impl Serialize for SlotId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for SlotId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let name = String::deserialize(deserializer)?;
        name.parse().map_err(serde::de::Error::custom)
    }
}

/// A sparse vector keyed by slot; this is what classifiers consume.
pub type NamedVector = BTreeMap<SlotId, f64>;

/// Mean of the full series, kept inside `[min, max]` despite rounding.
pub fn series_mean(series: &[f64]) -> Result<f64, FeatureError> {
    if series.is_empty() {
        return Err(FeatureError::EmptyHistory);
    }
    let lo = series.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = series.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((series.iter().sum::<f64>() / series.len() as f64).clamp(lo, hi))
}

/// Zero-based index of quartile `q` in a sorted series of length `n`:
/// `round_half_up(q * n / 4)`, clamped to the last element.
pub fn quartile_index(q: u8, n: usize) -> usize {
    let raw = (usize::from(q) * n + 2) / 4;
    raw.min(n.saturating_sub(1))
}

/// Nearest-rank quartile of an unsorted series (no interpolation).
pub fn series_quartile(series: &[f64], q: u8) -> Result<f64, FeatureError> {
    if !(1..=3).contains(&q) {
        return Err(FeatureError::InvalidQuartile(q));
    }
    if series.is_empty() {
        return Err(FeatureError::EmptyHistory);
    }
    let mut sorted = series.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[quartile_index(q, sorted.len())])
}

/// Append-only per-user record of base feature values, one series per feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserHistory {
    user_id: String,
    series: Vec<Vec<f64>>,
}

impl UserHistory {
    pub fn new(user_id: impl Into<String>) -> Self {
        Self {
            user_id: user_id.into(),
            series: vec![Vec::new(); BASE_FEATURE_COUNT],
        }
    }

    pub fn user_id(&self) -> &str {
        &self.user_id
    }

    /// Number of sessions observed.
    pub fn len(&self) -> usize {
        self.series[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn append(&mut self, v: &BaseFeatureVector) {
        for (series, value) in self.series.iter_mut().zip(v.to_array()) {
            series.push(value);
        }
    }

    pub fn series(&self, feature: BaseFeature) -> &[f64] {
        &self.series[feature.index()]
    }

    pub fn running_average(&self, feature: BaseFeature) -> Result<f64, FeatureError> {
        series_mean(self.series(feature))
    }

    pub fn quartile(&self, feature: BaseFeature, q: u8) -> Result<f64, FeatureError> {
        series_quartile(self.series(feature), q)
    }

    /// Expands `current` against this history. `current` must already have
    /// been appended.
    pub fn expand(&self, current: &BaseFeatureVector) -> Result<ExpandedFeatureVector, FeatureError> {
        if self.is_empty() {
            return Err(FeatureError::EmptyHistory);
        }
        let mut values = Vec::with_capacity(SLOT_COUNT);
        for feature in BaseFeature::ALL {
            let mut sorted = self.series(feature).to_vec();
            sorted.sort_by(f64::total_cmp);
            let n = sorted.len();
            values.push(current.value(feature));
            values.push(series_mean(self.series(feature))?);
            for q in 1..=3 {
                values.push(sorted[quartile_index(q, n)]);
            }
        }
        Ok(ExpandedFeatureVector { values })
    }
}

/// Appends `v` to `history` and returns the expansion of `v`.
pub fn append_and_expand(
    history: &mut UserHistory,
    v: &BaseFeatureVector,
) -> Result<ExpandedFeatureVector, FeatureError> {
    history.append(v);
    history.expand(v)
}

/// Dense vector over all 110 slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpandedFeatureVector {
    values: Vec<f64>,
}

impl ExpandedFeatureVector {
    pub fn from_values(values: Vec<f64>) -> Option<Self> {
        (values.len() == SLOT_COUNT).then_some(Self { values })
    }

    pub fn get(&self, slot: SlotId) -> Option<f64> {
        self.values.get(slot.index()).copied()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (SlotId, f64)> + '_ {
        SlotId::all().zip(self.values.iter().copied())
    }

    pub fn to_named(&self) -> NamedVector {
        self.iter().collect()
    }
}

/// Running population statistics of the two counters across every session
/// of every user.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PopulationStats {
    interactions: RunningMean,
    words: RunningMean,
}

impl PopulationStats {
    pub fn update(&mut self, v: &BaseFeatureVector) {
        self.interactions.push(v.interactions as f64);
        self.words.push(v.words as f64);
    }

    pub fn sessions(&self) -> u64 {
        self.interactions.count()
    }

    fn counter(&self, feature: BaseFeature) -> Option<&RunningMean> {
        match feature {
            BaseFeature::Interactions => Some(&self.interactions),
            BaseFeature::Words => Some(&self.words),
            _ => None,
        }
    }

    /// Population mean of a counter feature; `None` for scored features or
    /// before any session.
    pub fn mean(&self, feature: BaseFeature) -> Option<f64> {
        self.counter(feature).filter(|m| m.count() > 0).map(|m| m.mean())
    }

    pub fn range(&self, feature: BaseFeature) -> Option<(f64, f64)> {
        self.counter(feature)
            .filter(|m| m.count() > 0)
            .map(|m| (m.min(), m.max()))
    }

    /// Min-max normalization of a counter value against the population range.
    pub fn normalize(&self, feature: BaseFeature, value: f64) -> Option<f64> {
        let (lo, hi) = self.range(feature)?;
        if hi > lo {
            Some(((value - lo) / (hi - lo)).clamp(0.0, 1.0))
        } else {
            Some(0.0)
        }
    }
}
