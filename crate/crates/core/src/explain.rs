//! Explanations attached to each prediction: the slots that deviate most
//! from their reference, colour bands, short sentences, and the per-user
//! probability trajectory.

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{ExpandedFeatureVector, PopulationStats, SlotId, Statistic};
use crate::pipeline::PredictionRecord;

pub const TOP_FEATURES: usize = 5;

/// Default trajectory window.
pub fn two_weeks() -> Duration {
    Duration::days(14)
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ExplainError {
    #[error("no predictions recorded for user `{0}`")]
    NoRecords(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Green,
    Yellow,
    Red,
}

/// Bands by modulus: `(0.5, 1]` green, `(0.25, 0.5]` yellow, `[0, 0.25]` red.
pub fn color_band(display_value: f64) -> Color {
    let v = display_value.abs().min(1.0);
    if v > 0.5 {
        Color::Green
    } else if v > 0.25 {
        Color::Yellow
    } else {
        Color::Red
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationItem {
    pub slot: SlotId,
    pub statistic: Statistic,
    pub value: f64,
    pub reference: f64,
    /// Signed distance from the reference; counters are scaled by the
    /// population range.
    pub deviation: f64,
    pub color: Color,
    pub description: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    FarAbove,
    Above,
    Near,
    Below,
    FarBelow,
}

impl Direction {
    pub fn of(deviation: f64) -> Self {
        if deviation >= 0.5 {
            Direction::FarAbove
        } else if deviation > 0.25 {
            Direction::Above
        } else if deviation <= -0.5 {
            Direction::FarBelow
        } else if deviation < -0.25 {
            Direction::Below
        } else {
            Direction::Near
        }
    }

    pub fn phrase(self) -> &'static str {
        match self {
            Direction::FarAbove => "far above",
            Direction::Above => "above",
            Direction::Near => "near",
            Direction::Below => "below",
            Direction::FarBelow => "far below",
        }
    }
}

pub fn describe(item: &ExplanationItem) -> String {
    let whose = if item.slot.is_counter() {
        "typical population level"
    } else {
        "user's typical level"
    };
    format!(
        "{} ({}) is {} the {} ({:.2} vs {:.2})",
        item.slot.feature().display_name(),
        item.statistic.label(),
        Direction::of(item.deviation).phrase(),
        whose,
        item.value,
        item.reference
    )
}

/// Relevance of one slot: `(value, reference, signed deviation, display value)`.
fn score_slot(x: &ExpandedFeatureVector, population: &PopulationStats, slot: SlotId) -> (f64, f64, f64, f64) {
    let feature = slot.feature();
    let value = x.get(slot).unwrap_or(0.0);
    if slot.is_counter() {
        let reference = population.mean(feature).unwrap_or(value);
        let deviation = match population.range(feature) {
            Some((lo, hi)) if hi > lo => (value - reference) / (hi - lo),
            _ => 0.0,
        };
        let display = population.normalize(feature, value).unwrap_or(0.0);
        (value, reference, deviation, display)
    } else {
        let reference = x.get(SlotId::new(feature, Statistic::Avg)).unwrap_or(value);
        (value, reference, value - reference, value)
    }
}

/// The `TOP_FEATURES` slots furthest from their reference. The reference of
/// a scored slot is the user's running average of that feature; counters are
/// compared with the population mean. Ties go to the larger |value|, then to
/// slot-name order.
pub fn select_top_features(x: &ExpandedFeatureVector, population: &PopulationStats) -> Vec<ExplanationItem> {
    let mut scored: Vec<(SlotId, (f64, f64, f64, f64))> =
        SlotId::all().map(|s| (s, score_slot(x, population, s))).collect();
    scored.sort_by(|(sa, a), (sb, b)| {
        b.2.abs()
            .total_cmp(&a.2.abs())
            .then(b.0.abs().total_cmp(&a.0.abs()))
            .then(sa.name().cmp(sb.name()))
    });
    scored
        .into_iter()
        .take(TOP_FEATURES)
        .map(|(slot, (value, reference, deviation, display))| {
            let mut item = ExplanationItem {
                slot,
                statistic: slot.statistic(),
                value,
                reference,
                deviation,
                color: color_band(display),
                description: String::new(),
            };
            item.description = describe(&item);
            item
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub t: DateTime<Utc>,
    pub p: f64,
    pub session_id: String,
}

/// The user's `present` probabilities in `[now - window, now]`, time-ordered.
/// `window = None` keeps everything up to `now`.
pub fn trajectory(
    user_id: &str,
    records: &[PredictionRecord],
    window: Option<Duration>,
    now: DateTime<Utc>,
) -> Vec<TrajectoryPoint> {
    let start = window.map(|w| now - w);
    let mut points: Vec<TrajectoryPoint> = records
        .iter()
        .filter(|r| r.user_id == user_id && r.timestamp <= now && start.is_none_or(|s| r.timestamp >= s))
        .map(|r| TrajectoryPoint {
            t: r.timestamp,
            p: r.probabilities.present,
            session_id: r.session_id.clone(),
        })
        .collect();
    points.sort_by_key(|p| p.t);
    points
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccumulatedConfidence {
    pub mean: f64,
    pub current: f64,
}

/// Mean `present` probability over every record of the user, plus the latest.
pub fn accumulated_confidence(user_id: &str, records: &[PredictionRecord]) -> Result<AccumulatedConfidence, ExplainError> {
    let mine: Vec<f64> = records
        .iter()
        .filter(|r| r.user_id == user_id)
        .map(|r| r.probabilities.present)
        .collect();
    let current = *mine.last().ok_or_else(|| ExplainError::NoRecords(user_id.to_string()))?;
    Ok(AccumulatedConfidence {
        mean: mine.iter().sum::<f64>() / mine.len() as f64,
        current,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPayloadPoint {
    pub t: DateTime<Utc>,
    pub p: f64,
}

/// Document served next to each prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationPayload {
    pub items: Vec<ExplanationItem>,
    pub trajectory: Vec<TrajectoryPayloadPoint>,
    pub accumulated: Option<AccumulatedConfidence>,
}

impl ExplanationPayload {
    pub fn build(
        items: Vec<ExplanationItem>,
        user_id: &str,
        records: &[PredictionRecord],
        window: Option<Duration>,
        now: DateTime<Utc>,
    ) -> Self {
        Self {
            items,
            trajectory: trajectory(user_id, records, window, now)
                .into_iter()
                .map(|p| TrajectoryPayloadPoint { t: p.t, p: p.p })
                .collect(),
            accumulated: accumulated_confidence(user_id, records).ok(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{BaseFeature, BaseFeatureVector, ScoredFeatures, UserHistory};

    fn item(feature: BaseFeature, stat: Statistic, value: f64, reference: f64) -> ExplanationItem {
        ExplanationItem {
            slot: SlotId::new(feature, stat),
            statistic: stat,
            value,
            reference,
            deviation: value - reference,
            color: color_band(value),
            description: String::new(),
        }
    }

    #[test]
    fn bands() {
        assert_eq!(color_band(0.8), Color::Green);
        assert_eq!(color_band(0.3), Color::Yellow);
        assert_eq!(color_band(-0.1), Color::Red);
        assert_eq!(color_band(0.5), Color::Yellow);
        assert_eq!(color_band(0.25), Color::Red);
        assert_eq!(color_band(-0.75), Color::Green);
        assert_eq!(color_band(7.0), Color::Green);
    }

    #[test]
    fn description_template() {
        let it = item(BaseFeature::Initiative, Statistic::Current, 0.1, 0.6);
        assert_eq!(
            describe(&it),
            "Initiative (current) is far below the user's typical level (0.10 vs 0.60)"
        );
        let flat = item(BaseFeature::Fatigue, Statistic::Q2, 0.4, 0.4);
        assert!(describe(&flat).contains(" is near the user's typical level "));
        let counter = item(BaseFeature::Words, Statistic::Current, 30.0, 30.0);
        assert!(describe(&counter).ends_with("typical population level (30.00 vs 30.00)"));
    }

    #[test]
    fn directions() {
        assert_eq!(Direction::of(0.3), Direction::Above);
        assert_eq!(Direction::of(0.25), Direction::Near);
        assert_eq!(Direction::of(-0.26), Direction::Below);
        assert_eq!(Direction::of(0.51), Direction::FarAbove);
        assert_eq!(Direction::of(-0.5), Direction::FarBelow);
    }

    #[test]
    fn singleton_history_ranks_counters_first() {
        let v = BaseFeatureVector::new(ScoredFeatures::uniform(0.4), 6, 50);
        let mut h = UserHistory::new("u");
        h.append(&v);
        let mut pop = PopulationStats::default();
        pop.update(&v);
        let x = h.expand(&v).unwrap();
        let top = select_top_features(&x, &pop);
        assert_eq!(top.len(), 5);
        assert!(top.iter().all(|i| i.slot.feature() == BaseFeature::Words));
    }
}
