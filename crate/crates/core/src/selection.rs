//! Streaming feature selection over the 110 expanded slots.
//!
//! Two selectors are available: a K-best selector ranking slots by absolute
//! Pearson correlation with the target, and a variance threshold whose
//! cut-off is calibrated on a cold-start block of the stream. Either one
//! falls back to the full mask rather than ever returning an empty one.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extraction::Label;
use crate::features::{ExpandedFeatureVector, FeatureError, NamedVector, SlotId, SLOT_COUNT};
use crate::stats::{batch_population_variance, Welford};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelectionError {
    #[error("unknown slot `{0}`")]
    UnknownSlot(String),
    #[error("selection mask is empty")]
    EmptyMask,
    #[error("cold start needs at least 2 samples (got {0})")]
    WarmupTooShort(usize),
}

impl From<FeatureError> for SelectionError {
    fn from(e: FeatureError) -> Self {
        match e {
            FeatureError::UnknownSlot(name) => SelectionError::UnknownSlot(name),
            other => SelectionError::UnknownSlot(other.to_string()),
        }
    }
}

/// Subset of slot names admitted to the classifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionMask {
    slots: BTreeSet<SlotId>,
}

impl SelectionMask {
    pub fn full() -> Self {
        Self {
            slots: SlotId::all().collect(),
        }
    }

    pub fn from_slots(slots: impl IntoIterator<Item = SlotId>) -> Self {
        Self {
            slots: slots.into_iter().collect(),
        }
    }

    pub fn from_names<S: AsRef<str>>(names: impl IntoIterator<Item = S>) -> Result<Self, SelectionError> {
        let slots = names
            .into_iter()
            .map(|n| n.as_ref().parse::<SlotId>())
            .collect::<Result<BTreeSet<_>, _>>()?;
        Ok(Self { slots })
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.slots.len() == SLOT_COUNT
    }

    pub fn contains(&self, slot: SlotId) -> bool {
        self.slots.contains(&slot)
    }

    pub fn slots(&self) -> impl Iterator<Item = SlotId> + '_ {
        self.slots.iter().copied()
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.slots.iter().map(|s| s.name()).collect()
    }

    fn or_full(self) -> Self {
        if self.is_empty() {
            Self::full()
        } else {
            self
        }
    }
}

/// Projects `x` onto the masked slots.
pub fn apply_mask(x: &ExpandedFeatureVector, mask: &SelectionMask) -> Result<NamedVector, SelectionError> {
    if mask.is_empty() {
        return Err(SelectionError::EmptyMask);
    }
    mask.slots()
        .map(|slot| {
            x.get(slot)
                .map(|v| (slot, v))
                .ok_or_else(|| SelectionError::UnknownSlot(slot.name().to_string()))
        })
        .collect()
}

/// Per-slot co-moments against the binary target. Kept in centered form
/// (means plus sums of products of deviations) instead of raw power sums so
/// that large counters do not lose precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationState {
    count: u64,
    mean_y: f64,
    m2_y: f64,
    mean_x: Vec<f64>,
    m2_x: Vec<f64>,
    c_xy: Vec<f64>,
}

impl Default for CorrelationState {
    fn default() -> Self {
        Self {
            count: 0,
            mean_y: 0.0,
            m2_y: 0.0,
            mean_x: vec![0.0; SLOT_COUNT],
            m2_x: vec![0.0; SLOT_COUNT],
            c_xy: vec![0.0; SLOT_COUNT],
        }
    }
}

impl CorrelationState {
    pub fn update(&mut self, x: &ExpandedFeatureVector, y: f64) {
        self.update_values(x.values(), y);
    }

    pub fn update_values(&mut self, xs: &[f64], y: f64) {
        self.count += 1;
        let n = self.count as f64;
        let dy = y - self.mean_y;
        self.mean_y += dy / n;
        let dy_new = y - self.mean_y;
        self.m2_y += dy * dy_new;
        for (i, &x) in xs.iter().enumerate().take(SLOT_COUNT) {
            let dx = x - self.mean_x[i];
            self.mean_x[i] += dx / n;
            self.m2_x[i] += dx * (x - self.mean_x[i]);
            self.c_xy[i] += dx * dy_new;
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Pearson r of a slot; 0 when either side has no variance.
    pub fn correlation(&self, slot: SlotId) -> f64 {
        let i = slot.index();
        let denom = (self.m2_x[i] * self.m2_y).sqrt();
        if self.m2_x[i] <= 0.0 || self.m2_y <= 0.0 || !denom.is_finite() || denom == 0.0 {
            return 0.0;
        }
        (self.c_xy[i] / denom).clamp(-1.0, 1.0)
    }

    pub fn correlations(&self) -> Vec<(SlotId, f64)> {
        SlotId::all().map(|s| (s, self.correlation(s))).collect()
    }
}

/// The `k` slots with largest |r|; ties go to the lexicographically smaller
/// slot name.
pub fn select_k_best(state: &CorrelationState, k: usize) -> SelectionMask {
    let k = k.min(SLOT_COUNT);
    if k == 0 {
        return SelectionMask::full();
    }
    let mut ranked = state.correlations();
    ranked.sort_by(|(sa, ra), (sb, rb)| {
        rb.abs()
            .total_cmp(&ra.abs())
            .then_with(|| sa.name().cmp(sb.name()))
    });
    SelectionMask::from_slots(ranked.into_iter().take(k).map(|(s, _)| s))
}

/// Nearest-rank percentile of an unsorted sample (`percentile` in [0, 100]).
pub fn nearest_rank_percentile(values: &[f64], percentile: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = (percentile.clamp(0.0, 100.0) * n as f64 / 100.0).ceil() as usize;
    Some(sorted[rank.clamp(1, n) - 1])
}

/// Per-slot population variances over a block of expanded vectors.
pub fn block_variances(block: &[ExpandedFeatureVector]) -> Vec<f64> {
    SlotId::all()
        .map(|slot| {
            let column: Vec<f64> = block.iter().filter_map(|x| x.get(slot)).collect();
            batch_population_variance(&column)
        })
        .collect()
}

/// Cut-off calibrated as the given percentile of per-slot variances over
/// the warm-up block.
pub fn variance_cold_start(warmup: &[ExpandedFeatureVector], percentile: f64) -> Result<f64, SelectionError> {
    if warmup.len() < 2 {
        return Err(SelectionError::WarmupTooShort(warmup.len()));
    }
    Ok(nearest_rank_percentile(&block_variances(warmup), percentile).unwrap_or(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectorMode {
    Correlation,
    Variance,
}

impl std::str::FromStr for SelectorMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "correlation" => Ok(SelectorMode::Correlation),
            "variance" => Ok(SelectorMode::Variance),
            other => Err(format!("unknown selector `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorConfig {
    pub mode: SelectorMode,
    /// Correlation: |r| cut that fixes K (default 0.2). Variance: a fixed
    /// cut-off that replaces the cold-start calibration.
    pub threshold: Option<f64>,
    /// Expected stream length used to size warm-up blocks.
    pub horizon: usize,
    /// Fraction of the horizon after which K is frozen.
    pub correlation_warmup: f64,
    pub min_k: usize,
    /// Fraction of the horizon used as the variance cold start.
    pub variance_warmup: f64,
    pub variance_percentile: f64,
}

impl SelectorConfig {
    pub fn new(mode: SelectorMode, horizon: usize) -> Self {
        Self {
            mode,
            threshold: None,
            horizon,
            correlation_warmup: 0.8,
            min_k: 5,
            variance_warmup: 0.2,
            variance_percentile: 10.0,
        }
    }

    fn warmup_len(&self, fraction: f64) -> usize {
        ((self.horizon as f64 * fraction).ceil() as usize).max(2)
    }
}

/// K-best by |r| where K is re-derived from the |r| cut on every step
/// until the warm-up is over, then frozen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSelector {
    state: CorrelationState,
    threshold: f64,
    min_k: usize,
    freeze_after: usize,
    frozen_k: Option<usize>,
}

impl CorrelationSelector {
    pub fn new(threshold: f64, min_k: usize, freeze_after: usize) -> Self {
        Self {
            state: CorrelationState::default(),
            threshold,
            min_k,
            freeze_after,
            frozen_k: None,
        }
    }

    pub fn state(&self) -> &CorrelationState {
        &self.state
    }

    pub fn frozen_k(&self) -> Option<usize> {
        self.frozen_k
    }

    fn provisional_k(&self) -> usize {
        let above = self
            .state
            .correlations()
            .iter()
            .filter(|(_, r)| r.abs() > self.threshold)
            .count();
        above.max(self.min_k).min(SLOT_COUNT)
    }

    pub fn update(&mut self, x: &ExpandedFeatureVector, y: Label) {
        self.state.update(x, y.as_target());
        if self.frozen_k.is_none() && self.state.count() as usize >= self.freeze_after {
            self.frozen_k = Some(self.provisional_k());
        }
    }

    pub fn mask(&self) -> SelectionMask {
        if self.state.count() < 2 {
            return SelectionMask::full();
        }
        let k = self.frozen_k.unwrap_or_else(|| self.provisional_k());
        select_k_best(&self.state, k).or_full()
    }
}

/// Running per-slot variances plus the cold-start threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceState {
    running: Vec<Welford>,
    warmup: Vec<ExpandedFeatureVector>,
    warmup_len: usize,
    percentile: f64,
    threshold: Option<f64>,
}

impl VarianceState {
    pub fn new(warmup_len: usize, percentile: f64) -> Self {
        Self {
            running: vec![Welford::default(); SLOT_COUNT],
            warmup: Vec::new(),
            warmup_len: warmup_len.max(2),
            percentile,
            threshold: None,
        }
    }

    /// Skips calibration and uses a fixed cut-off from the first sample.
    pub fn with_fixed_threshold(threshold: f64) -> Self {
        Self {
            threshold: Some(threshold),
            ..Self::new(2, 10.0)
        }
    }

    pub fn update(&mut self, x: &ExpandedFeatureVector) {
        for (w, v) in self.running.iter_mut().zip(x.values()) {
            w.push(*v);
        }
        if self.threshold.is_none() {
            self.warmup.push(x.clone());
            if self.warmup.len() >= self.warmup_len {
                let threshold = variance_cold_start(&self.warmup, self.percentile)
                    .expect("warm-up block holds at least two samples");
                self.threshold = Some(threshold);
                self.warmup.clear();
            }
        }
    }

    pub fn cold_start_done(&self) -> bool {
        self.threshold.is_some()
    }

    pub fn threshold(&self) -> Option<f64> {
        self.threshold
    }

    pub fn variance(&self, slot: SlotId) -> f64 {
        self.running[slot.index()].population_variance()
    }

    pub fn samples(&self) -> u64 {
        self.running[0].weight() as u64
    }
}

/// Slots whose running variance exceeds the cut-off. Before the cold start
/// completes every slot is selected.
pub fn select_by_variance(state: &VarianceState) -> SelectionMask {
    match state.threshold {
        None => SelectionMask::full(),
        Some(threshold) => SelectionMask::from_slots(SlotId::all().filter(|s| state.variance(*s) > threshold)).or_full(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FeatureSelector {
    Correlation(CorrelationSelector),
    Variance(VarianceState),
}

impl FeatureSelector {
    pub fn new(config: &SelectorConfig) -> Self {
        match config.mode {
            SelectorMode::Correlation => FeatureSelector::Correlation(CorrelationSelector::new(
                config.threshold.unwrap_or(0.2),
                config.min_k,
                config.warmup_len(config.correlation_warmup),
            )),
            SelectorMode::Variance => FeatureSelector::Variance(match config.threshold {
                Some(t) => VarianceState::with_fixed_threshold(t),
                None => VarianceState::new(config.warmup_len(config.variance_warmup), config.variance_percentile),
            }),
        }
    }

    /// Correlation statistics only advance on labelled samples.
    pub fn update(&mut self, x: &ExpandedFeatureVector, label: Option<Label>) {
        match self {
            FeatureSelector::Correlation(c) => {
                if let Some(y) = label {
                    c.update(x, y);
                }
            }
            FeatureSelector::Variance(v) => v.update(x),
        }
    }

    pub fn mask(&self) -> SelectionMask {
        match self {
            FeatureSelector::Correlation(c) => c.mask(),
            FeatureSelector::Variance(v) => select_by_variance(v),
        }
    }
}
