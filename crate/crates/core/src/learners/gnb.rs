use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ClassProbabilities, OnlineClassifier};
use crate::extraction::Label;
use crate::features::{NamedVector, SlotId};
use crate::stats::Welford;

/// Variance floor applied before evaluating a density.
pub const VARIANCE_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub weight: f64,
    pub slots: BTreeMap<SlotId, Welford>,
}

/// Gaussian naive Bayes with per-class, per-slot running moments.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GaussianNb {
    classes: BTreeMap<Label, ClassStats>,
}

pub(crate) fn gaussian_log_density(x: f64, mean: f64, variance: f64) -> f64 {
    let var = variance.max(VARIANCE_FLOOR);
    let diff = x - mean;
    -0.5 * (2.0 * std::f64::consts::PI * var).ln() - diff * diff / (2.0 * var)
}

/// Normalizes per-class log scores; classes without a score get 0.
pub(crate) fn softmax(present: Option<f64>, absent: Option<f64>) -> ClassProbabilities {
    match (present, absent) {
        (None, None) => ClassProbabilities::uniform(),
        (Some(_), None) => ClassProbabilities::new(1.0, 0.0),
        (None, Some(_)) => ClassProbabilities::new(0.0, 1.0),
        (Some(p), Some(a)) => {
            let m = p.max(a);
            let (ep, ea) = ((p - m).exp(), (a - m).exp());
            ClassProbabilities::from_weights(ep, ea)
        }
    }
}

impl GaussianNb {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn class_stats(&self, label: Label) -> Option<&ClassStats> {
        self.classes.get(&label)
    }

    /// Log prior plus the summed log densities of the slots the class has
    /// seen; `None` for a class never trained on.
    pub fn joint_log_likelihood(&self, x: &NamedVector, label: Label) -> Option<f64> {
        let total: f64 = self.classes.values().map(|c| c.weight).sum();
        let stats = self.classes.get(&label).filter(|c| c.weight > 0.0)?;
        let mut score = (stats.weight / total).ln();
        for (slot, value) in x {
            if let Some(w) = stats.slots.get(slot) {
                score += gaussian_log_density(*value, w.mean(), w.population_variance());
            }
        }
        Some(score)
    }
}

impl OnlineClassifier for GaussianNb {
    fn learn_one(&mut self, x: &NamedVector, y: Label) {
        let stats = self.classes.entry(y).or_default();
        stats.weight += 1.0;
        for (slot, value) in x {
            stats.slots.entry(*slot).or_default().push(*value);
        }
    }

    fn predict_proba(&self, x: &NamedVector) -> ClassProbabilities {
        softmax(
            self.joint_log_likelihood(x, Label::Present),
            self.joint_log_likelihood(x, Label::Absent),
        )
    }
}
