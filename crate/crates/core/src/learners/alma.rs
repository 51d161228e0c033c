use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ClassProbabilities, OnlineClassifier};
use crate::extraction::Label;
use crate::features::{NamedVector, SlotId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlmaParams {
    pub alpha: f64,
    pub b: f64,
    pub c: f64,
}

impl Default for AlmaParams {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            b: 1.0,
            c: 1.0,
        }
    }
}

/// Approximate large margin algorithm with p = 2.
///
/// Inputs are scaled to unit L2 norm. A margin violation
/// `y·⟨w,x⟩ ≤ (1-α)·B/√k` triggers `w ← w + (C/√k)·y·x` followed by
/// projection onto the unit ball, and advances `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alma {
    params: AlmaParams,
    weights: BTreeMap<SlotId, f64>,
    k: u64,
}

fn unit(x: &NamedVector) -> Vec<(SlotId, f64)> {
    let norm = x.values().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 && norm.is_finite() {
        x.iter().map(|(s, v)| (*s, v / norm)).collect()
    } else {
        Vec::new()
    }
}

impl Alma {
    pub fn new(params: AlmaParams) -> Self {
        Self {
            params,
            weights: BTreeMap::new(),
            k: 1,
        }
    }

    pub fn params(&self) -> AlmaParams {
        self.params
    }

    pub fn updates(&self) -> u64 {
        self.k - 1
    }

    pub fn weights(&self) -> &BTreeMap<SlotId, f64> {
        &self.weights
    }

    pub fn weight_norm(&self) -> f64 {
        self.weights.values().map(|w| w * w).sum::<f64>().sqrt()
    }

    fn dot(&self, x: &[(SlotId, f64)]) -> f64 {
        x.iter()
            .filter_map(|(s, v)| self.weights.get(s).map(|w| w * v))
            .sum()
    }

    /// Raw score ⟨w, x/‖x‖⟩.
    pub fn decision(&self, x: &NamedVector) -> f64 {
        self.dot(&unit(x))
    }
}

impl OnlineClassifier for Alma {
    fn learn_one(&mut self, x: &NamedVector, y: Label) {
        let x = unit(x);
        let sign = y.as_sign();
        let k = self.k as f64;
        let gamma = self.params.b / k.sqrt();
        if sign * self.dot(&x) <= (1.0 - self.params.alpha) * gamma {
            let eta = self.params.c / k.sqrt();
            for (slot, v) in &x {
                *self.weights.entry(*slot).or_insert(0.0) += eta * sign * v;
            }
            let norm = self.weight_norm();
            if norm > 1.0 {
                self.weights.values_mut().for_each(|w| *w /= norm);
            }
            self.k += 1;
        }
    }

    fn predict_proba(&self, x: &NamedVector) -> ClassProbabilities {
        let p = 1.0 / (1.0 + (-self.decision(x)).exp());
        ClassProbabilities::new(p, 1.0 - p)
    }
}
