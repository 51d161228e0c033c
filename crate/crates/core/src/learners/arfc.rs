//! Adaptive random forest built from Hoeffding adaptive trees.
//!
//! Each member sees every sample with a Poisson(λ) weight and restricts
//! every leaf to a random subset of slots. Per-member ADWIN detectors on the
//! 0/1 error start a background tree on a warning and swap it in on drift.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use super::adwin::{Adwin, DriftStatus};
use super::hatc::{HatcParams, HoeffdingAdaptiveTree, LeafPrediction, MaxFeatures};
use super::{ClassProbabilities, OnlineClassifier};
use crate::extraction::Label;
use crate::features::NamedVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArfcParams {
    pub n_models: usize,
    pub max_features: MaxFeatures,
    pub lambda: f64,
    /// When false every member sees each sample with weight 1.
    pub poisson: bool,
    pub warning_delta: f64,
    pub drift_delta: f64,
    pub weighted_vote: bool,
    pub grace_period: f64,
    pub split_confidence: f64,
    pub tie_threshold: f64,
    pub max_depth: Option<usize>,
}

impl Default for ArfcParams {
    fn default() -> Self {
        Self {
            n_models: 10,
            max_features: MaxFeatures::Sqrt,
            lambda: 6.0,
            poisson: true,
            warning_delta: 0.01,
            drift_delta: 0.001,
            weighted_vote: true,
            grace_period: 50.0,
            split_confidence: 0.01,
            tie_threshold: 0.05,
            max_depth: None,
        }
    }
}

impl ArfcParams {
    /// Hyperparameters handed to every member tree.
    pub fn tree_params(&self) -> HatcParams {
        HatcParams {
            grace_period: self.grace_period,
            split_confidence: self.split_confidence,
            tie_threshold: self.tie_threshold,
            max_depth: self.max_depth,
            leaf_prediction: LeafPrediction::NaiveBayesAdaptive,
            max_features: self.max_features,
            ..HatcParams::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Member {
    tree: HoeffdingAdaptiveTree,
    background: Option<HoeffdingAdaptiveTree>,
    warning: Adwin,
    drift: Adwin,
    correct: f64,
    seen: f64,
    resets: u64,
}

impl Member {
    fn new(params: &ArfcParams, seed: u64) -> Self {
        Self {
            tree: HoeffdingAdaptiveTree::new(params.tree_params(), seed),
            background: None,
            warning: Adwin::new(params.warning_delta),
            drift: Adwin::new(params.drift_delta),
            correct: 0.0,
            seen: 0.0,
            resets: 0,
        }
    }

    fn accuracy(&self) -> f64 {
        if self.seen > 0.0 {
            self.correct / self.seen
        } else {
            0.0
        }
    }
}

/// True when the detector fired and the error estimate went up.
fn rising(detector: &mut Adwin, error: f64) -> bool {
    let before = detector.estimation();
    detector.update(error) == DriftStatus::Drift && detector.estimation() > before
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveRandomForest {
    params: ArfcParams,
    members: Vec<Member>,
    rng: ChaCha8Rng,
}

impl AdaptiveRandomForest {
    pub fn new(params: ArfcParams, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let members = (0..params.n_models.max(1))
            .map(|_| Member::new(&params, rng.random()))
            .collect();
        Self { params, members, rng }
    }

    /// Seeds given to the initial member trees of a forest built with `seed`.
    pub fn member_seeds(seed: u64, n_models: usize) -> Vec<u64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n_models.max(1)).map(|_| rng.random()).collect()
    }

    pub fn params(&self) -> &ArfcParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Total number of member trees replaced after a drift.
    pub fn resets(&self) -> u64 {
        self.members.iter().map(|m| m.resets).sum()
    }

    pub fn background_count(&self) -> usize {
        self.members.iter().filter(|m| m.background.is_some()).count()
    }

    fn draw_weight(&mut self) -> f64 {
        if !self.params.poisson {
            return 1.0;
        }
        match Poisson::new(self.params.lambda) {
            Ok(dist) => dist.sample(&mut self.rng),
            Err(_) => 1.0,
        }
    }
}

impl OnlineClassifier for AdaptiveRandomForest {
    fn learn_one(&mut self, x: &NamedVector, y: Label) {
        for i in 0..self.members.len() {
            let weight = self.draw_weight();
            let fresh_seed: u64 = self.rng.random();
            let params = self.params.clone();
            let member = &mut self.members[i];
            let wrong = member.tree.predict(x) != y;
            member.seen += 1.0;
            if !wrong {
                member.correct += 1.0;
            }
            if weight > 0.0 {
                member.tree.learn_weighted(x, y, weight);
                if let Some(bg) = member.background.as_mut() {
                    bg.learn_weighted(x, y, weight);
                }
            }
            let error = f64::from(u8::from(wrong));
            if rising(&mut member.warning, error) {
                member.background = Some(HoeffdingAdaptiveTree::new(params.tree_params(), fresh_seed));
                member.warning = Adwin::new(params.warning_delta);
            }
            if rising(&mut member.drift, error) {
                let replacement = member
                    .background
                    .take()
                    .unwrap_or_else(|| HoeffdingAdaptiveTree::new(params.tree_params(), fresh_seed));
                member.tree = replacement;
                member.warning = Adwin::new(params.warning_delta);
                member.drift = Adwin::new(params.drift_delta);
                member.correct = 0.0;
                member.seen = 0.0;
                member.resets += 1;
            }
        }
    }

    fn predict_proba(&self, x: &NamedVector) -> ClassProbabilities {
        let votes: Vec<ClassProbabilities> = self.members.iter().map(|m| m.tree.predict_proba(x)).collect();
        let mut weights: Vec<f64> = if self.params.weighted_vote {
            self.members.iter().map(Member::accuracy).collect()
        } else {
            vec![1.0; self.members.len()]
        };
        if weights.iter().sum::<f64>() <= 0.0 {
            weights.iter_mut().for_each(|w| *w = 1.0);
        }
        if let [only] = votes.as_slice() {
            return *only;
        }
        let (present, absent) = votes
            .iter()
            .zip(&weights)
            .fold((0.0, 0.0), |(p, a), (v, w)| (p + w * v.present, a + w * v.absent));
        ClassProbabilities::from_weights(present, absent)
    }
}
