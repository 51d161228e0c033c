//! Hoeffding adaptive tree for the two-class problem.
//!
//! Leaves keep per-class Gaussian estimators for every numeric slot they
//! observe and try a binary split every `grace_period` units of weight. A
//! split is taken when the information-gain gap between the two best
//! candidates exceeds the Hoeffding bound, or when the bound itself drops
//! below the tie threshold.
//!
//! Every node also feeds an ADWIN detector with the 0/1 error of its
//! subtree. When the error rises, an alternate subtree is grown in the
//! background; once both have seen enough samples the alternate replaces
//! the original if it is significantly better, or is discarded if it is
//! significantly worse.

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adwin::{Adwin, DriftStatus};
use super::gnb::{gaussian_log_density, softmax};
use super::{class_index, hoeffding_bound, ClassProbabilities, OnlineClassifier};
use crate::extraction::Label;
use crate::features::{NamedVector, SlotId};
use crate::stats::Welford;

const SWITCH_SIGNIFICANCE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeafPrediction {
    MajorityClass,
    NaiveBayes,
    NaiveBayesAdaptive,
}

/// How many slots a leaf may consider when looking for a split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaxFeatures {
    All,
    Sqrt,
    Count(usize),
}

impl MaxFeatures {
    pub fn resolve(self, available: usize) -> usize {
        match self {
            MaxFeatures::All => available,
            MaxFeatures::Sqrt => ((available as f64).sqrt().round() as usize).max(1),
            MaxFeatures::Count(k) => k.max(1),
        }
        .min(available)
    }
}

impl FromStr for MaxFeatures {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all" => Ok(MaxFeatures::All),
            "sqrt" => Ok(MaxFeatures::Sqrt),
            n => n
                .parse::<usize>()
                .map(MaxFeatures::Count)
                .map_err(|_| format!("expected `all`, `sqrt` or a count, got `{n}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HatcParams {
    pub grace_period: f64,
    pub split_confidence: f64,
    pub tie_threshold: f64,
    /// `None` means unlimited depth.
    pub max_depth: Option<usize>,
    /// Growth stops once the estimated tree size exceeds this many MiB.
    pub max_size_mib: f64,
    pub split_points: usize,
    pub leaf_prediction: LeafPrediction,
    pub adwin_delta: f64,
    /// Samples both a subtree and its alternate must have seen before they
    /// are compared.
    pub switch_min_samples: u64,
    pub max_features: MaxFeatures,
    pub min_branch_fraction: f64,
}

impl Default for HatcParams {
    fn default() -> Self {
        Self {
            grace_period: 200.0,
            split_confidence: 1e-7,
            tie_threshold: 0.5,
            max_depth: None,
            max_size_mib: 50.0,
            split_points: 10,
            leaf_prediction: LeafPrediction::NaiveBayesAdaptive,
            adwin_delta: 0.002,
            switch_min_samples: 300,
            max_features: MaxFeatures::All,
            min_branch_fraction: 0.01,
        }
    }
}

fn normal_cdf(x: f64, mean: f64, sd: f64) -> f64 {
    if sd <= 0.0 {
        return if x >= mean { 1.0 } else { 0.0 };
    }
    0.5 * libm::erfc(-(x - mean) / (sd * std::f64::consts::SQRT_2))
}

fn entropy(dist: &[f64; 2]) -> f64 {
    let total: f64 = dist.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    dist.iter()
        .filter(|w| **w > 0.0)
        .map(|w| {
            let p = w / total;
            -p * p.log2()
        })
        .sum()
}

fn info_gain(pre: &[f64; 2], branches: &[[f64; 2]; 2], min_branch_fraction: f64) -> f64 {
    let weights = [branches[0].iter().sum::<f64>(), branches[1].iter().sum::<f64>()];
    let total = weights[0] + weights[1];
    if total <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if weights.iter().filter(|w| **w / total > min_branch_fraction).count() < 2 {
        return f64::NEG_INFINITY;
    }
    let post: f64 = weights
        .iter()
        .zip(branches)
        .map(|(w, b)| w / total * entropy(b))
        .sum();
    entropy(pre) - post
}

/// Per-class Gaussian estimate of one numeric slot.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct SlotObserver {
    classes: [Welford; 2],
    min: [f64; 2],
    max: [f64; 2],
}

impl SlotObserver {
    fn update(&mut self, value: f64, class: usize, weight: f64) {
        if self.classes[class].weight() <= 0.0 {
            self.min[class] = value;
            self.max[class] = value;
        } else {
            self.min[class] = self.min[class].min(value);
            self.max[class] = self.max[class].max(value);
        }
        self.classes[class].update(value, weight);
    }

    fn log_density(&self, class: usize, value: f64) -> Option<f64> {
        let w = &self.classes[class];
        (w.weight() > 0.0).then(|| gaussian_log_density(value, w.mean(), w.population_variance()))
    }

    fn range(&self) -> Option<(f64, f64)> {
        let seen: Vec<usize> = (0..2).filter(|c| self.classes[*c].weight() > 0.0).collect();
        let lo = seen.iter().map(|c| self.min[*c]).reduce(f64::min)?;
        let hi = seen.iter().map(|c| self.max[*c]).reduce(f64::max)?;
        Some((lo, hi))
    }

    /// Estimated class weights on each side of `threshold` (left is `<=`).
    fn split_distribution(&self, threshold: f64) -> [[f64; 2]; 2] {
        let mut out = [[0.0; 2]; 2];
        for c in 0..2 {
            let w = &self.classes[c];
            if w.weight() <= 0.0 {
                continue;
            }
            let left = if threshold < self.min[c] {
                0.0
            } else if threshold >= self.max[c] {
                w.weight()
            } else {
                normal_cdf(threshold, w.mean(), w.population_variance().sqrt()) * w.weight()
            };
            out[0][c] = left;
            out[1][c] = w.weight() - left;
        }
        out
    }

    fn best_split(&self, pre: &[f64; 2], params: &HatcParams) -> Option<SplitSuggestion> {
        let (lo, hi) = self.range()?;
        if hi <= lo {
            return None;
        }
        let step = (hi - lo) / (params.split_points + 1) as f64;
        (1..=params.split_points)
            .map(|i| {
                let threshold = lo + step * i as f64;
                let branches = self.split_distribution(threshold);
                let merit = info_gain(pre, &branches, params.min_branch_fraction);
                (merit, threshold, branches)
            })
            .filter(|(m, _, _)| m.is_finite())
            .max_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(merit, threshold, branches)| SplitSuggestion {
                slot: None,
                merit,
                threshold,
                branches,
            })
    }
}

struct SplitSuggestion {
    slot: Option<SlotId>,
    merit: f64,
    threshold: f64,
    branches: [[f64; 2]; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Leaf {
    stats: [f64; 2],
    observers: BTreeMap<SlotId, SlotObserver>,
    subset: Option<Vec<SlotId>>,
    subset_chosen: bool,
    last_attempt_weight: f64,
    mc_correct: f64,
    nb_correct: f64,
    error: Adwin,
    depth: usize,
}

impl Leaf {
    fn new(depth: usize, stats: [f64; 2], delta: f64) -> Self {
        Self {
            stats,
            observers: BTreeMap::new(),
            subset: None,
            subset_chosen: false,
            last_attempt_weight: stats[0] + stats[1],
            mc_correct: 0.0,
            nb_correct: 0.0,
            error: Adwin::new(delta),
            depth,
        }
    }

    fn weight(&self) -> f64 {
        self.stats[0] + self.stats[1]
    }

    fn is_pure(&self) -> bool {
        self.stats.iter().filter(|w| **w > 0.0).count() < 2
    }

    fn majority_proba(&self) -> ClassProbabilities {
        ClassProbabilities::from_weights(self.stats[0], self.stats[1])
    }

    fn naive_bayes_proba(&self, x: &NamedVector) -> ClassProbabilities {
        let total = self.weight();
        if total <= 0.0 {
            return ClassProbabilities::uniform();
        }
        let score = |class: usize| -> Option<f64> {
            let prior = self.stats[class];
            if prior <= 0.0 {
                return None;
            }
            let mut s = (prior / total).ln();
            for (slot, value) in x {
                if let Some(d) = self.observers.get(slot).and_then(|o| o.log_density(class, *value)) {
                    s += d;
                }
            }
            Some(s)
        };
        softmax(score(0), score(1))
    }

    fn proba(&self, x: &NamedVector, mode: LeafPrediction) -> ClassProbabilities {
        match mode {
            LeafPrediction::MajorityClass => self.majority_proba(),
            LeafPrediction::NaiveBayes => self.naive_bayes_proba(x),
            LeafPrediction::NaiveBayesAdaptive => {
                if self.nb_correct > self.mc_correct {
                    self.naive_bayes_proba(x)
                } else {
                    self.majority_proba()
                }
            }
        }
    }

    fn learn(&mut self, x: &NamedVector, y: Label, weight: f64, ctx: &mut Context<'_>) {
        let class = class_index(y);
        if ctx.params.leaf_prediction == LeafPrediction::NaiveBayesAdaptive {
            if self.majority_proba().label() == y {
                self.mc_correct += weight;
            }
            if self.naive_bayes_proba(x).label() == y {
                self.nb_correct += weight;
            }
        }
        self.stats[class] += weight;
        if !self.subset_chosen {
            self.subset_chosen = true;
            let available: Vec<SlotId> = x.keys().copied().collect();
            let m = ctx.params.max_features.resolve(available.len());
            if m < available.len() {
                let mut picked: Vec<SlotId> = sample(ctx.rng, available.len(), m)
                    .into_iter()
                    .map(|i| available[i])
                    .collect();
                picked.sort();
                self.subset = Some(picked);
            }
        }
        match &self.subset {
            None => {
                for (slot, value) in x {
                    self.observers.entry(*slot).or_default().update(*value, class, weight);
                }
            }
            Some(subset) => {
                for slot in subset {
                    if let Some(value) = x.get(slot) {
                        self.observers.entry(*slot).or_default().update(*value, class, weight);
                    }
                }
            }
        }
    }

    fn attempt_split(&self, params: &HatcParams) -> Option<SplitNode> {
        if self.is_pure() || params.max_depth.is_some_and(|d| self.depth >= d) {
            return None;
        }
        let mut suggestions: Vec<SplitSuggestion> = self
            .observers
            .iter()
            .filter_map(|(slot, obs)| {
                obs.best_split(&self.stats, params).map(|mut s| {
                    s.slot = Some(*slot);
                    s
                })
            })
            .collect();
        suggestions.sort_by(|a, b| b.merit.total_cmp(&a.merit));
        let best = suggestions.first()?;
        let second = suggestions.get(1).map_or(0.0, |s| s.merit.max(0.0));
        let epsilon = hoeffding_bound(1.0, params.split_confidence, self.weight()).ok()?;
        if best.merit > 0.0 && (best.merit - second > epsilon || epsilon < params.tie_threshold) {
            let depth = self.depth + 1;
            let [left, right] = best.branches;
            Some(SplitNode {
                slot: best.slot?,
                threshold: best.threshold,
                children: [
                    Node::Leaf(Leaf::new(depth, left, params.adwin_delta)),
                    Node::Leaf(Leaf::new(depth, right, params.adwin_delta)),
                ],
                branch_weight: [left[0] + left[1], right[0] + right[1]],
                stats: self.stats,
                error: self.error.clone(),
                alternate: None,
                depth: self.depth,
            })
        } else {
            None
        }
    }

    fn estimated_bytes(&self) -> usize {
        std::mem::size_of::<Leaf>()
            + self.observers.len() * (std::mem::size_of::<SlotObserver>() + std::mem::size_of::<SlotId>() + 16)
            + adwin_bytes(&self.error)
    }
}

fn adwin_bytes(a: &Adwin) -> usize {
    std::mem::size_of::<Adwin>() + 64 * (a.width().max(1).ilog2() as usize + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SplitNode {
    slot: SlotId,
    threshold: f64,
    children: [Node; 2],
    branch_weight: [f64; 2],
    stats: [f64; 2],
    error: Adwin,
    alternate: Option<Node>,
    depth: usize,
}

impl SplitNode {
    /// Slot present: `<=` goes left. Slot missing: follow the heavier branch.
    fn branch_for(&self, x: &NamedVector) -> usize {
        match x.get(&self.slot) {
            Some(v) => usize::from(*v > self.threshold),
            None => usize::from(self.branch_weight[1] > self.branch_weight[0]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Node {
    Leaf(Leaf),
    Split(Box<SplitNode>),
}

struct Context<'a> {
    params: &'a HatcParams,
    rng: &'a mut ChaCha8Rng,
    growth_allowed: bool,
}

impl Node {
    fn error(&self) -> &Adwin {
        match self {
            Node::Leaf(l) => &l.error,
            Node::Split(s) => &s.error,
        }
    }

    fn leaf_for(&self, x: &NamedVector) -> &Leaf {
        let mut node = self;
        loop {
            match node {
                Node::Leaf(l) => return l,
                Node::Split(s) => node = &s.children[s.branch_for(x)],
            }
        }
    }

    fn predict_label(&self, x: &NamedVector, mode: LeafPrediction) -> Label {
        self.leaf_for(x).proba(x, mode).label()
    }

    fn learn(&mut self, x: &NamedVector, y: Label, weight: f64, ctx: &mut Context<'_>) {
        let replacement = match self {
            Node::Leaf(leaf) => {
                let wrong = leaf.proba(x, ctx.params.leaf_prediction).label() != y;
                leaf.error.update(f64::from(u8::from(wrong)));
                leaf.learn(x, y, weight, ctx);
                if ctx.growth_allowed && leaf.weight() - leaf.last_attempt_weight >= ctx.params.grace_period {
                    leaf.last_attempt_weight = leaf.weight();
                    leaf.attempt_split(ctx.params).map(|s| Node::Split(Box::new(s)))
                } else {
                    None
                }
            }
            Node::Split(split) => {
                let wrong = self_predict(split, x, ctx.params.leaf_prediction) != y;
                let before = split.error.estimation();
                let drift = split.error.update(f64::from(u8::from(wrong))) == DriftStatus::Drift;
                if drift && split.error.estimation() > before && split.alternate.is_none() {
                    split.alternate = Some(Node::Leaf(Leaf::new(split.depth, [0.0; 2], ctx.params.adwin_delta)));
                }
                let mut verdict = None;
                if let Some(alt) = split.alternate.as_mut() {
                    alt.learn(x, y, weight, ctx);
                    let (n_main, n_alt) = (split.error.width(), alt.error().width());
                    if n_main > ctx.params.switch_min_samples && n_alt > ctx.params.switch_min_samples {
                        let main_err = split.error.estimation();
                        let alt_err = alt.error().estimation();
                        let bound = (2.0
                            * main_err
                            * (1.0 - main_err)
                            * (2.0 / SWITCH_SIGNIFICANCE).ln()
                            * (1.0 / n_main as f64 + 1.0 / n_alt as f64))
                            .sqrt();
                        if bound < main_err - alt_err {
                            verdict = Some(true);
                        } else if bound < alt_err - main_err {
                            verdict = Some(false);
                        }
                    }
                }
                match verdict {
                    Some(true) => split.alternate.take(),
                    other => {
                        if other == Some(false) {
                            split.alternate = None;
                        }
                        let class = class_index(y);
                        split.stats[class] += weight;
                        let branch = split.branch_for(x);
                        split.branch_weight[branch] += weight;
                        split.children[branch].learn(x, y, weight, ctx);
                        None
                    }
                }
            }
        };
        if let Some(node) = replacement {
            *self = node;
        }
    }

    fn visit<'a>(&'a self, f: &mut impl FnMut(&'a Node)) {
        f(self);
        if let Node::Split(s) = self {
            s.children.iter().for_each(|c| c.visit(f));
            if let Some(alt) = &s.alternate {
                alt.visit(f);
            }
        }
    }
}

fn self_predict(split: &SplitNode, x: &NamedVector, mode: LeafPrediction) -> Label {
    split.children[split.branch_for(x)].predict_label(x, mode)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoeffdingAdaptiveTree {
    params: HatcParams,
    root: Node,
    rng: ChaCha8Rng,
    samples: u64,
    growth_allowed: bool,
}

impl HoeffdingAdaptiveTree {
    pub fn new(params: HatcParams, seed: u64) -> Self {
        let root = Node::Leaf(Leaf::new(0, [0.0; 2], params.adwin_delta));
        Self {
            params,
            root,
            rng: ChaCha8Rng::seed_from_u64(seed),
            samples: 0,
            growth_allowed: true,
        }
    }

    pub fn params(&self) -> &HatcParams {
        &self.params
    }

    pub fn learn_weighted(&mut self, x: &NamedVector, y: Label, weight: f64) {
        if weight <= 0.0 {
            return;
        }
        self.samples += 1;
        if self.samples % 100 == 0 {
            let limit = self.params.max_size_mib * 1024.0 * 1024.0;
            self.growth_allowed = (self.estimated_bytes() as f64) <= limit;
        }
        let mut ctx = Context {
            params: &self.params,
            rng: &mut self.rng,
            growth_allowed: self.growth_allowed,
        };
        self.root.learn(x, y, weight, &mut ctx);
    }

    pub fn samples_seen(&self) -> u64 {
        self.samples
    }

    /// Rough in-memory size of the tree including alternates.
    pub fn estimated_bytes(&self) -> usize {
        let mut total = 0;
        self.root.visit(&mut |n| {
            total += match n {
                Node::Leaf(l) => l.estimated_bytes(),
                Node::Split(s) => std::mem::size_of::<SplitNode>() + adwin_bytes(&s.error),
            }
        });
        total
    }

    /// Nodes in the main tree (alternates excluded).
    pub fn node_count(&self) -> usize {
        fn count(n: &Node) -> usize {
            match n {
                Node::Leaf(_) => 1,
                Node::Split(s) => 1 + s.children.iter().map(count).sum::<usize>(),
            }
        }
        count(&self.root)
    }

    pub fn depth(&self) -> usize {
        fn depth(n: &Node) -> usize {
            match n {
                Node::Leaf(_) => 0,
                Node::Split(s) => 1 + s.children.iter().map(depth).max().unwrap_or(0),
            }
        }
        depth(&self.root)
    }

    pub fn alternate_count(&self) -> usize {
        let mut total = 0;
        self.root.visit(&mut |n| {
            if let Node::Split(s) = n {
                total += usize::from(s.alternate.is_some());
            }
        });
        total
    }

    /// Slot tested at the root, if the root has split.
    pub fn root_split(&self) -> Option<(SlotId, f64)> {
        match &self.root {
            Node::Split(s) => Some((s.slot, s.threshold)),
            Node::Leaf(_) => None,
        }
    }
}

impl OnlineClassifier for HoeffdingAdaptiveTree {
    fn learn_one(&mut self, x: &NamedVector, y: Label) {
        self.learn_weighted(x, y, 1.0);
    }

    fn predict_proba(&self, x: &NamedVector) -> ClassProbabilities {
        self.root.leaf_for(x).proba(x, self.params.leaf_prediction)
    }
}
