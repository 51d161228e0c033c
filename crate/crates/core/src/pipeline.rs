//! The prequential loop: extract, expand, select, predict, then train.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::explain::{select_top_features, ExplanationItem};
use crate::extraction::{extract_base_features, DialogueSession, ExtractionError, ExtractionTransport, Label};
use crate::features::{BaseFeatureVector, FeatureError, NamedVector, PopulationStats, UserHistory};
use crate::learners::{ClassProbabilities, Model, ModelSpec, OnlineClassifier};
use crate::selection::{apply_mask, FeatureSelector, SelectionError, SelectorConfig};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Extraction(#[from] ExtractionError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error("session `{0}` has no utterances")]
    EmptySession(String),
}

/// Training policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Scenario {
    /// Test then train on every labelled sample.
    TestThenTrain,
    /// Train on the most recent block whenever the counter hits a multiple
    /// of the block size.
    Blocks,
}

impl TryFrom<u8> for Scenario {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            1 => Ok(Scenario::TestThenTrain),
            2 => Ok(Scenario::Blocks),
            other => Err(format!("scenario must be 1 or 2, got {other}")),
        }
    }
}

impl From<Scenario> for u8 {
    fn from(s: Scenario) -> u8 {
        match s {
            Scenario::TestThenTrain => 1,
            Scenario::Blocks => 2,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", u8::from(*self))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub scenario: Scenario,
    pub model: ModelSpec,
    pub selector: SelectorConfig,
    pub block_size: usize,
    pub seed: u64,
}

impl RunConfig {
    pub fn new(scenario: Scenario, model: ModelSpec, selector: SelectorConfig, seed: u64) -> Self {
        Self {
            scenario,
            model,
            selector,
            block_size: 100,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainAction {
    TrainNowSingle,
    TrainBlock,
    Skip,
}

/// `count` is the 1-based number of labelled samples seen so far.
pub fn should_train(scenario: Scenario, block_size: usize, count: u64) -> TrainAction {
    match scenario {
        Scenario::TestThenTrain => TrainAction::TrainNowSingle,
        Scenario::Blocks => {
            let block = block_size.max(1) as u64;
            if count > 0 && count % block == 0 {
                TrainAction::TrainBlock
            } else {
                TrainAction::Skip
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn record(&mut self, truth: Label, predicted: Label) {
        match (truth, predicted) {
            (Label::Present, Label::Present) => self.tp += 1,
            (Label::Absent, Label::Present) => self.fp += 1,
            (Label::Present, Label::Absent) => self.fn_ += 1,
            (Label::Absent, Label::Absent) => self.tn += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassRates {
    #[serde(rename = "macro")]
    pub macro_avg: f64,
    pub present: f64,
    pub absent: f64,
}

impl ClassRates {
    fn new(present: f64, absent: f64) -> Self {
        Self {
            macro_avg: (present + absent) / 2.0,
            present,
            absent,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub samples: u64,
    pub accuracy: f64,
    pub precision: ClassRates,
    pub recall: ClassRates,
    pub confusion: ConfusionMatrix,
    /// Classification loop time.
    pub elapsed_seconds: f64,
    pub extraction_seconds: f64,
}

impl MetricsSnapshot {
    /// Rates derived from a confusion matrix; 0/0 counts as 0.
    pub fn from_confusion(c: ConfusionMatrix) -> Self {
        Self {
            samples: c.total(),
            accuracy: ratio(c.tp + c.tn, c.total()),
            precision: ClassRates::new(ratio(c.tp, c.tp + c.fp), ratio(c.tn, c.tn + c.fn_)),
            recall: ClassRates::new(ratio(c.tp, c.tp + c.fn_), ratio(c.tn, c.tn + c.fp)),
            confusion: c,
            elapsed_seconds: 0.0,
            extraction_seconds: 0.0,
        }
    }

    pub fn update(&self, truth: Label, predicted: Label) -> Self {
        let mut c = self.confusion;
        c.record(truth, predicted);
        Self {
            elapsed_seconds: self.elapsed_seconds,
            extraction_seconds: self.extraction_seconds,
            ..Self::from_confusion(c)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub user_id: String,
    pub session_id: String,
    pub predicted: Label,
    pub probabilities: ClassProbabilities,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<Label>,
    pub selected: usize,
    pub timestamp: DateTime<Utc>,
    pub explanation: Vec<ExplanationItem>,
}

/// Model hashes around one step, for auditing the prequential order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub hash_before_predict: String,
    pub hash_after_train: Option<String>,
    pub input: NamedVector,
    pub action: TrainAction,
    /// Session ids of the samples trained on in this step, oldest first.
    pub trained_on: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub record: PredictionRecord,
    pub action: TrainAction,
    pub trace: Option<StepTrace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BufferedSample {
    session_id: String,
    input: NamedVector,
    label: Label,
}

/// All mutable state of one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pipeline {
    config: RunConfig,
    histories: BTreeMap<String, UserHistory>,
    population: PopulationStats,
    selector: FeatureSelector,
    model: Model,
    labelled: u64,
    block: VecDeque<BufferedSample>,
    confusion: ConfusionMatrix,
    #[serde(default)]
    trace: bool,
}

impl Pipeline {
    pub fn new(config: RunConfig) -> Self {
        let selector = FeatureSelector::new(&config.selector);
        let model = config.model.build(config.seed);
        Self {
            config,
            histories: BTreeMap::new(),
            population: PopulationStats::default(),
            selector,
            model,
            labelled: 0,
            block: VecDeque::new(),
            confusion: ConfusionMatrix::default(),
            trace: false,
        }
    }

    /// Records model hashes around every step.
    pub fn with_trace(mut self, on: bool) -> Self {
        self.trace = on;
        self
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn selector(&self) -> &FeatureSelector {
        &self.selector
    }

    pub fn population(&self) -> &PopulationStats {
        &self.population
    }

    pub fn history(&self, user_id: &str) -> Option<&UserHistory> {
        self.histories.get(user_id)
    }

    pub fn labelled(&self) -> u64 {
        self.labelled
    }

    pub fn metrics(&self) -> MetricsSnapshot {
        MetricsSnapshot::from_confusion(self.confusion)
    }

    /// Predicts on a session's features and then applies the training policy.
    pub fn process_features(
        &mut self,
        user_id: &str,
        session_id: &str,
        timestamp: DateTime<Utc>,
        base: &BaseFeatureVector,
        truth: Option<Label>,
    ) -> Result<StepOutcome, PipelineError> {
        let history = self
            .histories
            .entry(user_id.to_string())
            .or_insert_with(|| UserHistory::new(user_id));
        history.append(base);
        let expanded = history.expand(base)?;
        self.population.update(base);
        // The correlation selector sees the label only after the prediction.
        let supervised = matches!(self.selector, FeatureSelector::Correlation(_));
        if !supervised {
            self.selector.update(&expanded, truth);
        }
        let mask = self.selector.mask();
        let input = apply_mask(&expanded, &mask)?;

        let hash_before_predict = self.trace.then(|| self.model.checkpoint_hash());
        let probabilities = self.model.predict_proba(&input);
        let predicted = probabilities.label();
        if supervised {
            self.selector.update(&expanded, truth);
        }

        let mut action = TrainAction::Skip;
        let mut trained_on = Vec::new();
        if let Some(y) = truth {
            self.confusion.record(y, predicted);
            self.labelled += 1;
            action = should_train(self.config.scenario, self.config.block_size, self.labelled);
            match self.config.scenario {
                Scenario::TestThenTrain => {}
                Scenario::Blocks => {
                    self.block.push_back(BufferedSample {
                        session_id: session_id.to_string(),
                        input: input.clone(),
                        label: y,
                    });
                    while self.block.len() > self.config.block_size.max(1) {
                        self.block.pop_front();
                    }
                }
            }
            match action {
                TrainAction::TrainNowSingle => {
                    self.model.learn_one(&input, y);
                    trained_on.push(session_id.to_string());
                }
                TrainAction::TrainBlock => {
                    for s in &self.block {
                        self.model.learn_one(&s.input, s.label);
                        trained_on.push(s.session_id.clone());
                    }
                }
                TrainAction::Skip => {}
            }
        }

        let explanation = select_top_features(&expanded, &self.population);
        let trace = hash_before_predict.map(|hash_before_predict| StepTrace {
            hash_before_predict,
            hash_after_train: (action != TrainAction::Skip).then(|| self.model.checkpoint_hash()),
            input,
            action,
            trained_on,
        });
        Ok(StepOutcome {
            record: PredictionRecord {
                user_id: user_id.to_string(),
                session_id: session_id.to_string(),
                predicted,
                probabilities,
                truth,
                selected: mask.len(),
                timestamp,
                explanation,
            },
            action,
            trace,
        })
    }

    /// Extracts the base features of a closed session and processes them.
    pub fn process_session(
        &mut self,
        session: &DialogueSession,
        transport: &dyn ExtractionTransport,
    ) -> Result<StepOutcome, PipelineError> {
        let base = extract_base_features(session, transport)?;
        self.process_extracted(session, &base)
    }

    pub fn process_extracted(
        &mut self,
        session: &DialogueSession,
        base: &BaseFeatureVector,
    ) -> Result<StepOutcome, PipelineError> {
        let timestamp = session
            .last_timestamp()
            .ok_or_else(|| PipelineError::EmptySession(session.session_id.clone()))?;
        self.process_features(&session.user_id, &session.session_id, timestamp, base, session.label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedSession {
    pub session_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    pub metrics: MetricsSnapshot,
    pub records: Vec<PredictionRecord>,
    pub skipped: Vec<SkippedSession>,
}

/// Runs every session in order. Extraction and classification are timed
/// separately; failed sessions are skipped and reported.
pub fn run_stream(
    sessions: &[DialogueSession],
    config: &RunConfig,
    transport: &dyn ExtractionTransport,
) -> RunOutput {
    let mut pipeline = Pipeline::new(config.clone());
    let mut records = Vec::with_capacity(sessions.len());
    let mut skipped = Vec::new();
    let (mut extraction, mut classification) = (Duration::ZERO, Duration::ZERO);
    for session in sessions {
        let started = Instant::now();
        let base = extract_base_features(session, transport);
        extraction += started.elapsed();
        let started = Instant::now();
        let outcome = base
            .map_err(PipelineError::from)
            .and_then(|b| pipeline.process_extracted(session, &b));
        classification += started.elapsed();
        match outcome {
            Ok(step) => records.push(step.record),
            Err(e) => {
                warn!(session = %session.session_id, error = %e, "session skipped");
                skipped.push(SkippedSession {
                    session_id: session.session_id.clone(),
                    reason: e.to_string(),
                });
            }
        }
    }
    let mut metrics = pipeline.metrics();
    metrics.elapsed_seconds = classification.as_secs_f64();
    metrics.extraction_seconds = extraction.as_secs_f64();
    RunOutput {
        metrics,
        records,
        skipped,
    }
}
