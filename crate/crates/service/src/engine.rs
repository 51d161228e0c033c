//! Live engine: open sessions, the classification worker, the event log and
//! snapshots.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::JoinHandle;

use anyhow::{anyhow, bail, Context, Result};
use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::oneshot;
use tracing::{info, warn};

use mindstream::explain::{two_weeks, ExplanationPayload, TrajectoryPoint};
use mindstream::explain::{accumulated_confidence, trajectory, AccumulatedConfidence};
use mindstream::extraction::{
    extract_base_features, ClosurePolicy, DialogueSession, ExtractionTransport, Label, Speaker, Utterance,
};
use mindstream::pipeline::{MetricsSnapshot, Pipeline, PredictionRecord, RunConfig, TrainAction};

use crate::events::{CloseReason, Event, EventLog, EventRecord};

pub const EVENT_LOG: &str = "events.jsonl";
pub const SNAPSHOT: &str = "snapshot.json";

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("extraction failed: {0}")]
    Extraction(String),
    #[error(transparent)]
    Internal(#[from] anyhow::Error),
}

/// Everything needed to resume: written as the snapshot and rebuilt by
/// replaying the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineState {
    pub last_seq: u64,
    pub pipeline: Pipeline,
    open: BTreeMap<String, DialogueSession>,
    started: BTreeMap<String, u64>,
    finished: BTreeSet<String>,
    /// Closed sessions not yet classified, in closing order.
    awaiting: VecDeque<DialogueSession>,
    pub records: Vec<PredictionRecord>,
    pub trained_events: u64,
}

impl EngineState {
    pub fn new(config: RunConfig) -> Self {
        Self {
            last_seq: 0,
            pipeline: Pipeline::new(config),
            open: BTreeMap::new(),
            started: BTreeMap::new(),
            finished: BTreeSet::new(),
            awaiting: VecDeque::new(),
            records: Vec::new(),
            trained_events: 0,
        }
    }

    pub fn open_session(&self, user_id: &str) -> Option<&DialogueSession> {
        self.open.get(user_id)
    }

    pub fn knows_user(&self, user_id: &str) -> bool {
        self.started.contains_key(user_id)
    }

    fn next_session_id(&self, user_id: &str) -> String {
        let n = self.started.get(user_id).copied().unwrap_or(0) + 1;
        format!("{user_id}-{n:04}")
    }

    fn take_awaiting(&mut self, session_id: &str) -> Option<DialogueSession> {
        let at = self.awaiting.iter().position(|s| s.session_id == session_id)?;
        self.awaiting.remove(at)
    }

    /// Applies one logged event. Predictions are recomputed from the logged
    /// features and must match what was logged.
    pub fn apply(&mut self, record: &EventRecord) -> Result<()> {
        if record.seq <= self.last_seq {
            return Ok(());
        }
        match &record.event {
            Event::UtteranceAdded {
                user_id,
                session_id,
                utterance,
            } => {
                if !self.open.contains_key(user_id) {
                    *self.started.entry(user_id.clone()).or_default() += 1;
                    self.open
                        .insert(user_id.clone(), DialogueSession::new(user_id.clone(), session_id.clone()));
                }
                let session = self.open.get_mut(user_id).expect("just inserted");
                if &session.session_id != session_id {
                    bail!("seq {}: utterance for {session_id} but {} is open", record.seq, session.session_id);
                }
                session.push(utterance.clone())?;
            }
            Event::SessionClosed {
                user_id,
                session_id,
                label,
                ..
            } => {
                let mut session = self
                    .open
                    .remove(user_id)
                    .filter(|s| &s.session_id == session_id)
                    .ok_or_else(|| anyhow!("seq {}: no open session {session_id}", record.seq))?;
                session.close();
                session.label = *label;
                self.finished.insert(session_id.clone());
                self.awaiting.push_back(session);
            }
            Event::PredictionEmitted { base_features, record: logged } => {
                let session = self
                    .take_awaiting(&logged.session_id)
                    .ok_or_else(|| anyhow!("seq {}: session {} was not awaiting", record.seq, logged.session_id))?;
                let outcome = self.pipeline.process_extracted(&session, base_features)?;
                if &outcome.record != logged {
                    bail!("seq {}: replayed prediction for {} diverges from the log", record.seq, logged.session_id);
                }
                self.records.push(outcome.record);
            }
            Event::ModelTrained { model_hash, .. } => {
                self.trained_events += 1;
                let now = self.pipeline.model().checkpoint_hash();
                if &now != model_hash {
                    bail!("seq {}: model hash diverges from the log", record.seq);
                }
            }
            Event::ExtractionFailed { session_id, .. } => {
                self.take_awaiting(session_id);
            }
        }
        self.last_seq = record.seq;
        Ok(())
    }

    pub fn latest(&self, user_id: &str) -> Option<&PredictionRecord> {
        self.records.iter().rev().find(|r| r.user_id == user_id)
    }

    pub fn payload_for(&self, record: &PredictionRecord, window: Option<Duration>, now: DateTime<Utc>) -> ExplanationPayload {
        ExplanationPayload::build(record.explanation.clone(), &record.user_id, &self.records, window, now)
    }
}

/// Rebuilds state from a log file alone.
pub fn replay_log(config: RunConfig, events: &[EventRecord]) -> Result<EngineState> {
    let mut state = EngineState::new(config);
    for e in events {
        state.apply(e)?;
    }
    Ok(state)
}

pub fn write_snapshot(path: &Path, state: &EngineState) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, serde_json::to_vec(state)?).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("replacing {}", path.display()))?;
    Ok(())
}

pub fn read_snapshot(path: &Path) -> Result<Option<EngineState>> {
    if !path.exists() {
        return Ok(None);
    }
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Some(serde_json::from_slice(&bytes).context("decoding snapshot")?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceInput {
    pub speaker: Speaker,
    pub text: String,
    pub t: DateTime<Utc>,
    /// Optional guard: the session the client believes is open.
    #[serde(default)]
    pub session_id: Option<String>,
    /// Ground truth applied if this utterance closes the session.
    #[serde(default)]
    pub label: Option<Label>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AddOutcome {
    pub session_id: String,
    pub closed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedSession {
    pub record: PredictionRecord,
    pub explanation: ExplanationPayload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryView {
    pub user_id: String,
    pub points: Vec<TrajectoryPoint>,
    pub accumulated: Option<AccumulatedConfidence>,
}

type Reply = oneshot::Sender<Result<ClosedSession, EngineError>>;

enum Job {
    Classify { session_id: String, reply: Option<Reply> },
    Barrier(oneshot::Sender<()>),
}

pub struct EngineOptions {
    pub data_dir: PathBuf,
    pub policy: ClosurePolicy,
    pub snapshot_every: u64,
}

struct Shared {
    state: Mutex<EngineState>,
    log: Mutex<EventLog>,
    transport: Box<dyn ExtractionTransport>,
    policy: ClosurePolicy,
    snapshot_path: PathBuf,
    snapshot_every: u64,
}

pub struct Engine {
    shared: Arc<Shared>,
    jobs: Option<mpsc::Sender<Job>>,
    worker: Option<JoinHandle<()>>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

impl Shared {
    fn append(&self, state: &mut EngineState, event: Event) -> Result<EventRecord> {
        let record = lock(&self.log).append(event)?;
        state.last_seq = record.seq;
        Ok(record)
    }

    /// Appends an event and applies it to the state.
    fn record(&self, state: &mut EngineState, event: Event) -> Result<EventRecord> {
        let record = lock(&self.log).append(event)?;
        state.apply(&record)?;
        Ok(record)
    }

    fn classify(&self, session_id: &str) -> Result<ClosedSession, EngineError> {
        let session = {
            let state = lock(&self.state);
            state
                .awaiting
                .iter()
                .find(|s| s.session_id == session_id)
                .cloned()
                .ok_or_else(|| EngineError::NotFound(format!("session {session_id} is not awaiting classification")))?
        };
        let extracted = extract_base_features(&session, self.transport.as_ref());
        let mut state = lock(&self.state);
        let base = match extracted {
            Ok(b) => b,
            Err(e) => {
                warn!(session = %session_id, error = %e, "extraction failed, session quarantined");
                state.take_awaiting(session_id);
                self.append(
                    &mut state,
                    Event::ExtractionFailed {
                        user_id: session.user_id.clone(),
                        session_id: session_id.to_string(),
                        error: e.to_string(),
                    },
                )?;
                return Err(EngineError::Extraction(e.to_string()));
            }
        };
        state.take_awaiting(session_id);
        let outcome = state
            .pipeline
            .process_extracted(&session, &base)
            .map_err(|e| EngineError::Internal(e.into()))?;
        state.records.push(outcome.record.clone());
        self.append(
            &mut state,
            Event::PredictionEmitted {
                base_features: base,
                record: outcome.record.clone(),
            },
        )?;
        if outcome.action != TrainAction::Skip {
            let model_hash = state.pipeline.model().checkpoint_hash();
            let labelled = state.pipeline.labelled();
            self.append(&mut state, Event::ModelTrained { labelled, model_hash })?;
            state.trained_events += 1;
            if self.snapshot_every > 0 && state.trained_events % self.snapshot_every == 0 {
                write_snapshot(&self.snapshot_path, &state)?;
            }
        }
        let explanation = state.payload_for(&outcome.record, Some(two_weeks()), outcome.record.timestamp);
        Ok(ClosedSession {
            record: outcome.record,
            explanation,
        })
    }
}

impl Engine {
    /// Opens the data directory, restores the last snapshot, replays newer
    /// events and requeues sessions that were closed but never classified.
    pub fn open(config: RunConfig, options: EngineOptions, transport: Box<dyn ExtractionTransport>) -> Result<Self> {
        std::fs::create_dir_all(&options.data_dir)?;
        let snapshot_path = options.data_dir.join(SNAPSHOT);
        let (log, events) = EventLog::open(&options.data_dir.join(EVENT_LOG))?;
        let mut state = match read_snapshot(&snapshot_path)? {
            Some(s) => {
                if s.pipeline.config() != &config {
                    warn!("snapshot was taken with a different run configuration; keeping the snapshot's");
                }
                s
            }
            None => EngineState::new(config),
        };
        let replayed = events.iter().filter(|e| e.seq > state.last_seq).count();
        for e in &events {
            state.apply(e)?;
        }
        if replayed > 0 {
            info!(replayed, last_seq = state.last_seq, "event log replayed");
        }
        let pending: Vec<String> = state.awaiting.iter().map(|s| s.session_id.clone()).collect();
        let shared = Arc::new(Shared {
            state: Mutex::new(state),
            log: Mutex::new(log),
            transport,
            policy: options.policy,
            snapshot_path,
            snapshot_every: options.snapshot_every,
        });
        let (tx, rx) = mpsc::channel::<Job>();
        let worker_shared = Arc::clone(&shared);
        let worker = std::thread::Builder::new()
            .name("classifier".into())
            .spawn(move || {
                for job in rx {
                    match job {
                        Job::Classify { session_id, reply } => {
                            let result = worker_shared.classify(&session_id);
                            if let Err(e) = &result {
                                warn!(session = %session_id, error = %e, "classification failed");
                            }
                            if let Some(reply) = reply {
                                let _ = reply.send(result);
                            }
                        }
                        Job::Barrier(done) => {
                            let _ = done.send(());
                        }
                    }
                }
            })?;
        for session_id in pending {
            tx.send(Job::Classify { session_id, reply: None })
                .map_err(|_| anyhow!("classification worker stopped"))?;
        }
        Ok(Self {
            shared,
            jobs: Some(tx),
            worker: Some(worker),
        })
    }

    fn enqueue(&self, job: Job) -> Result<(), EngineError> {
        self.jobs
            .as_ref()
            .and_then(|j| j.send(job).ok())
            .ok_or_else(|| EngineError::Internal(anyhow!("classification worker stopped")))
    }

    fn close_locked(
        &self,
        state: &mut EngineState,
        user_id: &str,
        reason: CloseReason,
        label: Option<Label>,
    ) -> Result<String, EngineError> {
        let session_id = state
            .open
            .get(user_id)
            .map(|s| s.session_id.clone())
            .ok_or_else(|| EngineError::NotFound(format!("user {user_id} has no open session")))?;
        self.shared.record(
            state,
            Event::SessionClosed {
                user_id: user_id.to_string(),
                session_id: session_id.clone(),
                reason,
                label,
            },
        )?;
        Ok(session_id)
    }

    /// Appends one utterance to the user's open session, opening one if
    /// needed, and closes it on a farewell.
    pub fn add_utterance(&self, user_id: &str, input: UtteranceInput) -> Result<AddOutcome, EngineError> {
        if input.text.trim().is_empty() {
            return Err(EngineError::BadRequest("utterance text is empty".into()));
        }
        let mut state = lock(&self.shared.state);
        if let Some(target) = &input.session_id {
            let open_id = state.open.get(user_id).map(|s| s.session_id.as_str());
            if open_id != Some(target.as_str()) {
                return Err(if state.finished.contains(target) {
                    EngineError::Conflict(format!("session {target} is already closed"))
                } else {
                    EngineError::NotFound(format!("session {target} is not open"))
                });
            }
        }
        let mut queued = Vec::new();
        if let Some(open) = state.open.get(user_id) {
            if let Some(last) = open.last_timestamp() {
                if input.t < last {
                    return Err(EngineError::BadRequest(format!("timestamp {} precedes {last}", input.t)));
                }
                if input.t - last > self.shared.policy.inactivity && input.session_id.is_none() {
                    queued.push(self.close_locked(&mut state, user_id, CloseReason::Inactivity, None)?);
                }
            }
        }
        let session_id = match state.open.get(user_id) {
            Some(s) => s.session_id.clone(),
            None => state.next_session_id(user_id),
        };
        let utterance = Utterance::new(input.speaker, input.text, input.t)
            .map_err(|e| EngineError::BadRequest(e.to_string()))?;
        self.shared.record(
            &mut state,
            Event::UtteranceAdded {
                user_id: user_id.to_string(),
                session_id: session_id.clone(),
                utterance,
            },
        )?;
        let farewell = {
            let session = state.open.get(user_id).expect("session just received an utterance");
            input.speaker == Speaker::Human
                && self
                    .shared
                    .policy
                    .detect_session_end(session, input.t)
                    .unwrap_or(false)
        };
        if farewell {
            queued.push(self.close_locked(&mut state, user_id, CloseReason::Farewell, input.label)?);
        }
        drop(state);
        for id in queued {
            self.enqueue(Job::Classify {
                session_id: id,
                reply: None,
            })?;
        }
        Ok(AddOutcome {
            session_id,
            closed: farewell,
        })
    }

    /// Closes the open session and waits for its prediction.
    pub async fn close_current(&self, user_id: &str, label: Option<Label>) -> Result<ClosedSession, EngineError> {
        let rx = self.request_close(user_id, label)?;
        rx.await
            .map_err(|_| EngineError::Internal(anyhow!("classification worker stopped")))?
    }

    pub fn close_current_blocking(&self, user_id: &str, label: Option<Label>) -> Result<ClosedSession, EngineError> {
        let rx = self.request_close(user_id, label)?;
        rx.blocking_recv()
            .map_err(|_| EngineError::Internal(anyhow!("classification worker stopped")))?
    }

    fn request_close(
        &self,
        user_id: &str,
        label: Option<Label>,
    ) -> Result<oneshot::Receiver<Result<ClosedSession, EngineError>>, EngineError> {
        let mut state = lock(&self.shared.state);
        let session_id = self.close_locked(&mut state, user_id, CloseReason::Requested, label)?;
        let (tx, rx) = oneshot::channel();
        drop(state);
        self.enqueue(Job::Classify {
            session_id,
            reply: Some(tx),
        })?;
        Ok(rx)
    }

    /// Closes every session idle for longer than the inactivity limit.
    pub fn sweep(&self, now: DateTime<Utc>) -> Result<Vec<String>, EngineError> {
        let mut state = lock(&self.shared.state);
        let idle: Vec<String> = state
            .open
            .iter()
            .filter(|(_, s)| s.last_timestamp().is_some_and(|t| now - t > self.shared.policy.inactivity))
            .map(|(u, _)| u.clone())
            .collect();
        let mut closed = Vec::new();
        for user in idle {
            closed.push(self.close_locked(&mut state, &user, CloseReason::Inactivity, None)?);
        }
        drop(state);
        for id in &closed {
            self.enqueue(Job::Classify {
                session_id: id.clone(),
                reply: None,
            })?;
        }
        Ok(closed)
    }

    /// Waits until every queued classification has finished.
    pub async fn flush(&self) -> Result<(), EngineError> {
        let (tx, rx) = oneshot::channel();
        self.enqueue(Job::Barrier(tx))?;
        rx.await.map_err(|_| EngineError::Internal(anyhow!("classification worker stopped")))
    }

    pub fn flush_blocking(&self) -> Result<(), EngineError> {
        let (tx, rx) = oneshot::channel();
        self.enqueue(Job::Barrier(tx))?;
        rx.blocking_recv()
            .map_err(|_| EngineError::Internal(anyhow!("classification worker stopped")))
    }

    pub fn metrics(&self) -> MetricsSnapshot {
        lock(&self.shared.state).pipeline.metrics()
    }

    pub fn trajectory(&self, user_id: &str, window: Option<Duration>, now: DateTime<Utc>) -> Result<TrajectoryView, EngineError> {
        let state = lock(&self.shared.state);
        if !state.knows_user(user_id) {
            return Err(EngineError::NotFound(format!("unknown user {user_id}")));
        }
        Ok(TrajectoryView {
            user_id: user_id.to_string(),
            points: trajectory(user_id, &state.records, window, now),
            accumulated: accumulated_confidence(user_id, &state.records).ok(),
        })
    }

    pub fn latest(&self, user_id: &str) -> Result<ClosedSession, EngineError> {
        let state = lock(&self.shared.state);
        let record = state
            .latest(user_id)
            .cloned()
            .ok_or_else(|| EngineError::NotFound(format!("no prediction for user {user_id}")))?;
        let explanation = state.payload_for(&record, Some(two_weeks()), record.timestamp);
        Ok(ClosedSession { record, explanation })
    }

    /// Copy of the current state.
    pub fn state(&self) -> EngineState {
        lock(&self.shared.state).clone()
    }

    pub fn open_session(&self, user_id: &str) -> Option<DialogueSession> {
        lock(&self.shared.state).open_session(user_id).cloned()
    }
}

impl Drop for Engine {
    fn drop(&mut self) {
        self.jobs.take();
        if let Some(worker) = self.worker.take() {
            let _ = worker.join();
        }
    }
}
