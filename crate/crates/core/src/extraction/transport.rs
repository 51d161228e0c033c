//! Prompt → reply senders used by the extractor.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::prompt::prompt_hash;
use super::reply::render_extraction_reply;
use crate::features::ScoredFeatures;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransportError {
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("endpoint unavailable: {0}")]
    Unavailable(String),
    #[error("no recorded reply for prompt {0}")]
    NoFixture(String),
}

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("fixture io: {0}")]
    Io(#[from] std::io::Error),
    #[error("fixture line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransportSettings {
    #[serde(with = "duration_secs")]
    pub timeout: Duration,
    pub max_retries: u32,
}

impl Default for TransportSettings {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(30),
            max_retries: 3,
        }
    }
}

mod duration_secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}

/// Sends one prompt and returns the raw reply text.
///
/// Implementations must be callable from several threads; the extractor
/// never interleaves retries for the same session.
pub trait ExtractionTransport: Send + Sync {
    fn send(&self, prompt: &str) -> Result<String, TransportError>;

    fn settings(&self) -> TransportSettings {
        TransportSettings::default()
    }
}

impl<T: ExtractionTransport + ?Sized> ExtractionTransport for std::sync::Arc<T> {
    fn send(&self, prompt: &str) -> Result<String, TransportError> {
        (**self).send(prompt)
    }

    fn settings(&self) -> TransportSettings {
        (**self).settings()
    }
}

impl<T: ExtractionTransport + ?Sized> ExtractionTransport for Box<T> {
    fn send(&self, prompt: &str) -> Result<String, TransportError> {
        (**self).send(prompt)
    }

    fn settings(&self) -> TransportSettings {
        (**self).settings()
    }
}

type ReplyFn = dyn Fn(&str) -> Result<String, TransportError> + Send + Sync;

/// Deterministic in-process transport driven by a closure.
pub struct StubTransport {
    reply: Box<ReplyFn>,
    settings: TransportSettings,
}

impl StubTransport {
    pub fn from_fn<F>(f: F) -> Self
    where
        F: Fn(&str) -> Result<String, TransportError> + Send + Sync + 'static,
    {
        Self {
            reply: Box::new(f),
            settings: TransportSettings::default(),
        }
    }

    /// Always replies with the given scores in the reply schema.
    pub fn constant(scores: ScoredFeatures) -> Self {
        let body = render_extraction_reply(&scores);
        Self::from_fn(move |_| Ok(body.clone()))
    }

    pub fn with_settings(mut self, settings: TransportSettings) -> Self {
        self.settings = settings;
        self
    }
}

impl ExtractionTransport for StubTransport {
    fn send(&self, prompt: &str) -> Result<String, TransportError> {
        (self.reply)(prompt)
    }

    fn settings(&self) -> TransportSettings {
        self.settings
    }
}

/// One line of a fixture file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureRecord {
    pub prompt_hash: String,
    pub reply_text: String,
}

impl FixtureRecord {
    pub fn for_prompt(prompt: &str, reply_text: impl Into<String>) -> Self {
        Self {
            prompt_hash: prompt_hash(prompt),
            reply_text: reply_text.into(),
        }
    }
}

pub fn read_fixtures(path: &Path) -> Result<Vec<FixtureRecord>, FixtureError> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|source| FixtureError::Parse { line: i + 1, source })?;
        records.push(record);
    }
    Ok(records)
}

pub fn write_fixtures<'a>(
    path: &Path,
    records: impl IntoIterator<Item = &'a FixtureRecord>,
) -> Result<(), FixtureError> {
    let mut out = std::io::BufWriter::new(File::create(path)?);
    for record in records {
        serde_json::to_writer(&mut out, record).map_err(|source| FixtureError::Parse { line: 0, source })?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Replays recorded replies keyed by prompt hash.
#[derive(Debug, Clone, Default)]
pub struct ReplayTransport {
    replies: HashMap<String, String>,
    settings: TransportSettings,
}

impl ReplayTransport {
    pub fn from_records(records: impl IntoIterator<Item = FixtureRecord>) -> Self {
        Self {
            replies: records
                .into_iter()
                .map(|r| (r.prompt_hash, r.reply_text))
                .collect(),
            settings: TransportSettings::default(),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, FixtureError> {
        Ok(Self::from_records(read_fixtures(path)?))
    }

    pub fn with_settings(mut self, settings: TransportSettings) -> Self {
        self.settings = settings;
        self
    }

    pub fn len(&self) -> usize {
        self.replies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.replies.is_empty()
    }

    pub fn extend(&mut self, records: impl IntoIterator<Item = FixtureRecord>) {
        self.replies
            .extend(records.into_iter().map(|r| (r.prompt_hash, r.reply_text)));
    }
}

impl ExtractionTransport for ReplayTransport {
    fn send(&self, prompt: &str) -> Result<String, TransportError> {
        let hash = prompt_hash(prompt);
        self.replies
            .get(&hash)
            .cloned()
            .ok_or(TransportError::NoFixture(hash))
    }

    fn settings(&self) -> TransportSettings {
        self.settings
    }
}

/// Forwards to an inner transport and keeps every successful exchange as a
/// fixture record.
pub struct RecordingTransport<T> {
    inner: T,
    recorded: Mutex<Vec<FixtureRecord>>,
}

impl<T: ExtractionTransport> RecordingTransport<T> {
    pub fn new(inner: T) -> Self {
        Self {
            inner,
            recorded: Mutex::new(Vec::new()),
        }
    }

    pub fn records(&self) -> Vec<FixtureRecord> {
        self.recorded.lock().expect("recorder poisoned").clone()
    }
}

impl<T: ExtractionTransport> ExtractionTransport for RecordingTransport<T> {
    fn send(&self, prompt: &str) -> Result<String, TransportError> {
        let reply = self.inner.send(prompt)?;
        self.recorded
            .lock()
            .expect("recorder poisoned")
            .push(FixtureRecord::for_prompt(prompt, reply.clone()));
        Ok(reply)
    }

    fn settings(&self) -> TransportSettings {
        self.inner.settings()
    }
}
