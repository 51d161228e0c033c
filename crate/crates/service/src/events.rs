//! Append-only event log, one JSON record per line.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use mindstream::extraction::{Label, Utterance};
use mindstream::features::BaseFeatureVector;
use mindstream::pipeline::PredictionRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CloseReason {
    Farewell,
    Inactivity,
    Requested,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum Event {
    UtteranceAdded {
        user_id: String,
        session_id: String,
        utterance: Utterance,
    },
    SessionClosed {
        user_id: String,
        session_id: String,
        reason: CloseReason,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        label: Option<Label>,
    },
    /// Carries the extracted features so a replay never calls the endpoint.
    PredictionEmitted {
        base_features: BaseFeatureVector,
        record: PredictionRecord,
    },
    ModelTrained {
        labelled: u64,
        model_hash: String,
    },
    /// The session was quarantined and never reached the classifier.
    ExtractionFailed {
        user_id: String,
        session_id: String,
        error: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    pub at: DateTime<Utc>,
    #[serde(flatten)]
    pub event: Event,
}

pub struct EventLog {
    path: PathBuf,
    writer: BufWriter<File>,
    next_seq: u64,
}

impl EventLog {
    /// Opens (or creates) the log and positions after its last record.
    pub fn open(path: &Path) -> Result<(Self, Vec<EventRecord>)> {
        let existing = if path.exists() {
            let (records, valid_len) = scan(path)?;
            let file = OpenOptions::new().write(true).open(path)?;
            if file.metadata()?.len() != valid_len {
                file.set_len(valid_len)?;
            }
            records
        } else {
            Vec::new()
        };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .with_context(|| format!("opening event log {}", path.display()))?;
        let next_seq = existing.last().map_or(1, |r| r.seq + 1);
        Ok((
            Self {
                path: path.to_path_buf(),
                writer: BufWriter::new(file),
                next_seq,
            },
            existing,
        ))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn last_seq(&self) -> u64 {
        self.next_seq - 1
    }

    pub fn append(&mut self, event: Event) -> Result<EventRecord> {
        let record = EventRecord {
            seq: self.next_seq,
            at: Utc::now(),
            event,
        };
        serde_json::to_writer(&mut self.writer, &record)?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()?;
        self.next_seq += 1;
        Ok(record)
    }
}

/// Reads every record. An unterminated final line (a crash mid-write) is
/// dropped; any other malformed line is an error.
pub fn read_events(path: &Path) -> Result<Vec<EventRecord>> {
    Ok(scan(path)?.0)
}

/// Records plus the byte length of the well-formed prefix.
fn scan(path: &Path) -> Result<(Vec<EventRecord>, u64)> {
    let mut reader = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let mut out: Vec<EventRecord> = Vec::new();
    let mut valid_len = 0u64;
    let mut line = String::new();
    let mut number = 0;
    loop {
        line.clear();
        let read = reader.read_line(&mut line)?;
        if read == 0 {
            break;
        }
        number += 1;
        if !line.ends_with('\n') {
            break;
        }
        if !line.trim().is_empty() {
            let r: EventRecord =
                serde_json::from_str(line.trim_end()).with_context(|| format!("event log line {number}"))?;
            if out.last().is_some_and(|prev| prev.seq >= r.seq) {
                bail!("event log line {number}: sequence {} is not increasing", r.seq);
            }
            out.push(r);
        }
        valid_len += read as u64;
    }
    Ok((out, valid_len))
}
