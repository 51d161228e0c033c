use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SessionError {
    #[error("no utterances")]
    NoUtterances,
    #[error("session `{0}` is closed")]
    Closed(String),
    #[error("utterance text is empty")]
    EmptyText,
    #[error("utterance timestamp {got} precedes the previous one ({previous})")]
    TimestampRegression {
        previous: DateTime<Utc>,
        got: DateTime<Utc>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Bot,
    Human,
}

/// Ground-truth or predicted deterioration class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Present,
    Absent,
}

impl Label {
    /// 1.0 for present, 0.0 for absent.
    pub fn as_target(self) -> f64 {
        match self {
            Label::Present => 1.0,
            Label::Absent => 0.0,
        }
    }

    /// +1 for present, -1 for absent.
    pub fn as_sign(self) -> f64 {
        match self {
            Label::Present => 1.0,
            Label::Absent => -1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Present => "present",
            Label::Absent => "absent",
        }
    }
}

impl std::str::FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "present" => Ok(Label::Present),
            "absent" => Ok(Label::Absent),
            other => Err(format!("unknown label `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
    #[serde(rename = "t", with = "chrono::serde::ts_seconds")]
    pub timestamp: DateTime<Utc>,
}

impl Utterance {
    pub fn new(speaker: Speaker, text: impl Into<String>, timestamp: DateTime<Utc>) -> Result<Self, SessionError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(SessionError::EmptyText);
        }
        Ok(Self {
            speaker,
            text,
            timestamp,
        })
    }

    pub fn bot(text: impl Into<String>, timestamp: DateTime<Utc>) -> Result<Self, SessionError> {
        Self::new(Speaker::Bot, text, timestamp)
    }

    pub fn human(text: impl Into<String>, timestamp: DateTime<Utc>) -> Result<Self, SessionError> {
        Self::new(Speaker::Human, text, timestamp)
    }
}

/// One user conversation. Speakers need not alternate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueSession {
    pub user_id: String,
    pub session_id: String,
    pub utterances: Vec<Utterance>,
    #[serde(default)]
    pub closed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
}

impl DialogueSession {
    pub fn new(user_id: impl Into<String>, session_id: impl Into<String>) -> Self {
        Self {
            user_id: user_id.into(),
            session_id: session_id.into(),
            utterances: Vec::new(),
            closed: false,
            label: None,
        }
    }

    pub fn push(&mut self, utterance: Utterance) -> Result<(), SessionError> {
        if self.closed {
            return Err(SessionError::Closed(self.session_id.clone()));
        }
        if utterance.text.trim().is_empty() {
            return Err(SessionError::EmptyText);
        }
        if let Some(last) = self.utterances.last() {
            if utterance.timestamp < last.timestamp {
                return Err(SessionError::TimestampRegression {
                    previous: last.timestamp,
                    got: utterance.timestamp,
                });
            }
        }
        self.utterances.push(utterance);
        Ok(())
    }

    pub fn close(&mut self) {
        self.closed = true;
    }

    pub fn last_timestamp(&self) -> Option<DateTime<Utc>> {
        self.utterances.last().map(|u| u.timestamp)
    }

    pub fn human_utterances(&self) -> impl Iterator<Item = &Utterance> {
        self.utterances.iter().filter(|u| u.speaker == Speaker::Human)
    }
}

/// Case-insensitive whole-word farewell phrases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FarewellLexicon {
    phrases: Vec<Vec<String>>,
}

impl Default for FarewellLexicon {
    fn default() -> Self {
        Self::new(["goodbye", "bye", "farewell", "see you"])
    }
}

fn words_of(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl FarewellLexicon {
    pub fn new<I, S>(phrases: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self {
            phrases: phrases
                .into_iter()
                .map(|p| words_of(p.as_ref()))
                .filter(|p| !p.is_empty())
                .collect(),
        }
    }

    pub fn matches(&self, text: &str) -> bool {
        let words = words_of(text);
        self.phrases
            .iter()
            .any(|phrase| words.windows(phrase.len()).any(|w| w == phrase.as_slice()))
    }
}

/// When a session counts as finished.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClosurePolicy {
    pub inactivity: Duration,
    pub lexicon: FarewellLexicon,
}

impl Default for ClosurePolicy {
    fn default() -> Self {
        Self {
            inactivity: Duration::seconds(180),
            lexicon: FarewellLexicon::default(),
        }
    }
}

impl ClosurePolicy {
    /// True once the session has been idle for longer than the inactivity
    /// limit, or the latest human turn says goodbye.
    pub fn detect_session_end(&self, session: &DialogueSession, now: DateTime<Utc>) -> Result<bool, SessionError> {
        let last = session.utterances.last().ok_or(SessionError::NoUtterances)?;
        if now - last.timestamp > self.inactivity {
            return Ok(true);
        }
        Ok(session
            .utterances
            .iter()
            .rev()
            .find(|u| u.speaker == Speaker::Human)
            .is_some_and(|u| self.lexicon.matches(&u.text)))
    }
}

pub fn detect_session_end(session: &DialogueSession, now: DateTime<Utc>) -> Result<bool, SessionError> {
    ClosurePolicy::default().detect_session_end(session, now)
}

/// Number of human turns.
pub fn count_human_interactions(session: &DialogueSession) -> u64 {
    session.human_utterances().count() as u64
}

/// Whitespace-delimited tokens across all human turns.
pub fn count_words(session: &DialogueSession) -> u64 {
    let joined = session
        .human_utterances()
        .map(|u| u.text.as_str())
        .collect::<Vec<_>>()
        .join(" ");
    joined.split_whitespace().count() as u64
}
