//! Turning a finished dialogue into its 22 base features.
//!
//! The two counters come straight from the transcript. The other twenty are
//! scored by a chat-completion endpoint that receives a fixed instruction
//! block followed by the transcript and must answer with a flat JSON object.

mod prompt;
mod reply;
mod session;
mod transport;

use thiserror::Error;
use tracing::{debug, warn};

use crate::features::BaseFeatureVector;

pub use prompt::{build_extraction_prompt, prompt_hash, render_transcript, EXTRACTION_TEMPLATE};
pub use reply::{find_json_object, parse_extraction_response, render_extraction_reply, ReplyError};
pub use session::{
    count_human_interactions, count_words, detect_session_end, ClosurePolicy, DialogueSession,
    FarewellLexicon, Label, SessionError, Speaker, Utterance,
};
pub use transport::{
    read_fixtures, write_fixtures, ExtractionTransport, FixtureError, FixtureRecord,
    RecordingTransport, ReplayTransport, StubTransport, TransportError, TransportSettings,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExtractionError {
    #[error("session `{0}` is still open")]
    NotClosed(String),
    #[error("extraction failed after {attempts} attempts: {last_error}")]
    ExtractionFailed { attempts: u32, last_error: String },
}

/// Computes the counters locally and asks the transport for the scored
/// features, retrying up to `max_retries` times on a bad or missing reply.
pub fn extract_base_features(
    session: &DialogueSession,
    transport: &dyn ExtractionTransport,
) -> Result<BaseFeatureVector, ExtractionError> {
    if !session.closed {
        return Err(ExtractionError::NotClosed(session.session_id.clone()));
    }
    let interactions = count_human_interactions(session);
    let words = count_words(session);
    let prompt = build_extraction_prompt(session);
    let attempts = transport.settings().max_retries + 1;
    let mut last_error = String::new();
    for attempt in 1..=attempts {
        let outcome = transport
            .send(&prompt)
            .map_err(|e| e.to_string())
            .and_then(|reply| parse_extraction_response(&reply).map_err(|e| e.to_string()));
        match outcome {
            Ok(scores) => {
                debug!(session = %session.session_id, attempt, "extraction succeeded");
                return Ok(BaseFeatureVector::new(scores, interactions, words));
            }
            Err(e) => {
                warn!(session = %session.session_id, attempt, error = %e, "extraction attempt failed");
                last_error = e;
            }
        }
    }
    Err(ExtractionError::ExtractionFailed {
        attempts,
        last_error,
    })
}
