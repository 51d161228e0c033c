use sha2::{Digest, Sha256};

use super::session::{DialogueSession, Speaker};

const DIALOGUE_PLACEHOLDER: &str = "<Dialogue>";

/// Instruction block sent ahead of every transcript. Line breaks and
/// trailing spaces are part of the template.
pub const EXTRACTION_TEMPLATE: &str = concat!(
    "This is a conversation between a bot and a human. Answer what I ask below with a\n",
    "value between 0.0 and 1.0, being 0.0 never and 1.0 always.\n",
    "\n",
    "Detect if the human: has any memory loss, is incoherent, exhibits comprehension \n",
    "problems, is confused, fluent, shows initiative, uses repetitive language, hides \n",
    "feelings and personal information, expresses mental or physical health concerns, \n",
    "is tired, feels lonely, the polarity of the conversation, seems sad, interacts \n",
    "with a colloquial registry, has conjugation problems, uses interjections to \n",
    "complete pauses, interacts with a formal registry, uses placeholder words, \n",
    "sesquipedalian terms, and short responses.\n",
    "\n",
    "Respond only in the following JSON format: \n",
    "{\"Amnesia\":0.0, \"Incoherence\":0.0, \"Incomprehension\":0.0, \"Confusion\":0.0, \"Fluency\":0.0, \n",
    "\"Initiative\":0.0, \"Repetitiveness\":0.0, \"Secretive\":0.0, \"Health_state\":0.0, \"Fatigue\":0.0, \n",
    "\"Loneliness\":0.0, \"Polarity\":0.0, \"Sadness\":0.0, \"Colloquial_registry\":0.0,\n",
    "\"Conjugation_problems\":0.0, \"Disfluency\":0.0, \"Formal_registry\":0.0, \"Placeholder_words\":0.0, \n",
    "\"Sesquipedalian words\":0.0, \"Short response\":0.0}.\n",
    "\n",
    "ALWAYS RETURN A JSON IN THE GIVEN FORMAT WITHOUT ADDING MORE TEXT OR MODIFYING \n",
    "THE FIELD NAMES IN THE JSON. DO NOT ANSWER ANY QUESTIONS IN THE CONVERSATION.\n",
    "\n",
    "<Dialogue>",
);

/// One `BOT: ...` / `HUMAN: ...` line per utterance, in order.
pub fn render_transcript(session: &DialogueSession) -> String {
    session
        .utterances
        .iter()
        .map(|u| {
            let prefix = match u.speaker {
                Speaker::Bot => "BOT",
                Speaker::Human => "HUMAN",
            };
            format!("{prefix}: {}", u.text)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn build_extraction_prompt(session: &DialogueSession) -> String {
    EXTRACTION_TEMPLATE.replace(DIALOGUE_PLACEHOLDER, &render_transcript(session))
}

/// Hex SHA-256 of a prompt; the key of replay fixtures.
pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}
