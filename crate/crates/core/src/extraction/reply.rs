use serde_json::{Map, Value};
use thiserror::Error;

use crate::features::{BaseFeature, ScoredFeatures, SCORED_FEATURE_COUNT};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ReplyError {
    #[error("malformed reply: {0}")]
    MalformedReply(String),
    #[error("reply is missing field `{0}`")]
    MissingField(String),
}

/// Returns the first balanced `{...}` in `text`, skipping braces that occur
/// inside JSON strings.
pub fn find_json_object(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (offset, c) in text[start..].char_indices() {
        if in_string {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_string = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..start + offset + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

/// Parses the 20 scores out of a model reply. Prose around the object is
/// tolerated; values outside [0, 1] are clamped.
pub fn parse_extraction_response(reply: &str) -> Result<ScoredFeatures, ReplyError> {
    let object = find_json_object(reply)
        .ok_or_else(|| ReplyError::MalformedReply("no JSON object found".into()))?;
    let map: Map<String, Value> =
        serde_json::from_str(object).map_err(|e| ReplyError::MalformedReply(e.to_string()))?;
    let mut values = [0.0; SCORED_FEATURE_COUNT];
    for (slot, feature) in values.iter_mut().zip(BaseFeature::SCORED) {
        let key = feature.reply_key().expect("scored features have reply keys");
        let value = map
            .get(key)
            .ok_or_else(|| ReplyError::MissingField(key.to_string()))?;
        *slot = value
            .as_f64()
            .ok_or_else(|| ReplyError::MalformedReply(format!("field `{key}` is not numeric")))?;
    }
    Ok(ScoredFeatures::new(values))
}

/// Serializes scores in the reply schema, fields in schema order.
pub fn render_extraction_reply(scores: &ScoredFeatures) -> String {
    let fields: Vec<String> = scores
        .iter()
        .map(|(feature, value)| {
            let key = feature.reply_key().expect("scored features have reply keys");
            let number = serde_json::to_string(&value).expect("finite scores serialize");
            format!("\"{key}\":{number}")
        })
        .collect();
    format!("{{{}}}", fields.join(", "))
}
