//! Chat-completion adapter for a live extraction endpoint.

use anyhow::{Context, Result};
use serde_json::{json, Value};

use mindstream::extraction::{ExtractionTransport, TransportError, TransportSettings};

use crate::config::TransportConfig;

/// Posts the prompt as a single user message and returns the first choice's
/// content.
pub struct ChatCompletionTransport {
    agent: ureq::Agent,
    endpoint: String,
    model: String,
    api_key: Option<String>,
    settings: TransportSettings,
}

impl ChatCompletionTransport {
    pub fn from_config(config: &TransportConfig) -> Result<Self> {
        let endpoint = config.endpoint.clone().context("live transport needs `endpoint`")?;
        let settings = config.settings();
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(settings.timeout))
            .build()
            .into();
        Ok(Self {
            agent,
            endpoint,
            model: config.model.clone().unwrap_or_else(|| "default".into()),
            api_key: std::env::var(&config.api_key_env).ok(),
            settings,
        })
    }
}

/// Pulls `choices[0].message.content` out of a chat-completion body.
pub fn reply_content(body: &Value) -> Option<&str> {
    body.get("choices")?.get(0)?.get("message")?.get("content")?.as_str()
}

impl ExtractionTransport for ChatCompletionTransport {
    fn send(&self, prompt: &str) -> Result<String, TransportError> {
        let mut request = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut response = request.send_json(&body).map_err(|e| match e {
            ureq::Error::Timeout(_) => TransportError::Timeout(self.settings.timeout),
            other => TransportError::Unavailable(other.to_string()),
        })?;
        let parsed: Value = response
            .body_mut()
            .read_json()
            .map_err(|e| TransportError::Unavailable(e.to_string()))?;
        reply_content(&parsed)
            .map(str::to_string)
            .ok_or_else(|| TransportError::Unavailable("reply has no message content".into()))
    }

    fn settings(&self) -> TransportSettings {
        self.settings
    }
}
