use anyhow::{Context, Result};

use mindstream::extraction::{ExtractionTransport, ReplayTransport, StubTransport};
use mindstream::features::ScoredFeatures;

use crate::config::{TransportConfig, TransportMode};
use crate::live::ChatCompletionTransport;

/// Builds the extraction transport named by the configuration.
pub fn build_transport(config: &TransportConfig) -> Result<Box<dyn ExtractionTransport>> {
    let settings = config.settings();
    Ok(match config.mode {
        TransportMode::Stub => {
            Box::new(StubTransport::constant(ScoredFeatures::uniform(config.stub_value)).with_settings(settings))
        }
        TransportMode::Replay => {
            let path = config.fixtures.as_deref().context("replay transport needs `fixtures`")?;
            let replay = ReplayTransport::from_file(path).with_context(|| format!("loading {}", path.display()))?;
            Box::new(replay.with_settings(settings))
        }
        TransportMode::Live => Box::new(ChatCompletionTransport::from_config(config)?),
    })
}
