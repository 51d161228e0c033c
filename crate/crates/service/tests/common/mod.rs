#![allow(dead_code)]

use std::path::Path;

use chrono::Duration;

use mindstream::extraction::{ClosurePolicy, ExtractionTransport, FarewellLexicon};
use mindstream::learners::{ModelKind, ModelSpec};
use mindstream::pipeline::{RunConfig, Scenario};
use mindstream::selection::{SelectorConfig, SelectorMode};
use mindstream::synthdata::SyntheticSession;
use mindstream_service::engine::{Engine, EngineOptions, UtteranceInput};

pub fn run_config(scenario: Scenario, kind: ModelKind, horizon: usize) -> RunConfig {
    RunConfig::new(
        scenario,
        ModelSpec::tuned(kind, SelectorMode::Variance),
        SelectorConfig::new(SelectorMode::Variance, horizon),
        3,
    )
}

/// Closure policy without farewell phrases, so tests decide when sessions end.
pub fn quiet_policy() -> ClosurePolicy {
    ClosurePolicy {
        inactivity: Duration::seconds(180),
        lexicon: FarewellLexicon::new(Vec::<String>::new()),
    }
}

pub fn open_engine(dir: &Path, config: RunConfig, transport: Box<dyn ExtractionTransport>) -> Engine {
    Engine::open(
        config,
        EngineOptions {
            data_dir: dir.to_path_buf(),
            policy: quiet_policy(),
            snapshot_every: 7,
        },
        transport,
    )
    .expect("engine opens")
}

/// Feeds a synthetic session utterance by utterance and closes it with its label.
pub fn feed(engine: &Engine, s: &SyntheticSession) -> mindstream_service::engine::ClosedSession {
    for u in &s.session.utterances {
        engine
            .add_utterance(
                &s.session.user_id,
                UtteranceInput {
                    speaker: u.speaker,
                    text: u.text.clone(),
                    t: u.timestamp,
                    session_id: None,
                    label: None,
                },
            )
            .expect("utterance accepted");
    }
    engine
        .close_current_blocking(&s.session.user_id, s.session.label)
        .expect("session classified")
}
