use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use mindstream::extraction::{ClosurePolicy, FarewellLexicon, TransportSettings};
use mindstream::learners::{ModelKind, ModelSpec};
use mindstream::pipeline::{RunConfig, Scenario};
use mindstream::selection::{SelectorConfig, SelectorMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportMode {
    Live,
    Replay,
    Stub,
}

impl std::str::FromStr for TransportMode {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "live" => Ok(TransportMode::Live),
            "replay" => Ok(TransportMode::Replay),
            "stub" => Ok(TransportMode::Stub),
            other => bail!("unknown transport mode `{other}`"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportConfig {
    pub mode: TransportMode,
    /// Fixture file for `replay`.
    pub fixtures: Option<PathBuf>,
    /// Chat-completion URL for `live`.
    pub endpoint: Option<String>,
    pub model: Option<String>,
    /// Name of the environment variable holding the endpoint key.
    pub api_key_env: String,
    /// Score returned for every field in `stub` mode.
    pub stub_value: f64,
    pub timeout_secs: f64,
    pub max_retries: u32,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self {
            mode: TransportMode::Stub,
            fixtures: None,
            endpoint: None,
            model: None,
            api_key_env: "MINDSTREAM_API_KEY".into(),
            stub_value: 0.5,
            timeout_secs: 30.0,
            max_retries: 3,
        }
    }
}

impl TransportConfig {
    pub fn settings(&self) -> TransportSettings {
        TransportSettings {
            timeout: Duration::from_secs_f64(self.timeout_secs.max(0.0)),
            max_retries: self.max_retries,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub scenario: u8,
    pub model: ModelKind,
    pub selector: SelectorMode,
    pub threshold: Option<f64>,
    /// Expected number of sessions; sizes the selector warm-ups.
    pub horizon: usize,
    pub block_size: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            scenario: 1,
            model: ModelKind::Arfc,
            selector: SelectorMode::Variance,
            threshold: None,
            horizon: 601,
            block_size: 100,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn run_config(&self) -> Result<RunConfig> {
        let scenario = Scenario::try_from(self.scenario).map_err(anyhow::Error::msg)?;
        if self.block_size == 0 {
            bail!("block_size must be at least 1");
        }
        let mut selector = SelectorConfig::new(self.selector, self.horizon);
        selector.threshold = self.threshold;
        let mut run = RunConfig::new(scenario, ModelSpec::tuned(self.model, self.selector), selector, self.seed);
        run.block_size = self.block_size;
        Ok(run)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub listen: String,
    pub data_dir: PathBuf,
    /// Static bearer token; `None` leaves the API open.
    pub bearer_token: Option<String>,
    pub sweep_interval_secs: u64,
    pub inactivity_secs: i64,
    pub farewell: Vec<String>,
    /// Write a snapshot after every n-th `model_trained` event.
    pub snapshot_every: u64,
    pub transport: TransportConfig,
    pub run: ModelConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".into(),
            data_dir: PathBuf::from("data"),
            bearer_token: None,
            sweep_interval_secs: 30,
            inactivity_secs: 180,
            farewell: ["goodbye", "bye", "farewell", "see you"].map(String::from).to_vec(),
            snapshot_every: 1,
            transport: TransportConfig::default(),
            run: ModelConfig::default(),
        }
    }
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).context("parsing service config")
    }

    /// Reads the file (if any) and then applies `MINDSTREAM_*` overrides.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Self::from_toml(&text)?
            }
            None => Self::default(),
        };
        config.apply_env(|k| std::env::var(k).ok())?;
        Ok(config)
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(v) = get("MINDSTREAM_LISTEN") {
            self.listen = v;
        }
        if let Some(v) = get("MINDSTREAM_DATA_DIR") {
            self.data_dir = PathBuf::from(v);
        }
        if let Some(v) = get("MINDSTREAM_TOKEN") {
            self.bearer_token = Some(v).filter(|t| !t.is_empty());
        }
        if let Some(v) = get("MINDSTREAM_TRANSPORT") {
            self.transport.mode = v.parse()?;
        }
        if let Some(v) = get("MINDSTREAM_FIXTURES") {
            self.transport.fixtures = Some(PathBuf::from(v));
        }
        if let Some(v) = get("MINDSTREAM_ENDPOINT") {
            self.transport.endpoint = Some(v);
        }
        if let Some(v) = get("MINDSTREAM_MODEL_NAME") {
            self.transport.model = Some(v);
        }
        if let Some(v) = get("MINDSTREAM_MODEL") {
            self.run.model = v.parse()?;
        }
        if let Some(v) = get("MINDSTREAM_SELECTOR") {
            self.run.selector = v.parse().map_err(anyhow::Error::msg)?;
        }
        if let Some(v) = get("MINDSTREAM_SCENARIO") {
            self.run.scenario = v.parse().context("MINDSTREAM_SCENARIO")?;
        }
        if let Some(v) = get("MINDSTREAM_SEED") {
            self.run.seed = v.parse().context("MINDSTREAM_SEED")?;
        }
        Ok(())
    }

    pub fn closure_policy(&self) -> ClosurePolicy {
        ClosurePolicy {
            inactivity: chrono::Duration::seconds(self.inactivity_secs),
            lexicon: FarewellLexicon::new(self.farewell.iter()),
        }
    }
}
