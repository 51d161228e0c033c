//! Incremental classifiers behind a single learn-one / predict-one contract.

pub mod adwin;
pub mod alma;
pub mod arfc;
pub mod gnb;
pub mod hatc;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use adwin::{Adwin, DriftStatus};
pub use alma::{Alma, AlmaParams};
pub use arfc::{AdaptiveRandomForest, ArfcParams};
pub use gnb::GaussianNb;
pub use hatc::{HatcParams, HoeffdingAdaptiveTree, LeafPrediction, MaxFeatures};

use crate::extraction::Label;
use crate::features::NamedVector;
use crate::selection::SelectorMode;

/// Checkpoint format version written by [`Model::save`].
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassProbabilities {
    pub present: f64,
    pub absent: f64,
}

impl ClassProbabilities {
    pub fn new(present: f64, absent: f64) -> Self {
        Self { present, absent }
    }

    pub fn uniform() -> Self {
        Self::new(0.5, 0.5)
    }

    /// Normalizes two non-negative weights; degenerate input gives uniform.
    pub fn from_weights(present: f64, absent: f64) -> Self {
        let total = present + absent;
        if total > 0.0 && total.is_finite() && present >= 0.0 && absent >= 0.0 {
            Self::new(present / total, absent / total)
        } else {
            Self::uniform()
        }
    }

    /// Argmax; ties go to `Absent`.
    pub fn label(&self) -> Label {
        if self.present > self.absent {
            Label::Present
        } else {
            Label::Absent
        }
    }

    pub fn get(&self, label: Label) -> f64 {
        match label {
            Label::Present => self.present,
            Label::Absent => self.absent,
        }
    }
}

pub(crate) fn class_index(label: Label) -> usize {
    match label {
        Label::Present => 0,
        Label::Absent => 1,
    }
}

pub trait OnlineClassifier {
    fn learn_one(&mut self, x: &NamedVector, y: Label);

    fn predict_proba(&self, x: &NamedVector) -> ClassProbabilities;

    fn predict(&self, x: &NamedVector) -> Label {
        self.predict_proba(x).label()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum LearnerError {
    #[error("hoeffding bound needs range > 0, 0 < delta <= 1 and n >= 1 (got R={range}, delta={delta}, n={n})")]
    BoundDomain { range: f64, delta: f64, n: f64 },
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("checkpoint version {found} is not supported (expected {CHECKPOINT_VERSION})")]
    CheckpointVersion { found: u32 },
    #[error("checkpoint i/o: {0}")]
    Io(String),
    #[error("checkpoint format: {0}")]
    Format(String),
}

/// ε = sqrt(R² ln(1/δ) / 2n).
pub fn hoeffding_bound(range: f64, delta: f64, n: f64) -> Result<f64, LearnerError> {
    if !(range > 0.0 && delta > 0.0 && delta <= 1.0 && n >= 1.0) {
        return Err(LearnerError::BoundDomain { range, delta, n });
    }
    Ok((range * range * (1.0 / delta).ln() / (2.0 * n)).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Gnb,
    Alma,
    Hatc,
    Arfc,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Gnb, ModelKind::Alma, ModelKind::Hatc, ModelKind::Arfc];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Gnb => "gnb",
            ModelKind::Alma => "alma",
            ModelKind::Hatc => "hatc",
            ModelKind::Arfc => "arfc",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = LearnerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| LearnerError::UnknownModel(s.to_string()))
    }
}

/// Model family plus its hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelSpec {
    Gnb,
    Alma(AlmaParams),
    Hatc(HatcParams),
    Arfc(ArfcParams),
}

impl ModelSpec {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelSpec::Gnb => ModelKind::Gnb,
            ModelSpec::Alma(_) => ModelKind::Alma,
            ModelSpec::Hatc(_) => ModelKind::Hatc,
            ModelSpec::Arfc(_) => ModelKind::Arfc,
        }
    }

    /// Best grid point reported for each model and selector.
    pub fn tuned(kind: ModelKind, selector: SelectorMode) -> Self {
        match kind {
            ModelKind::Gnb => ModelSpec::Gnb,
            ModelKind::Alma => ModelSpec::Alma(AlmaParams {
                alpha: 0.5,
                b: 1.0,
                c: 1.0,
            }),
            ModelKind::Hatc => ModelSpec::Hatc(HatcParams {
                max_depth: None,
                tie_threshold: 0.5,
                max_size_mib: 50.0,
                ..HatcParams::default()
            }),
            ModelKind::Arfc => {
                let (n_models, max_features) = match selector {
                    SelectorMode::Variance => (100, MaxFeatures::Sqrt),
                    SelectorMode::Correlation => (10, MaxFeatures::Count(5)),
                };
                ModelSpec::Arfc(ArfcParams {
                    n_models,
                    max_features,
                    lambda: 50.0,
                    ..ArfcParams::default()
                })
            }
        }
    }

    pub fn build(&self, seed: u64) -> Model {
        match self {
            ModelSpec::Gnb => Model::Gnb(GaussianNb::new()),
            ModelSpec::Alma(p) => Model::Alma(Alma::new(*p)),
            ModelSpec::Hatc(p) => Model::Hatc(HoeffdingAdaptiveTree::new(p.clone(), seed)),
            ModelSpec::Arfc(p) => Model::Arfc(AdaptiveRandomForest::new(p.clone(), seed)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "state", rename_all = "lowercase")]
pub enum Model {
    Gnb(GaussianNb),
    Alma(Alma),
    Hatc(HoeffdingAdaptiveTree),
    Arfc(AdaptiveRandomForest),
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    model: Model,
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Gnb(_) => ModelKind::Gnb,
            Model::Alma(_) => ModelKind::Alma,
            Model::Hatc(_) => ModelKind::Hatc,
            Model::Arfc(_) => ModelKind::Arfc,
        }
    }

    fn inner(&self) -> &dyn OnlineClassifier {
        match self {
            Model::Gnb(m) => m,
            Model::Alma(m) => m,
            Model::Hatc(m) => m,
            Model::Arfc(m) => m,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn OnlineClassifier {
        match self {
            Model::Gnb(m) => m,
            Model::Alma(m) => m,
            Model::Hatc(m) => m,
            Model::Arfc(m) => m,
        }
    }

    /// SHA-256 over the serialized state, hex encoded.
    pub fn checkpoint_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("model state is always serializable");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn to_checkpoint(&self) -> Result<String, LearnerError> {
        serde_json::to_string(&Checkpoint {
            version: CHECKPOINT_VERSION,
            model: self.clone(),
        })
        .map_err(|e| LearnerError::Format(e.to_string()))
    }

    pub fn from_checkpoint(text: &str) -> Result<Self, LearnerError> {
        let header: serde_json::Value = serde_json::from_str(text).map_err(|e| LearnerError::Format(e.to_string()))?;
        let found = header.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != CHECKPOINT_VERSION {
            return Err(LearnerError::CheckpointVersion { found });
        }
        let cp: Checkpoint = serde_json::from_value(header).map_err(|e| LearnerError::Format(e.to_string()))?;
        Ok(cp.model)
    }

    pub fn save(&self, path: &Path) -> Result<(), LearnerError> {
        std::fs::write(path, self.to_checkpoint()?).map_err(|e| LearnerError::Io(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, LearnerError> {
        let text = std::fs::read_to_string(path).map_err(|e| LearnerError::Io(e.to_string()))?;
        Self::from_checkpoint(&text)
    }
}

impl OnlineClassifier for Model {
    fn learn_one(&mut self, x: &NamedVector, y: Label) {
        self.inner_mut().learn_one(x, y);
    }

    fn predict_proba(&self, x: &NamedVector) -> ClassProbabilities {
        self.inner().predict_proba(x)
    }
}
