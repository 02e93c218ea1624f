//! Self-describing checkpoint: config, seed, iteration, named parameter blobs
//! (little-endian `f32`, base64) and optional optimizer state.

use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::predictor::{Predictor, PredictorConfig};
use super::prompt::PromptPolicy;
use super::train::{Adam, TrainConfig};
use super::ModelError;
use crate::nn::{ParamStore, Tensor};

pub const CHECKPOINT_FORMAT: &str = "amodal-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: String,
}

impl NamedTensor {
    pub fn encode(name: &str, t: &Tensor) -> Self {
        let mut bytes = Vec::with_capacity(t.len() * 4);
        for v in &t.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        Self { name: name.to_string(), rows: t.rows, cols: t.cols, data: STANDARD.encode(bytes) }
    }

    pub fn decode(&self) -> Result<Tensor, ModelError> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", self.name)))?;
        if bytes.len() != self.rows * self.cols * 4 {
            return Err(ModelError::Checkpoint(format!(
                "{}: {} bytes for a {}x{} tensor",
                self.name,
                bytes.len(),
                self.rows,
                self.cols
            )));
        }
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Ok(Tensor::from_vec(self.rows, self.cols, data))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub first_moments: Vec<NamedTensor>,
    pub second_moments: Vec<NamedTensor>,
}

impl OptimizerState {
    pub fn from_adam(adam: &Adam) -> Self {
        Self {
            step: adam.step,
            first_moments: adam.moments.iter().map(|(n, (m, _))| NamedTensor::encode(n, m)).collect(),
            second_moments: adam.moments.iter().map(|(n, (_, v))| NamedTensor::encode(n, v)).collect(),
        }
    }

    pub fn to_adam(&self) -> Result<Adam, ModelError> {
        let mut moments = BTreeMap::new();
        for (m, v) in self.first_moments.iter().zip(&self.second_moments) {
            if m.name != v.name {
                return Err(ModelError::Checkpoint(format!("moment names differ: {} / {}", m.name, v.name)));
            }
            moments.insert(m.name.clone(), (m.decode()?, v.decode()?));
        }
        Ok(Adam { step: self.step, moments })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: PredictorConfig,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub prompt_policy: Option<PromptPolicy>,
    pub seed: u64,
    pub iteration: u64,
    /// Position of the sampling stream, as a decimal string.
    #[serde(default)]
    pub rng_word_pos: String,
    pub params: Vec<NamedTensor>,
    #[serde(default)]
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn from_predictor(p: &Predictor, seed: u64, iteration: u64) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            config: p.config().clone(),
            train: None,
            prompt_policy: None,
            seed,
            iteration,
            rng_word_pos: "0".into(),
            params: p.params().iter().map(|(_, n, t)| NamedTensor::encode(n, t)).collect(),
            optimizer: None,
        }
    }

    /// Rebuilds the predictor, checking every parameter against the architecture.
    pub fn to_predictor(&self) -> Result<Predictor, ModelError> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(ModelError::Checkpoint(format!("unknown format {:?}", self.format)));
        }
        let reference = Predictor::new(self.config.clone())?;
        let mut store = ParamStore::default();
        let by_name: BTreeMap<&str, &NamedTensor> = self.params.iter().map(|p| (p.name.as_str(), p)).collect();
        for (_, name, t) in reference.params().iter() {
            let blob = by_name
                .get(name)
                .ok_or_else(|| ModelError::Checkpoint(format!("missing parameter {name}")))?;
            let value = blob.decode()?;
            if !value.same_shape(t) {
                return Err(ModelError::Checkpoint(format!(
                    "{name}: shape {}x{} does not match config ({}x{})",
                    value.rows, value.cols, t.rows, t.cols
                )));
            }
            store.insert(name, value);
        }
        if by_name.len() != reference.params().len() {
            return Err(ModelError::Checkpoint("checkpoint has parameters unknown to this config".into()));
        }
        Ok(Predictor::assemble(self.config.clone(), store))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))
    }
}
