use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::mask::{AmodalInstance, BoundingBox};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    Modal,
    Amodal,
    Random,
}

impl PromptMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "modal" => Some(Self::Modal),
            "amodal" => Some(Self::Amodal),
            "random" => Some(Self::Random),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Modal => "modal",
            Self::Amodal => "amodal",
            Self::Random => "random",
        }
    }
}

/// Which ground-truth box becomes the training prompt.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptPolicy {
    pub mode: PromptMode,
    pub random_modal_probability: f64,
}

impl Default for PromptPolicy {
    fn default() -> Self {
        Self { mode: PromptMode::Random, random_modal_probability: 0.5 }
    }
}

impl PromptPolicy {
    pub fn fixed(mode: PromptMode) -> Self {
        Self { mode, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(0.0..=1.0).contains(&self.random_modal_probability) {
            return Err(ModelError::Config(format!(
                "random_modal_probability {} outside [0, 1]",
                self.random_modal_probability
            )));
        }
        Ok(())
    }
}

/// Draws the prompt box for an instance. Fully hidden instances have no
/// modal box and always yield the amodal one.
pub fn sample_prompt<R: Rng + ?Sized>(inst: &AmodalInstance, policy: &PromptPolicy, rng: &mut R) -> BoundingBox {
    let modal = match policy.mode {
        PromptMode::Modal => true,
        PromptMode::Amodal => false,
        PromptMode::Random => rng.random_bool(policy.random_modal_probability),
    };
    match (modal, inst.modal_box) {
        (true, Some(b)) => b,
        _ => inst.amodal_box,
    }
}

/// Per-dataset sampling weights proportional to the log of each dataset's size.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureSpec {
    sizes: Vec<u64>,
    weights: Vec<f64>,
}

impl MixtureSpec {
    pub fn new(sizes: &[u64]) -> Result<Self, ModelError> {
        if sizes.is_empty() {
            return Err(ModelError::Mixture("no datasets".into()));
        }
        if let Some((i, s)) = sizes.iter().enumerate().find(|(_, &s)| s < 2) {
            return Err(ModelError::Mixture(format!("dataset {i} has size {s}; need at least 2")));
        }
        let logs: Vec<f64> = sizes.iter().map(|&s| (s as f64).ln()).collect();
        let total: f64 = logs.iter().sum();
        let weights = logs.iter().map(|l| l / total).collect();
        Ok(Self { sizes: sizes.to_vec(), weights })
    }

    pub fn sizes(&self) -> &[u64] {
        &self.sizes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Index of the dataset that supplies the next batch.
pub fn sample_dataset<R: Rng + ?Sized>(mix: &MixtureSpec, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, w) in mix.weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    mix.weights.len() - 1
}
