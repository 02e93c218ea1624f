//! The promptable amodal predictor, its prompt/mixture sampling policies,
//! training loop and checkpoint container.

mod checkpoint;
mod predictor;
mod prompt;
mod train;

pub use checkpoint::{Checkpoint, NamedTensor, OptimizerState, CHECKPOINT_FORMAT};
pub use predictor::{Part, Predictor, PredictorConfig, PromptedPrediction};
pub use prompt::{sample_dataset, sample_prompt, MixtureSpec, PromptMode, PromptPolicy};
pub use train::{
    train, train_step, Adam, MaskTarget, StepReport, TrainConfig, TrainSample, Trainer, TrainingImage,
    TrainingSet,
};

use crate::mask::{BoundingBox, MaskError};
use crate::losses::LossError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("box {0:?} has zero area after clamping to the image")]
    DegenerateBox(BoundingBox),
    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFinite { iteration: u64, detail: String },
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid mixture: {0}")]
    Mixture(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
