//! Fine-tuning loop: per-batch dataset sampling, prompt sampling, the
//! Dice + Focal + λ·IoU objective and Adam updates restricted to the
//! trainable sub-networks.

use std::collections::BTreeMap;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, OptimizerState};
use super::predictor::{Part, Predictor};
use super::prompt::{sample_dataset, sample_prompt, MixtureSpec, PromptPolicy};
use super::ModelError;
use crate::losses::{loss_and_logit_grads, LossConfig, LossReport};
use crate::mask::AmodalInstance;
use crate::nn::{Graph, ParamId, Tensor};

/// Which mask the decoder is supervised with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskTarget {
    Amodal,
    Modal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub target: MaskTarget,
    pub loss: LossConfig,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 32,
            iterations: 1000,
            target: MaskTarget::Amodal,
            loss: LossConfig::default(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam without weight decay or schedule. Moments are kept per parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    pub step: u64,
    pub moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    /// Applies one update to every parameter that received a gradient.
    pub fn update(&mut self, model: &mut Predictor, grads: &BTreeMap<ParamId, Tensor>, cfg: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        for (&id, g) in grads {
            let name = model.params.name(id).to_string();
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| (Tensor::zeros(g.rows, g.cols), Tensor::zeros(g.rows, g.cols)));
            let p = model.params.get_mut(id);
            for i in 0..g.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + (1.0 - b1) * gi;
                v.data[i] = b2 * v.data[i] + (1.0 - b2) * gi * gi;
                let mh = m.data[i] as f64 / bc1;
                let vh = v.data[i] as f64 / bc2;
                p.data[i] -= (cfg.learning_rate * mh / (vh.sqrt() + cfg.eps)) as f32;
            }
        }
    }
}

/// One supervised example. `embedding` may carry a cached encoder output,
/// used only while the encoder is frozen.
#[derive(Clone, Copy)]
pub struct TrainSample<'a> {
    pub image: &'a RgbImage,
    pub instance: &'a AmodalInstance,
    pub embedding: Option<&'a Tensor>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub loss: LossReport,
    /// Mean IoU of the thresholded predictions against their targets.
    pub mask_iou: f64,
}

/// Forward, backward and one optimizer update over a batch.
pub fn train_step<R: Rng + ?Sized>(
    model: &mut Predictor,
    batch: &[TrainSample<'_>],
    policy: &PromptPolicy,
    cfg: &TrainConfig,
    opt: &mut Adam,
    rng: &mut R,
) -> Result<StepReport, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let size = model.config().image_size;
    let encoder_frozen = !model.config().is_trainable(Part::Encoder);
    let scale = 1.0 / batch.len() as f32;
    let mut grads: BTreeMap<ParamId, Tensor> = BTreeMap::new();
    let mut report = StepReport::default();
    for sample in batch {
        let target = match cfg.target {
            MaskTarget::Amodal => &sample.instance.amodal_mask,
            MaskTarget::Modal => &sample.instance.modal_mask,
        };
        if target.height() != size || target.width() != size {
            return Err(ModelError::Config(format!(
                "training masks must be {size}x{size}, got {}x{}",
                target.height(),
                target.width()
            )));
        }
        let prompt = sample_prompt(sample.instance, policy, rng);
        let mut g = Graph::new();
        let emb = match sample.embedding {
            Some(e) if encoder_frozen => g.input(e.clone()),
            _ => model.encode_graph(&mut g, sample.image),
        };
        let out = model.decode_graph(&mut g, emb, &prompt);
        let logits: Vec<f64> = g.value(out.mask_logits).data.iter().map(|&v| v as f64).collect();
        let iou_logit = g.value(out.iou_logit).data[0] as f64;
        let lg = loss_and_logit_grads(&logits, iou_logit, target, &cfg.loss)?;
        if !lg.report.is_finite() {
            return Err(ModelError::NonFinite {
                iteration: opt.step,
                detail: format!("{:?} on image {}", lg.report, sample.instance.image_id),
            });
        }
        let pred = crate::mask::BinaryMask::from_bits(size, size, logits.iter().map(|&z| z > 0.0).collect())?;
        report.mask_iou += pred.iou(target)? / batch.len() as f64;
        report.loss.dice += lg.report.dice / batch.len() as f64;
        report.loss.focal += lg.report.focal / batch.len() as f64;
        report.loss.iou += lg.report.iou / batch.len() as f64;
        report.loss.total += lg.report.total / batch.len() as f64;

        let mask_seed = Tensor::from_vec(size * size, 1, lg.mask_logits.iter().map(|&d| d as f32 * scale).collect());
        let iou_seed = Tensor::from_vec(1, 1, vec![lg.iou_logit as f32 * scale]);
        for (id, t) in g.backward(&[(out.mask_logits, mask_seed), (out.iou_logit, iou_seed)]) {
            match grads.get_mut(&id) {
                Some(acc) => acc.add_assign(&t),
                None => {
                    grads.insert(id, t);
                }
            }
        }
    }
    // frozen parts never reach the graph as trainable leaves; keep the guarantee explicit
    let trainable: Vec<&str> = model.config().trainable_parts.iter().map(|p| p.prefix()).collect();
    grads.retain(|id, _| trainable.iter().any(|pre| model.params.name(*id).starts_with(pre)));
    opt.update(model, &grads, cfg);
    Ok(report)
}

/// An image held in memory with its annotated instances.
#[derive(Clone, Debug)]
pub struct TrainingImage {
    pub image: RgbImage,
    pub instances: Vec<AmodalInstance>,
}

#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub name: String,
    pub images: Vec<TrainingImage>,
}

impl TrainingSet {
    pub fn num_instances(&self) -> usize {
        self.images.iter().map(|i| i.instances.len()).sum()
    }

    fn instance_index(&self) -> Vec<(usize, usize)> {
        self.images
            .iter()
            .enumerate()
            .flat_map(|(i, im)| (0..im.instances.len()).map(move |j| (i, j)))
            .collect()
    }
}

/// Owns the model, optimizer and sampling state of a training run.
pub struct Trainer {
    pub model: Predictor,
    pub optimizer: Adam,
    pub config: TrainConfig,
    pub policy: PromptPolicy,
    seed: u64,
    rng: ChaCha8Rng,
    cache: Vec<Vec<Option<Tensor>>>,
    pub history: Vec<StepReport>,
}

impl Trainer {
    pub fn new(model: Predictor, config: TrainConfig, policy: PromptPolicy, seed: u64) -> Result<Self, ModelError> {
        policy.validate()?;
        config.loss.validate()?;
        if config.batch_size == 0 {
            return Err(ModelError::Config("batch_size must be positive".into()));
        }
        Ok(Self {
            model,
            optimizer: Adam::default(),
            config,
            policy,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            cache: Vec::new(),
            history: Vec::new(),
        })
    }

    /// Restores model, optimizer moments and the sampling stream.
    pub fn resume(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        let model = ckpt.to_predictor()?;
        let config = ckpt.train.clone().unwrap_or_default();
        let policy = ckpt.prompt_policy.unwrap_or_default();
        let mut t = Self::new(model, config, policy, ckpt.seed)?;
        if let Some(state) = &ckpt.optimizer {
            t.optimizer = state.to_adam()?;
        }
        let pos: u128 = ckpt
            .rng_word_pos
            .parse()
            .map_err(|_| ModelError::Checkpoint(format!("bad rng position {}", ckpt.rng_word_pos)))?;
        t.rng.set_word_pos(pos);
        Ok(t)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn iteration(&self) -> u64 {
        self.optimizer.step
    }

    /// Runs `iterations` steps; each step draws a dataset by the mixture and a
    /// batch of instances uniformly (with replacement) from it.
    pub fn run(&mut self, sets: &[TrainingSet], mix: &MixtureSpec, iterations: u64) -> Result<(), ModelError> {
        if sets.len() != mix.sizes().len() {
            return Err(ModelError::Mixture(format!(
                "{} datasets but {} mixture weights",
                sets.len(),
                mix.sizes().len()
            )));
        }
        let indices: Vec<Vec<(usize, usize)>> = sets.iter().map(|s| s.instance_index()).collect();
        if let Some(i) = indices.iter().position(|ix| ix.is_empty()) {
            return Err(ModelError::Mixture(format!("dataset {} has no instances", sets[i].name)));
        }
        let frozen = !self.model.config().is_trainable(Part::Encoder);
        if self.cache.len() != sets.len() {
            self.cache = sets.iter().map(|s| vec![None; s.images.len()]).collect();
        }
        for _ in 0..iterations {
            let d = sample_dataset(mix, &mut self.rng);
            let picks: Vec<(usize, usize)> = (0..self.config.batch_size)
                .map(|_| indices[d][self.rng.random_range(0..indices[d].len())])
                .collect();
            if frozen {
                for &(i, _) in &picks {
                    if self.cache[d][i].is_none() {
                        self.cache[d][i] = Some(self.model.embed(&sets[d].images[i].image)?);
                    }
                }
            }
            let batch: Vec<TrainSample<'_>> = picks
                .iter()
                .map(|&(i, j)| TrainSample {
                    image: &sets[d].images[i].image,
                    instance: &sets[d].images[i].instances[j],
                    embedding: if frozen { self.cache[d][i].as_ref() } else { None },
                })
                .collect();
            let report = train_step(&mut self.model, &batch, &self.policy, &self.config, &mut self.optimizer, &mut self.rng)?;
            if self.optimizer.step % 100 == 0 {
                log::info!(
                    "iter {} loss {:.4} (dice {:.4} focal {:.4} iou {:.4}) mask IoU {:.3}",
                    self.optimizer.step,
                    report.loss.total,
                    report.loss.dice,
                    report.loss.focal,
                    report.loss.iou,
                    report.mask_iou
                );
            }
            self.history.push(report);
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_predictor(&self.model, self.seed, self.optimizer.step);
        ck.train = Some(self.config.clone());
        ck.prompt_policy = Some(self.policy);
        ck.optimizer = Some(OptimizerState::from_adam(&self.optimizer));
        ck.rng_word_pos = self.rng.get_word_pos().to_string();
        ck
    }
}

/// Trains a fresh (or given) predictor and returns its checkpoint.
pub fn train(
    model: Predictor,
    sets: &[TrainingSet],
    mix: &MixtureSpec,
    policy: PromptPolicy,
    cfg: TrainConfig,
    seed: u64,
) -> Result<Checkpoint, ModelError> {
    let iterations = cfg.iterations;
    let mut t = Trainer::new(model, cfg, policy, seed)?;
    t.run(sets, mix, iterations)?;
    Ok(t.checkpoint())
}
