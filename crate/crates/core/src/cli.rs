//! Command implementations behind the `amodal` binary.
//!
//! Every command reads a flat config (file plus `--set` overrides), writes its
//! artifacts under the output directory and records the resolved settings in
//! `run.json` next to them.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::config::{resolve_seed, Config, ConfigError, SEED_ENV};
use crate::dataset::{load_image, resolve_image_path, save_png, DatasetManifest, SchemaError};
use crate::eval::{evaluate_run, EvalConfig, EvalError, ResultRecord, ScoreField};
use crate::experiments::{
    composition_ablation, constructed_refine_case, model_refine_case, permuted_refine_cases, pretrain, prompt_type_ablation,
    ExperimentError, RecipeConfig, ToyCorpus,
};
use crate::filter::{compute_stats, filter_manifest, load_stuff_list, FilterConfig, FilterError};
use crate::losses::LossConfig;
use crate::mask::BoundingBox;
use crate::model::{
    Checkpoint, MaskTarget, MixtureSpec, ModelError, Part, Predictor, PredictorConfig, PromptMode, PromptPolicy, TrainConfig,
    Trainer, TrainingImage, TrainingSet,
};
use crate::pipeline::{group_by_image, ingest_detections, run_inference, PipelineError};
use crate::synth::{synthesize, Background, SynthError, SynthesisConfig};
use crate::viz::{overlay_mask, render_manifest};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
/// Commit the binary was built from, when known.
pub const GIT_REV: Option<&str> = option_env!("AMODAL_GIT_REV");

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Schema(String),
    #[error("{0}")]
    Infeasible(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Failed(_) => 1,
            Self::Schema(_) => 2,
            Self::Infeasible(_) => 3,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => Self::Failed(e.to_string()),
            _ => Self::Schema(e.to_string()),
        }
    }
}

impl From<SchemaError> for CliError {
    fn from(e: SchemaError) -> Self {
        match e {
            SchemaError::Invalid { .. } | SchemaError::Json { .. } => Self::Schema(e.to_string()),
            _ => Self::Failed(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Config(_) | SynthError::Infeasible { .. } | SynthError::ToleranceMiss { .. } => Self::Infeasible(e.to_string()),
            _ => Self::Failed(e.to_string()),
        }
    }
}

impl From<FilterError> for CliError {
    fn from(e: FilterError) -> Self {
        match e {
            FilterError::Config(_) => Self::Infeasible(e.to_string()),
            FilterError::Schema(s) => s.into(),
            FilterError::Io { .. } => Self::Failed(e.to_string()),
            _ => Self::Schema(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) | ModelError::Mixture(_) | ModelError::Loss(_) => Self::Infeasible(e.to_string()),
            ModelError::Checkpoint(_) | ModelError::Mask(_) => Self::Schema(e.to_string()),
            _ => Self::Failed(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Config(_) => Self::Infeasible(e.to_string()),
            EvalError::Schema(s) => s.into(),
            _ => Self::Schema(e.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Model(m) => m.into(),
            PipelineError::Io { .. } => Self::Failed(e.to_string()),
            _ => Self::Schema(e.to_string()),
        }
    }
}

impl From<crate::mask::MaskError> for CliError {
    fn from(e: crate::mask::MaskError) -> Self {
        Self::Schema(e.to_string())
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Model(m) => m.into(),
            ExperimentError::Synth(s) => s.into(),
            ExperimentError::Eval(s) => s.into(),
            ExperimentError::Mask(m) => m.into(),
        }
    }
}

fn io_err(path: &Path, e: impl Display) -> CliError {
    CliError::Failed(format!("{}: {e}", path.display()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    IouRefine,
    PromptType,
    Composition,
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Self::IouRefine => "iou-refine",
            Self::PromptType => "prompt-type",
            Self::Composition => "composition",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Command {
    Synth,
    Filter { input: PathBuf },
    Stats { input: PathBuf },
    Train { inputs: Vec<PathBuf>, init: Option<PathBuf>, resume: Option<PathBuf> },
    Infer { input: PathBuf, checkpoint: PathBuf, detections: PathBuf },
    Eval { input: PathBuf, results: PathBuf },
    Ablate { which: Ablation },
    Viz { input: PathBuf, results: Option<PathBuf> },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Synth => "synth",
            Self::Filter { .. } => "filter",
            Self::Stats { .. } => "stats",
            Self::Train { .. } => "train",
            Self::Infer { .. } => "infer",
            Self::Eval { .. } => "eval",
            Self::Ablate { .. } => "ablate",
            Self::Viz { .. } => "viz",
        }
    }

    fn inputs(&self) -> Vec<String> {
        let p = |p: &PathBuf| p.display().to_string();
        match self {
            Self::Synth | Self::Ablate { .. } => vec![],
            Self::Filter { input } | Self::Stats { input } => vec![p(input)],
            Self::Train { inputs, init, resume } => inputs.iter().chain(init).chain(resume).map(p).collect(),
            Self::Infer { input, checkpoint, detections } => vec![p(input), p(checkpoint), p(detections)],
            Self::Eval { input, results } => vec![p(input), p(results)],
            Self::Viz { input, results } => std::iter::once(input).chain(results).map(p).collect(),
        }
    }

    fn known_keys(&self) -> Vec<&'static str> {
        let mut keys = vec!["seed"];
        match self {
            Self::Synth => keys.extend(SYNTH_KEYS),
            Self::Filter { .. } => keys.extend(FILTER_KEYS),
            Self::Stats { .. } | Self::Viz { .. } | Self::Infer { .. } => {}
            Self::Train { .. } => keys.extend(MODEL_KEYS.iter().chain(TRAIN_KEYS)),
            Self::Eval { .. } => keys.extend(EVAL_KEYS),
            Self::Ablate { .. } => keys.extend(MODEL_KEYS.iter().chain(RECIPE_KEYS)),
        }
        keys
    }
}

const SYNTH_KEYS: &[&str] = &[
    "synth.ror",
    "synth.scale_jitter",
    "synth.tolerance",
    "synth.pairs",
    "synth.canvas",
    "synth.object_size",
    "synth.background",
    "synth.dual_emission",
    "synth.emit_occluders",
    "synth.max_attempts",
];
const FILTER_KEYS: &[&str] = &[
    "filter.stuff",
    "filter.stuff_file",
    "filter.min_visible_ratio",
    "filter.max_image_coverage",
    "filter.max_walt_occlusion",
    "filter.visibility",
    "filter.coverage",
    "filter.class",
    "filter.walt",
];
const MODEL_KEYS: &[&str] = &[
    "model.image_size",
    "model.patch_size",
    "model.embed_dim",
    "model.encoder_depth",
    "model.decoder_depth",
    "model.num_heads",
    "model.upscale_dim",
    "model.pe_scale",
    "model.trainable_parts",
    "model.seed",
];
const TRAIN_KEYS: &[&str] = &[
    "train.lr",
    "train.batch_size",
    "train.iterations",
    "train.target",
    "train.beta1",
    "train.beta2",
    "train.eps",
    "loss.lambda_iou",
    "loss.gamma",
    "loss.probability_floor",
    "prompt.mode",
    "prompt.modal_probability",
];
const EVAL_KEYS: &[&str] = &["eval.score", "eval.iou_thresholds", "eval.max_detections", "eval.class_agnostic", "eval.trace"];
const RECIPE_KEYS: &[&str] = &[
    "recipe.train_pairs",
    "recipe.test_pairs",
    "recipe.pretrain_iterations",
    "recipe.finetune_iterations",
    "recipe.composition_iterations",
    "recipe.batch_size",
    "recipe.lr",
    "ablate.with_model",
];

/// One invocation: command plus the common options.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub command: Command,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub overrides: Vec<String>,
}

/// Written to `run.json` in the output directory.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub git_rev: Option<String>,
    pub seed: u64,
    pub config_file: Option<String>,
    pub overrides: Vec<String>,
    /// Every setting the command consulted, with its effective value.
    pub resolved: BTreeMap<String, String>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

/// Typed config access that remembers the effective value of every key read.
struct Settings {
    config: Config,
    resolved: BTreeMap<String, String>,
}

impl Settings {
    fn get<T: FromStr + Display>(&mut self, key: &str, default: T) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        let v = self.config.get_or(key, default)?;
        self.resolved.insert(key.into(), v.to_string());
        Ok(v)
    }

    fn range(&mut self, key: &str, default: (f64, f64)) -> Result<(f64, f64), CliError> {
        let v = self.config.get_range(key, default)?;
        self.resolved.insert(key.into(), format!("{},{}", v.0, v.1));
        Ok(v)
    }

    fn choice<T: Copy>(&mut self, key: &str, default: &str, parse: impl Fn(&str) -> Option<T>) -> Result<T, CliError> {
        let raw = self.config.raw(key).unwrap_or(default).to_string();
        let v = parse(&raw).ok_or_else(|| CliError::Schema(format!("{key} = {raw:?}: unrecognized value")))?;
        self.resolved.insert(key.into(), raw);
        Ok(v)
    }

    fn list(&mut self, key: &str) -> Vec<String> {
        let v = self.config.get_list(key);
        if self.config.raw(key).is_some() {
            self.resolved.insert(key.into(), v.join(","));
        }
        v
    }

    fn opt_path(&mut self, key: &str) -> Option<PathBuf> {
        let v = self.config.raw(key).map(PathBuf::from);
        if let Some(p) = &v {
            self.resolved.insert(key.into(), p.display().to_string());
        }
        v
    }
}

struct Outputs {
    dir: PathBuf,
    written: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        Ok(Self { dir: dir.to_path_buf(), written: Vec::new() })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.written.push(name.to_string());
        self.dir.join(name)
    }

    fn text(&mut self, name: &str, text: &str) -> Result<(), CliError> {
        let p = self.path(name);
        fs::write(&p, text).map_err(|e| io_err(&p, e))
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Failed(e.to_string()))?;
        s.push('\n');
        self.text(name, &s)
    }
}

/// What a command leaves behind besides its files.
#[derive(Clone, Debug, Default)]
pub struct RunOutcome {
    /// Human-readable summary for stdout.
    pub summary: String,
    pub manifest: Option<RunManifest>,
}

/// Runs a command. Artifacts written before an infeasibility error (for
/// example a synthesis run with skipped pairs) are kept.
pub fn run(spec: &RunSpec) -> Result<RunOutcome, CliError> {
    let mut config = match &spec.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    for o in &spec.overrides {
        config.set_override(o)?;
    }
    config.check_known(&spec.command.known_keys())?;
    let env = std::env::var(SEED_ENV).ok();
    let seed = resolve_seed(spec.seed, env.as_deref(), &config)?;
    let mut s = Settings { config, resolved: BTreeMap::new() };
    s.resolved.insert("seed".into(), seed.to_string());
    let mut out = Outputs::new(&spec.out)?;

    let result = match &spec.command {
        Command::Synth => cmd_synth(&mut s, seed, &mut out),
        Command::Filter { input } => cmd_filter(&mut s, input, &mut out),
        Command::Stats { input } => cmd_stats(input, &mut out),
        Command::Train { inputs, init, resume } => cmd_train(&mut s, seed, inputs, init.as_deref(), resume.as_deref(), &mut out),
        Command::Infer { input, checkpoint, detections } => cmd_infer(input, checkpoint, detections, &mut out),
        Command::Eval { input, results } => cmd_eval(&mut s, input, results, &mut out),
        Command::Ablate { which } => cmd_ablate(&mut s, seed, *which, &mut out),
        Command::Viz { input, results } => cmd_viz(input, results.as_deref(), &mut out),
    };

    let (summary, deferred) = match result {
        Ok(summary) => (summary, None),
        Err(CliError::Infeasible(msg)) if !out.written.is_empty() => (msg.clone(), Some(CliError::Infeasible(msg))),
        Err(e) => return Err(e),
    };
    let mut outputs = out.written.clone();
    outputs.push("run.json".into());
    let manifest = RunManifest {
        command: spec.command.name().into(),
        version: VERSION.into(),
        git_rev: GIT_REV.map(str::to_string),
        seed,
        config_file: spec.config.as_ref().map(|p| p.display().to_string()),
        overrides: spec.overrides.clone(),
        resolved: s.resolved,
        inputs: spec.command.inputs(),
        outputs,
    };
    out.json("run.json", &manifest)?;
    match deferred {
        Some(e) => Err(e),
        None => Ok(RunOutcome { summary, manifest: Some(manifest) }),
    }
}

fn synthesis_config(s: &mut Settings, seed: u64) -> Result<SynthesisConfig, CliError> {
    let d = SynthesisConfig::default();
    let size = s.range("synth.object_size", (d.object_size.0 as f64, d.object_size.1 as f64))?;
    if size.0.fract() != 0.0 || size.1.fract() != 0.0 || size.0 < 0.0 || size.1 < 0.0 {
        return Err(CliError::Schema(format!("synth.object_size = {},{}: expected whole pixel counts", size.0, size.1)));
    }
    Ok(SynthesisConfig {
        target_ror_range: s.range("synth.ror", d.target_ror_range)?,
        scale_jitter: s.range("synth.scale_jitter", d.scale_jitter)?,
        placement_tolerance: s.get("synth.tolerance", d.placement_tolerance)?,
        seed,
        pairs: s.get("synth.pairs", d.pairs)?,
        canvas_size: s.get("synth.canvas", d.canvas_size)?,
        object_size: (size.0 as usize, size.1 as usize),
        background: s.choice("synth.background", "noise", Background::parse)?,
        dual_emission: s.get("synth.dual_emission", d.dual_emission)?,
        emit_occluders: s.get("synth.emit_occluders", d.emit_occluders)?,
        max_attempts: s.get("synth.max_attempts", d.max_attempts)?,
    })
}

fn cmd_synth(s: &mut Settings, seed: u64, out: &mut Outputs) -> Result<String, CliError> {
    let cfg = synthesis_config(s, seed)?;
    let so = synthesize(&cfg)?;
    let images_dir = out.dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| io_err(&images_dir, e))?;
    for (rec, im) in so.manifest.images.iter().zip(&so.images) {
        let p = out.path(&rec.file);
        save_png(&p, im)?;
    }
    let p = out.path("annotations.json");
    so.manifest.save(&p)?;
    out.json("synthesis_report.json", &so.report)?;
    let poi = if so.manifest.annotations.is_empty() { None } else { Some(compute_stats(&so.manifest)?.poi) };
    let r = &so.report;
    let summary = format!(
        "synthesized {}/{} pairs, {} annotations, POI {}, mean ROR {}",
        r.emitted_pairs,
        r.requested_pairs,
        so.manifest.annotations.len(),
        poi.map_or("n/a".into(), |v| format!("{v:.1}%")),
        r.mean_achieved_ror.map_or("n/a".into(), |v| format!("{v:.3}")),
    );
    if !r.skipped.is_empty() {
        let keys: Vec<String> = r.skipped.iter().map(|k| format!("{} ({})", k.pair_key, k.reason)).collect();
        return Err(CliError::Infeasible(format!("{summary}; skipped {} pairs: {}", r.skipped.len(), keys.join("; "))));
    }
    Ok(summary)
}

fn cmd_filter(s: &mut Settings, input: &Path, out: &mut Outputs) -> Result<String, CliError> {
    let manifest = DatasetManifest::load(input)?;
    let d = FilterConfig::default();
    let mut stuff: std::collections::BTreeSet<String> = s.list("filter.stuff").into_iter().collect();
    if let Some(p) = s.opt_path("filter.stuff_file") {
        stuff.extend(load_stuff_list(&p)?);
    }
    let cfg = FilterConfig {
        min_visible_ratio: s.get("filter.min_visible_ratio", d.min_visible_ratio)?,
        max_image_coverage: s.get("filter.max_image_coverage", d.max_image_coverage)?,
        stuff_categories: stuff,
        max_walt_occlusion: s.get("filter.max_walt_occlusion", d.max_walt_occlusion)?,
        visibility: s.get("filter.visibility", d.visibility)?,
        coverage: s.get("filter.coverage", d.coverage)?,
        class: s.get("filter.class", d.class)?,
        walt: s.get("filter.walt", d.walt)?,
    };
    let (mut kept, report) = filter_manifest(&manifest, &cfg)?;
    // image paths must keep resolving from the new location
    for rec in &mut kept.images {
        let p = resolve_image_path(input, rec);
        rec.file = fs::canonicalize(&p).unwrap_or(p).display().to_string();
    }
    let p = out.path("annotations.json");
    kept.save(&p)?;
    out.json("filter_report.json", &report)?;
    Ok(format!("kept {} of {} annotations", report.kept, report.input))
}

fn cmd_stats(input: &Path, out: &mut Outputs) -> Result<String, CliError> {
    let manifest = DatasetManifest::load(input)?;
    let stats = compute_stats(&manifest)?;
    out.json("stats.json", &stats)?;
    Ok(serde_json::to_string(&stats).map_err(|e| CliError::Failed(e.to_string()))?)
}

fn predictor_config(s: &mut Settings, seed: u64, default_parts: &str) -> Result<PredictorConfig, CliError> {
    let d = PredictorConfig::default();
    let parts_raw = s.config.raw("model.trainable_parts").unwrap_or(default_parts).to_string();
    let mut parts = std::collections::BTreeSet::new();
    for name in parts_raw.split(',').map(str::trim).filter(|n| !n.is_empty()) {
        parts.insert(Part::parse(name).ok_or_else(|| CliError::Schema(format!("model.trainable_parts: unknown part {name:?}")))?);
    }
    s.resolved.insert("model.trainable_parts".into(), parts.iter().map(|p| p.name()).collect::<Vec<_>>().join(","));
    Ok(PredictorConfig {
        image_size: s.get("model.image_size", d.image_size)?,
        patch_size: s.get("model.patch_size", d.patch_size)?,
        embed_dim: s.get("model.embed_dim", d.embed_dim)?,
        encoder_depth: s.get("model.encoder_depth", d.encoder_depth)?,
        decoder_depth: s.get("model.decoder_depth", d.decoder_depth)?,
        num_heads: s.get("model.num_heads", d.num_heads)?,
        upscale_dim: s.get("model.upscale_dim", d.upscale_dim)?,
        pe_scale: s.get("model.pe_scale", d.pe_scale)?,
        trainable_parts: parts,
        seed: s.get("model.seed", seed)?,
    })
}

fn train_config(s: &mut Settings) -> Result<TrainConfig, CliError> {
    let d = TrainConfig::default();
    let l = LossConfig::default();
    Ok(TrainConfig {
        learning_rate: s.get("train.lr", d.learning_rate)?,
        batch_size: s.get("train.batch_size", d.batch_size)?,
        iterations: s.get("train.iterations", d.iterations)?,
        target: s.choice("train.target", "amodal", |v| match v {
            "amodal" => Some(MaskTarget::Amodal),
            "modal" => Some(MaskTarget::Modal),
            _ => None,
        })?,
        loss: LossConfig {
            lambda_iou: s.get("loss.lambda_iou", l.lambda_iou)?,
            gamma: s.get("loss.gamma", l.gamma)?,
            probability_floor: s.get("loss.probability_floor", l.probability_floor)?,
        },
        beta1: s.get("train.beta1", d.beta1)?,
        beta2: s.get("train.beta2", d.beta2)?,
        eps: s.get("train.eps", d.eps)?,
    })
}

fn prompt_policy(s: &mut Settings) -> Result<PromptPolicy, CliError> {
    let d = PromptPolicy::default();
    Ok(PromptPolicy {
        mode: s.choice("prompt.mode", d.mode.name(), PromptMode::parse)?,
        random_modal_probability: s.get("prompt.modal_probability", d.random_modal_probability)?,
    })
}

/// Loads a manifest together with its pixel data.
pub fn load_training_set(path: &Path) -> Result<TrainingSet, CliError> {
    let manifest = DatasetManifest::load(path)?;
    let mut by_image: BTreeMap<u64, Vec<_>> = BTreeMap::new();
    for inst in manifest.instances()? {
        by_image.entry(inst.image_id).or_default().push(inst);
    }
    let mut images = Vec::with_capacity(by_image.len());
    for (id, instances) in by_image {
        let rec = manifest.image(id).ok_or_else(|| CliError::Schema(format!("unknown image_id {id}")))?;
        let image = load_image(&resolve_image_path(path, rec))?;
        images.push(TrainingImage { image, instances });
    }
    let name = manifest
        .info
        .as_ref()
        .and_then(|i| i.name.clone())
        .unwrap_or_else(|| path.display().to_string());
    Ok(TrainingSet { name, images })
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    if !path.is_file() {
        return Err(CliError::Failed(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(Checkpoint::load(path)?)
}

fn cmd_train(
    s: &mut Settings,
    seed: u64,
    inputs: &[PathBuf],
    init: Option<&Path>,
    resume: Option<&Path>,
    out: &mut Outputs,
) -> Result<String, CliError> {
    if inputs.is_empty() {
        return Err(CliError::Schema("train needs at least one --input manifest".into()));
    }
    let sets = inputs.iter().map(|p| load_training_set(p)).collect::<Result<Vec<_>, _>>()?;
    let sizes: Vec<u64> = sets.iter().map(|t| t.num_instances() as u64).collect();
    let mix = MixtureSpec::new(&sizes)?;
    s.resolved.insert("train.mixture_weights".into(), mix.weights().iter().map(|w| format!("{w:.6}")).collect::<Vec<_>>().join(","));
    let mut trainer = match resume {
        Some(p) => {
            let t = Trainer::resume(&load_checkpoint(p)?)?;
            s.resolved.insert("train.iterations".into(), t.config.iterations.to_string());
            t
        }
        None => {
            let mut cfg = predictor_config(s, seed, "decoder")?;
            let model = match init {
                Some(p) => {
                    let mut m = load_checkpoint(p)?.to_predictor()?;
                    m.set_trainable_parts(std::mem::take(&mut cfg.trainable_parts));
                    m
                }
                None => Predictor::new(cfg)?,
            };
            Trainer::new(model, train_config(s)?, prompt_policy(s)?, seed)?
        }
    };
    let remaining = trainer.config.iterations.saturating_sub(trainer.iteration());
    let start = trainer.iteration();
    trainer.run(&sets, &mix, remaining)?;
    let mut log = String::from("iteration,total,dice,focal,iou,mask_iou\n");
    for (k, r) in trainer.history.iter().enumerate() {
        let l = &r.loss;
        log.push_str(&format!("{},{},{},{},{},{}\n", start + k as u64 + 1, l.total, l.dice, l.focal, l.iou, r.mask_iou));
    }
    out.text("train_log.csv", &log)?;
    let p = out.path("checkpoint.json");
    trainer.checkpoint().save(&p)?;
    let last = trainer.history.last();
    Ok(format!(
        "trained to iteration {}{}",
        trainer.iteration(),
        last.map_or(String::new(), |r| format!(", final loss {:.4}, mask IoU {:.3}", r.loss.total, r.mask_iou))
    ))
}

fn cmd_infer(input: &Path, checkpoint: &Path, detections: &Path, out: &mut Outputs) -> Result<String, CliError> {
    let ckpt = load_checkpoint(checkpoint)?;
    let manifest = DatasetManifest::load(input)?;
    let predictor = ckpt.to_predictor()?;
    let dims = |id: u64| manifest.image(id).map(|r| (r.width as usize, r.height as usize));
    let ingested = ingest_detections(detections, dims)?;
    for w in &ingested.warnings {
        log::warn!("{w}");
    }
    let mut records = Vec::new();
    let mut degenerate = 0;
    for (id, dets) in group_by_image(&ingested.records) {
        let rec = manifest.image(id).expect("ingest checks image ids");
        let image = load_image(&resolve_image_path(input, rec))?;
        for r in run_inference(&predictor, &image, id, &dets)? {
            degenerate += r.degenerate as usize;
            records.push(r.to_record());
        }
    }
    out.json("results.json", &records)?;
    Ok(format!("{} results ({} degenerate boxes, {} warnings)", records.len(), degenerate, ingested.warnings.len()))
}

fn load_results(path: &Path) -> Result<Vec<ResultRecord>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))
}

fn cmd_eval(s: &mut Settings, input: &Path, results: &Path, out: &mut Outputs) -> Result<String, CliError> {
    let gt = DatasetManifest::load(input)?;
    let records = load_results(results)?;
    let d = EvalConfig::default();
    let score = s.choice("eval.score", "refined", |v| match v {
        "refined" => Some(ScoreField::Refined),
        "front" => Some(ScoreField::Front),
        _ => None,
    })?;
    let thresholds = match s.config.raw("eval.iou_thresholds") {
        None => d.iou_thresholds.clone(),
        Some(_) => s
            .list("eval.iou_thresholds")
            .iter()
            .map(|t| t.parse::<f64>().map_err(|_| CliError::Schema(format!("eval.iou_thresholds: {t:?} is not a number"))))
            .collect::<Result<_, _>>()?,
    };
    let cfg = EvalConfig {
        iou_thresholds: thresholds,
        max_detections: s.get("eval.max_detections", d.max_detections)?,
        class_agnostic: s.get("eval.class_agnostic", d.class_agnostic)?,
        trace: s.get("eval.trace", d.trace)?,
    };
    let report = evaluate_run(&gt, &records, score, &cfg)?;
    out.json("eval_report.json", &report)?;
    out.text("pr_curve.csv", &report.pr_curve_csv())?;
    let f = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.2}"));
    Ok(format!("AP {} AP50 {} AP75 {} AR {}", f(report.ap), f(report.ap50), f(report.ap75), f(report.ar)))
}

fn recipe_config(s: &mut Settings, seed: u64) -> Result<RecipeConfig, CliError> {
    let d = RecipeConfig::default();
    Ok(RecipeConfig {
        seed,
        train_pairs: s.get("recipe.train_pairs", d.train_pairs)?,
        test_pairs: s.get("recipe.test_pairs", d.test_pairs)?,
        pretrain_iterations: s.get("recipe.pretrain_iterations", d.pretrain_iterations)?,
        finetune_iterations: s.get("recipe.finetune_iterations", d.finetune_iterations)?,
        composition_iterations: s.get("recipe.composition_iterations", d.composition_iterations)?,
        batch_size: s.get("recipe.batch_size", d.batch_size)?,
        learning_rate: s.get("recipe.lr", d.learning_rate)?,
        model: predictor_config(s, seed, "decoder")?,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |v| format!("{v:.2}"))
}

fn cmd_ablate(s: &mut Settings, seed: u64, which: Ablation, out: &mut Outputs) -> Result<String, CliError> {
    let mut table = String::new();
    match which {
        Ablation::IouRefine => {
            let mut rows = vec![constructed_refine_case()?];
            rows.extend(permuted_refine_cases()?);
            if s.get("ablate.with_model", false)? {
                let cfg = recipe_config(s, seed)?;
                let corpus = ToyCorpus::generate(&cfg)?;
                let train = corpus.train.training_set("train")?;
                let test = corpus.test.training_set("test")?;
                let pre = pretrain(&train, &cfg)?;
                let ft = crate::experiments::finetune(&pre, &train, PromptPolicy::default(), &cfg, seed.wrapping_add(1))?;
                rows.push(model_refine_case(&ft.model, &test, seed)?);
            }
            table.push_str("case,ap_without_refinement,ap_with_refinement,delta\n");
            for r in &rows {
                let delta = r.ap_refined.zip(r.ap_front).map(|(a, b)| a - b);
                table.push_str(&format!("{},{},{},{}\n", r.case, fmt_opt(r.ap_front), fmt_opt(r.ap_refined), fmt_opt(delta)));
            }
            out.json("ablation_iou-refine.json", &rows)?;
        }
        Ablation::PromptType => {
            let cfg = recipe_config(s, seed)?;
            let corpus = ToyCorpus::generate(&cfg)?;
            let pre = pretrain(&corpus.train.training_set("train")?, &cfg)?;
            let rows = prompt_type_ablation(&pre, &corpus, &cfg)?;
            table.push_str("policy,amodal_prompt_iou,modal_prompt_iou,mean_iou\n");
            for r in &rows {
                let sc = &r.scores;
                table.push_str(&format!(
                    "{},{:.4},{:.4},{:.4}\n",
                    r.policy.name(),
                    sc.amodal_prompt_iou,
                    sc.modal_prompt_iou,
                    sc.mean_iou
                ));
            }
            out.json("ablation_prompt-type.json", &rows)?;
        }
        Ablation::Composition => {
            let cfg = recipe_config(s, seed)?;
            let corpus = ToyCorpus::generate(&cfg)?;
            let pre = pretrain(&corpus.train.training_set("train")?, &cfg)?;
            let rows = composition_ablation(&pre, &corpus, &cfg)?;
            table.push_str("composition,background_leakage,foreground_iou,occluded_mean_iou\n");
            for r in &rows {
                let name = serde_json::to_value(r.composition).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
                table.push_str(&format!("{name},{:.4},{:.4},{:.4}\n", r.leakage, r.foreground_iou, r.occluded.mean_iou));
            }
            out.json("ablation_composition.json", &rows)?;
        }
    }
    out.text(&format!("ablation_{}.csv", which.name()), &table)?;
    Ok(table.trim_end().to_string())
}

fn cmd_viz(input: &Path, results: Option<&Path>, out: &mut Outputs) -> Result<String, CliError> {
    let manifest = DatasetManifest::load(input)?;
    let Some(results) = results else {
        let report = render_manifest(&manifest, input, &out.dir)?;
        for p in &report.written {
            out.written.push(p.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default());
        }
        return Ok(format!("wrote {} overlays", report.written.len()));
    };
    let records = load_results(results)?;
    let mut by_image: BTreeMap<u64, Vec<&ResultRecord>> = BTreeMap::new();
    for r in &records {
        by_image.entry(r.image_id).or_default().push(r);
    }
    let mut missing = Vec::new();
    for &id in by_image.keys() {
        match manifest.image(id) {
            None => return Err(CliError::Schema(format!("result image_id {id} is not in the manifest"))),
            Some(rec) if !resolve_image_path(input, rec).is_file() => missing.push(resolve_image_path(input, rec).display().to_string()),
            Some(_) => {}
        }
    }
    if !missing.is_empty() {
        return Err(CliError::Failed(format!("missing image files: {}", missing.join(", "))));
    }
    for (id, rs) in &by_image {
        let mut image = load_image(&resolve_image_path(input, manifest.image(*id).expect("checked")))?;
        for r in rs {
            let mask = r.segmentation.to_mask().map_err(|e| CliError::Schema(e.to_string()))?;
            let [x, y, w, h] = r.bbox;
            overlay_mask(&mut image, &mask, Some(&BoundingBox::new(x, y, w, h)));
        }
        let p = out.path(&format!("result_{id:06}.png"));
        save_png(&p, &image)?;
    }
    Ok(format!("wrote {} overlays", by_image.len()))
}
