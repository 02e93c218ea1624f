//! Per-instance cleaning rules and occlusion statistics of a corpus.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetManifest, SchemaError};
use crate::mask::{occlusion_rate, AmodalInstance, MaskError};

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("instance has an empty amodal mask")]
    EmptyAmodal,
    #[error("zero-size image")]
    ZeroSizeImage,
    #[error("manifest has no annotations")]
    EmptyManifest,
    #[error("invalid filter config: {0}")]
    Config(String),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    LowVisibility,
    ImageCoverage,
    StuffClass,
    WaltOcclusion,
}

impl DropReason {
    pub fn code(self) -> &'static str {
        match self {
            Self::LowVisibility => "low_visibility",
            Self::ImageCoverage => "image_coverage",
            Self::StuffClass => "stuff_class",
            Self::WaltOcclusion => "walt_occlusion",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Keep,
    Drop(DropReason),
}

impl Verdict {
    pub fn is_keep(self) -> bool {
        self == Verdict::Keep
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub min_visible_ratio: f64,
    pub max_image_coverage: f64,
    pub stuff_categories: BTreeSet<String>,
    pub max_walt_occlusion: f64,
    pub visibility: bool,
    pub coverage: bool,
    pub class: bool,
    /// Only meaningful for corpora with real occlusion annotations; off by default.
    pub walt: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_visible_ratio: 0.10,
            max_image_coverage: 0.90,
            stuff_categories: BTreeSet::new(),
            max_walt_occlusion: 0.9,
            visibility: true,
            coverage: true,
            class: true,
            walt: false,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), FilterError> {
        for (name, v) in [
            ("min_visible_ratio", self.min_visible_ratio),
            ("max_image_coverage", self.max_image_coverage),
            ("max_walt_occlusion", self.max_walt_occlusion),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(FilterError::Config(format!("{name} = {v} must lie in (0, 1)")));
            }
        }
        Ok(())
    }
}

/// Drops objects whose visible part is less than `min_ratio` of the whole.
pub fn filter_visibility(inst: &AmodalInstance, min_ratio: f64) -> Result<Verdict, FilterError> {
    let amodal = inst.amodal_mask.area();
    if amodal == 0 {
        return Err(FilterError::EmptyAmodal);
    }
    let ratio = inst.modal_mask.area() as f64 / amodal as f64;
    Ok(if ratio < min_ratio { Verdict::Drop(DropReason::LowVisibility) } else { Verdict::Keep })
}

/// Drops objects covering more than `max_ratio` of an `height x width` image.
pub fn filter_coverage(inst: &AmodalInstance, dims: (usize, usize), max_ratio: f64) -> Result<Verdict, FilterError> {
    let (h, w) = dims;
    if h == 0 || w == 0 {
        return Err(FilterError::ZeroSizeImage);
    }
    let ratio = inst.amodal_mask.area() as f64 / (h * w) as f64;
    Ok(if ratio > max_ratio { Verdict::Drop(DropReason::ImageCoverage) } else { Verdict::Keep })
}

pub fn filter_class(inst: &AmodalInstance, stuff: &BTreeSet<String>) -> Verdict {
    match &inst.category {
        Some(c) if stuff.contains(c) => Verdict::Drop(DropReason::StuffClass),
        _ => Verdict::Keep,
    }
}

pub fn filter_walt_occlusion(inst: &AmodalInstance, max_occlusion: f64) -> Result<Verdict, FilterError> {
    let r = occlusion_rate(inst).map_err(|_| FilterError::EmptyAmodal)?;
    Ok(if r > max_occlusion { Verdict::Drop(DropReason::WaltOcclusion) } else { Verdict::Keep })
}

/// All enabled filters; the first failing one names the reason.
pub fn apply_filters(inst: &AmodalInstance, dims: (usize, usize), cfg: &FilterConfig) -> Result<Verdict, FilterError> {
    if cfg.visibility {
        if let v @ Verdict::Drop(_) = filter_visibility(inst, cfg.min_visible_ratio)? {
            return Ok(v);
        }
    }
    if cfg.coverage {
        if let v @ Verdict::Drop(_) = filter_coverage(inst, dims, cfg.max_image_coverage)? {
            return Ok(v);
        }
    }
    if cfg.class {
        if let v @ Verdict::Drop(_) = filter_class(inst, &cfg.stuff_categories) {
            return Ok(v);
        }
    }
    if cfg.walt {
        if let v @ Verdict::Drop(_) = filter_walt_occlusion(inst, cfg.max_walt_occlusion)? {
            return Ok(v);
        }
    }
    Ok(Verdict::Keep)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DroppedAnnotation {
    pub annotation_id: u64,
    pub reason: DropReason,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub input: usize,
    pub kept: usize,
    pub dropped_by_reason: BTreeMap<String, usize>,
    pub dropped: Vec<DroppedAnnotation>,
}

/// Filters every annotation of a validated manifest. Images are kept as-is.
pub fn filter_manifest(manifest: &DatasetManifest, cfg: &FilterConfig) -> Result<(DatasetManifest, FilterReport), FilterError> {
    cfg.validate()?;
    let dims: BTreeMap<u64, (usize, usize)> = manifest.images.iter().map(|im| (im.id, (im.height, im.width))).collect();
    let mut out = manifest.clone();
    out.annotations.clear();
    let mut report = FilterReport { input: manifest.annotations.len(), ..Default::default() };
    for a in &manifest.annotations {
        let inst = a.to_instance()?;
        let d = *dims
            .get(&a.image_id)
            .ok_or_else(|| SchemaError::invalid(format!("annotation {}", a.id), format!("unknown image_id {}", a.image_id)))?;
        match apply_filters(&inst, d, cfg)? {
            Verdict::Keep => out.annotations.push(a.clone()),
            Verdict::Drop(reason) => {
                *report.dropped_by_reason.entry(reason.code().to_string()).or_default() += 1;
                report.dropped.push(DroppedAnnotation { annotation_id: a.id, reason });
            }
        }
    }
    report.kept = out.annotations.len();
    Ok((out, report))
}

/// Reads a stuff-category list: one name per line, `#` starts a comment.
pub fn load_stuff_list(path: &Path) -> Result<BTreeSet<String>, FilterError> {
    let text = std::fs::read_to_string(path).map_err(|source| FilterError::Io { path: path.display().to_string(), source })?;
    Ok(parse_stuff_list(&text))
}

pub fn parse_stuff_list(text: &str) -> BTreeSet<String> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_instances: usize,
    pub n_images: usize,
    /// Percentage of occluded instances.
    pub poi: f64,
    /// Mean occlusion rate of occluded instances, as a percentage.
    pub avg_ror: Option<f64>,
}

pub fn compute_stats(manifest: &DatasetManifest) -> Result<CorpusStats, FilterError> {
    stats_of(&manifest.instances()?, manifest.images.len())
}

pub fn stats_of(instances: &[AmodalInstance], n_images: usize) -> Result<CorpusStats, FilterError> {
    if instances.is_empty() {
        return Err(FilterError::EmptyManifest);
    }
    let mut rors = Vec::new();
    for inst in instances.iter().filter(|i| i.is_occluded) {
        rors.push(occlusion_rate(inst)?);
    }
    // summing in sorted order makes the mean independent of shard order
    rors.sort_by(f64::total_cmp);
    let avg_ror = (!rors.is_empty()).then(|| 100.0 * rors.iter().sum::<f64>() / rors.len() as f64);
    Ok(CorpusStats {
        n_instances: instances.len(),
        n_images,
        poi: 100.0 * rors.len() as f64 / instances.len() as f64,
        avg_ror,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{BinaryMask, Origin};
    use proptest::prelude::*;

    /// Amodal: a 10x10 block (area 100); the first `visible` pixels in
    /// row-major order of the block stay visible.
    fn with_visible(visible: usize, category: Option<&str>) -> AmodalInstance {
        let amodal = BinaryMask::rect(20, 20, 0, 0, 10, 10);
        let modal = BinaryMask::from_fn(20, 20, |x, y| x < 10 && y < 10 && y * 10 + x < visible);
        AmodalInstance::new(0, modal, amodal, category.map(Into::into), Origin::Real).unwrap()
    }

    #[test]
    fn visibility_boundaries() {
        assert_eq!(filter_visibility(&with_visible(5, None), 0.10).unwrap(), Verdict::Drop(DropReason::LowVisibility));
        assert_eq!(filter_visibility(&with_visible(10, None), 0.10).unwrap(), Verdict::Keep);
        assert_eq!(filter_visibility(&with_visible(100, None), 0.10).unwrap(), Verdict::Keep);
    }

    #[test]
    fn coverage_boundaries() {
        let m = |n: usize| {
            let mask = BinaryMask::from_fn(10, 10, |x, y| y * 10 + x < n);
            AmodalInstance::new(0, mask.clone(), mask, None, Origin::Real).unwrap()
        };
        assert_eq!(filter_coverage(&m(95), (10, 10), 0.90).unwrap(), Verdict::Drop(DropReason::ImageCoverage));
        assert_eq!(filter_coverage(&m(90), (10, 10), 0.90).unwrap(), Verdict::Keep);
        assert_eq!(filter_coverage(&m(2), (10, 10), 0.90).unwrap(), Verdict::Keep);
        assert!(matches!(filter_coverage(&m(2), (0, 10), 0.9), Err(FilterError::ZeroSizeImage)));
    }

    #[test]
    fn class_and_walt() {
        let stuff: BTreeSet<String> = ["wall", "floor"].iter().map(|s| s.to_string()).collect();
        assert_eq!(filter_class(&with_visible(50, Some("wall")), &stuff), Verdict::Drop(DropReason::StuffClass));
        assert_eq!(filter_class(&with_visible(50, Some("dog")), &stuff), Verdict::Keep);
        assert_eq!(filter_class(&with_visible(50, None), &stuff), Verdict::Keep);
        assert_eq!(filter_class(&with_visible(50, Some("wall")), &BTreeSet::new()), Verdict::Keep);

        assert_eq!(filter_walt_occlusion(&with_visible(1, None), 0.9).unwrap(), Verdict::Drop(DropReason::WaltOcclusion));
        assert_eq!(filter_walt_occlusion(&with_visible(100, None), 0.9).unwrap(), Verdict::Keep);
        assert_eq!(filter_walt_occlusion(&with_visible(10, None), 0.9).unwrap(), Verdict::Keep);
    }

    #[test]
    fn stuff_list_parsing() {
        let s = parse_stuff_list("wall\n# comment\n  floor  # trailing\n\nceiling\n");
        assert_eq!(s.into_iter().collect::<Vec<_>>(), vec!["ceiling", "floor", "wall"]);
    }

    #[test]
    fn stats_examples() {
        let a = with_visible(80, None); // ROR 0.2
        let b = with_visible(40, None); // ROR 0.6
        let c = with_visible(100, None);
        let s = stats_of(&[a, b, c.clone()], 1).unwrap();
        assert!((s.poi - 200.0 / 3.0).abs() < 1e-9);
        assert!((s.avg_ror.unwrap() - 40.0).abs() < 1e-9);
        let s = stats_of(&[c], 1).unwrap();
        assert_eq!(s.poi, 0.0);
        assert_eq!(s.avg_ror, None);
        assert!(matches!(stats_of(&[], 0), Err(FilterError::EmptyManifest)));
    }

    #[test]
    fn stats_of_dual_emitted_corpus() {
        let out = crate::synth::synthesize(&crate::synth::SynthesisConfig { pairs: 30, ..Default::default() }).unwrap();
        assert_eq!(compute_stats(&out.manifest).unwrap().poi, 50.0);
    }

    proptest! {
        #[test]
        fn filters_are_order_independent(visible in prop::collection::vec(0usize..=100, 1..40), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let cfg = FilterConfig { walt: true, max_walt_occlusion: 0.7, ..Default::default() };
            let insts: Vec<(usize, AmodalInstance)> = visible.iter().map(|&v| (v, with_visible(v.max(1), None))).collect();
            let kept = |xs: &[(usize, AmodalInstance)]| {
                let mut k: Vec<usize> = xs.iter().filter(|(_, i)| apply_filters(i, (20, 20), &cfg).unwrap().is_keep()).map(|(v, _)| *v).collect();
                k.sort();
                k
            };
            let mut shuffled = insts.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(kept(&insts), kept(&shuffled));
            // idempotent: refiltering the kept set keeps everything
            let once: Vec<_> = insts.iter().filter(|(_, i)| apply_filters(i, (20, 20), &cfg).unwrap().is_keep()).cloned().collect();
            prop_assert_eq!(kept(&once).len(), once.len());
        }
    }
}
