//! Synthetic occlusion: complete-object collection, size normalization,
//! ROR-controlled placement, compositing and dual annotation.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{AnnotationRecord, DatasetManifest, ImageRecord, ManifestInfo};
use crate::mask::{AmodalInstance, BinaryMask, BoundingBox, MaskError, Origin};
use crate::model::{Predictor, TrainingImage, TrainingSet};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("requested ROR {desired:.3} is unattainable; best reachable is {max_attainable:.3}")]
    Infeasible { desired: f64, max_attainable: f64 },
    #[error("no placement within tolerance of ROR {desired:.3}; closest was {best:.3}")]
    ToleranceMiss { desired: f64, best: f64 },
    #[error("degenerate object: {0}")]
    Degenerate(String),
    #[error("occluder lands entirely outside the canvas")]
    OffCanvas,
    #[error("instance {0} has no visible mask")]
    MissingVisible(usize),
    #[error("invalid synthesis config: {0}")]
    Config(String),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("predictor: {0}")]
    Predictor(String),
}

/// A whole, unoccluded object cut out of its image.
#[derive(Clone, Debug, PartialEq)]
pub struct CompleteObject {
    pub crop: RgbImage,
    /// Same size as `crop` and touching all four of its edges.
    pub mask: BinaryMask,
    pub source_id: u64,
    pub category: Option<String>,
}

impl CompleteObject {
    /// Cuts the tight box of `mask` (image-sized) out of `image`.
    pub fn cut(image: &RgbImage, mask: &BinaryMask, source_id: u64, category: Option<String>) -> Result<Self, SynthError> {
        if mask.width() != image.width() as usize || mask.height() != image.height() as usize {
            return Err(MaskError::DimensionMismatch(mask.height(), mask.width(), image.height() as usize, image.width() as usize).into());
        }
        let b = mask.tight_bbox()?;
        let (x0, y0, w, h) = (b.x as usize, b.y as usize, b.w as usize, b.h as usize);
        let crop = RgbImage::from_fn(w as u32, h as u32, |x, y| *image.get_pixel(x + x0 as u32, y + y0 as u32));
        let m = BinaryMask::from_fn(h, w, |x, y| mask.get(x + x0, y + y0));
        Ok(Self { crop, mask: m, source_id, category })
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }

    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn long_side(&self) -> usize {
        self.width().max(self.height())
    }
}

/// Anything that turns a box prompt into an amodal mask.
pub trait MaskPredictor {
    fn predict_mask(&self, image: &RgbImage, prompt: &BoundingBox) -> Result<BinaryMask, SynthError>;
}

impl MaskPredictor for Predictor {
    fn predict_mask(&self, image: &RgbImage, prompt: &BoundingBox) -> Result<BinaryMask, SynthError> {
        self.predict(image, prompt)
            .map(|p| p.mask())
            .map_err(|e| SynthError::Predictor(e.to_string()))
    }
}

/// Keeps instances whose predicted amodal mask (prompted with the visible
/// box) agrees with the visible mask, i.e. objects that look unoccluded.
pub fn collect_complete<P: MaskPredictor + ?Sized>(
    sources: &[TrainingImage],
    predictor: &P,
    iou_threshold: f64,
) -> Result<Vec<CompleteObject>, SynthError> {
    let mut out = Vec::new();
    let mut k = 0usize;
    for src in sources {
        for inst in &src.instances {
            let prompt = inst.modal_box.ok_or(SynthError::MissingVisible(k))?;
            let pred = predictor.predict_mask(&src.image, &prompt)?;
            if pred.iou(&inst.modal_mask)? >= iou_threshold {
                out.push(CompleteObject::cut(&src.image, &inst.modal_mask, k as u64, inst.category.clone())?);
            }
            k += 1;
        }
    }
    Ok(out)
}

/// Occluder rescaled so its long side is `target_long * s`, aspect kept.
pub fn normalize_size_with_scale(occluder: &CompleteObject, target_long: usize, s: f64) -> Result<CompleteObject, SynthError> {
    if occluder.width() <= 1 || occluder.height() <= 1 {
        return Err(SynthError::Degenerate(format!("occluder is {}x{}", occluder.width(), occluder.height())));
    }
    if target_long <= 1 {
        return Err(SynthError::Degenerate(format!("target long side {target_long}")));
    }
    if !(s.is_finite() && s > 0.0) {
        return Err(SynthError::Config(format!("scale {s}")));
    }
    let f = target_long as f64 * s / occluder.long_side() as f64;
    let w = ((occluder.width() as f64 * f).round() as usize).max(1);
    let h = ((occluder.height() as f64 * f).round() as usize).max(1);
    let mask = resize_cover(&occluder.mask, h, w);
    let (sw, sh) = (occluder.width() as f64 / w as f64, occluder.height() as f64 / h as f64);
    let crop = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let sx = (((x as f64 + 0.5) * sw) as u32).min(occluder.width() as u32 - 1);
        let sy = (((y as f64 + 0.5) * sh) as u32).min(occluder.height() as u32 - 1);
        *occluder.crop.get_pixel(sx, sy)
    });
    Ok(CompleteObject { crop, mask, source_id: occluder.source_id, category: occluder.category.clone() })
}

pub fn normalize_size<R: Rng + ?Sized>(
    occluder: &CompleteObject,
    target: &CompleteObject,
    scale_jitter: (f64, f64),
    rng: &mut R,
) -> Result<CompleteObject, SynthError> {
    let s = if scale_jitter.0 < scale_jitter.1 { rng.random_range(scale_jitter.0..scale_jitter.1) } else { scale_jitter.0 };
    normalize_size_with_scale(occluder, target.long_side(), s)
}

/// A destination pixel is set when any source pixel under its footprint is,
/// so edge rows and columns survive and the mask stays tight.
fn resize_cover(m: &BinaryMask, height: usize, width: usize) -> BinaryMask {
    let span = |i: usize, src: usize, dst: usize| {
        let a = i * src / dst;
        let b = ((i + 1) * src).div_ceil(dst).max(a + 1);
        a..b.min(src)
    };
    BinaryMask::from_fn(height, width, |x, y| {
        let xs = span(x, m.width(), width);
        span(y, m.height(), height).any(|sy| xs.clone().any(|sx| m.get(sx, sy)))
    })
}

/// Top-left offset of the occluder crop on the target's canvas.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub offset: (i64, i64),
    pub achieved_ror: f64,
}

/// Fraction of `target` covered by `occluder.mask` pasted at `offset`.
pub fn overlap_ror(target: &BinaryMask, occluder: &BinaryMask, offset: (i64, i64)) -> f64 {
    let area = target.area();
    if area == 0 {
        return 0.0;
    }
    let mut hit = 0usize;
    for cy in 0..occluder.height() {
        let y = offset.1 + cy as i64;
        if y < 0 || y >= target.height() as i64 {
            continue;
        }
        for cx in 0..occluder.width() {
            let x = offset.0 + cx as i64;
            if x >= 0 && x < target.width() as i64 && occluder.get(cx, cy) && target.get(x as usize, y as usize) {
                hit += 1;
            }
        }
    }
    hit as f64 / area as f64
}

const LOCAL_RADIUS: i64 = 4;

/// Finds an occluder offset whose ROR on `target` is within `tolerance` of
/// `desired`. The occluder centre starts outside the target along `angle`
/// and moves toward the target centre; the approach parameter is bisected,
/// then a small integer neighbourhood absorbs rounding.
pub fn place_occluder(
    target: &BinaryMask,
    occluder: &CompleteObject,
    desired: f64,
    tolerance: f64,
    angle: f64,
) -> Result<Placement, SynthError> {
    if !(0.0..1.0).contains(&desired) || !(tolerance > 0.0) {
        return Err(SynthError::Config(format!("desired ROR {desired}, tolerance {tolerance}")));
    }
    let tb = target.tight_bbox()?;
    let (tcx, tcy) = tb.center();
    let (ow, oh) = (occluder.width() as f64, occluder.height() as f64);
    let reach = 0.5 * (tb.w.hypot(tb.h) + ow.hypot(oh)) + 1.0;
    let (sx, sy) = (tcx + reach * angle.cos(), tcy + reach * angle.sin());
    let offset_at = |t: f64| {
        let cx = sx + t * (tcx - sx);
        let cy = sy + t * (tcy - sy);
        ((cx - ow / 2.0).round() as i64, (cy - oh / 2.0).round() as i64)
    };
    let ror = |o: (i64, i64)| overlap_ror(target, &occluder.mask, o);

    if desired == 0.0 {
        let o = offset_at(0.0);
        return Ok(Placement { offset: o, achieved_ror: ror(o) });
    }
    let bound = (occluder.mask.area() as f64 / target.area() as f64).min(1.0);
    if bound < desired - tolerance {
        return Err(SynthError::Infeasible { desired, max_attainable: bound });
    }

    const SCAN: usize = 64;
    let samples: Vec<(f64, f64)> = (0..=SCAN)
        .map(|i| {
            let t = i as f64 / SCAN as f64;
            (t, ror(offset_at(t)))
        })
        .collect();
    let (best_t, best_r) = samples.iter().copied().fold((0.0, 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let Some(first) = samples.iter().position(|&(_, r)| r >= desired) else {
        let mut max_attainable = best_r;
        let c = offset_at(best_t);
        for dy in -LOCAL_RADIUS..=LOCAL_RADIUS {
            for dx in -LOCAL_RADIUS..=LOCAL_RADIUS {
                max_attainable = max_attainable.max(ror((c.0 + dx, c.1 + dy)));
            }
        }
        if max_attainable < desired - tolerance {
            return Err(SynthError::Infeasible { desired, max_attainable });
        }
        return local_search(target, occluder, c, desired, tolerance);
    };
    let (mut lo, mut hi) = (if first == 0 { 0.0 } else { samples[first - 1].0 }, samples[first].0);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if ror(offset_at(mid)) < desired {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut best: Option<Placement> = None;
    for o in [offset_at(lo), offset_at(hi)] {
        let r = ror(o);
        if best.is_none_or(|b| (r - desired).abs() < (b.achieved_ror - desired).abs()) {
            best = Some(Placement { offset: o, achieved_ror: r });
        }
    }
    let best = best.expect("two candidates");
    if (best.achieved_ror - desired).abs() <= tolerance {
        return Ok(best);
    }
    local_search(target, occluder, best.offset, desired, tolerance)
}

fn local_search(
    target: &BinaryMask,
    occluder: &CompleteObject,
    centre: (i64, i64),
    desired: f64,
    tolerance: f64,
) -> Result<Placement, SynthError> {
    let mut best = Placement { offset: centre, achieved_ror: overlap_ror(target, &occluder.mask, centre) };
    // rings of increasing radius so the closest adequate offset wins
    for r in 1..=LOCAL_RADIUS {
        for dy in -r..=r {
            for dx in -r..=r {
                if dx.abs().max(dy.abs()) != r {
                    continue;
                }
                let o = (centre.0 + dx, centre.1 + dy);
                let v = overlap_ror(target, &occluder.mask, o);
                if (v - desired).abs() < (best.achieved_ror - desired).abs() {
                    best = Placement { offset: o, achieved_ror: v };
                }
            }
        }
        if (best.achieved_ror - desired).abs() <= tolerance {
            return Ok(best);
        }
    }
    Err(SynthError::ToleranceMiss { desired, best: best.achieved_ror })
}

/// Result of pasting one occluder over a scene holding the target.
#[derive(Clone, Debug)]
pub struct Composite {
    pub image: RgbImage,
    /// Target with unchanged amodal mask and the occluder carved out of its modal mask.
    pub target: AmodalInstance,
    /// The occluder as an unoccluded foreground instance (clipped to the canvas).
    pub occluder: AmodalInstance,
    /// Canvas mask of the pasted pixels.
    pub pasted: BinaryMask,
    /// The target vanished entirely; visibility filtering will drop it.
    pub fully_hidden: bool,
}

pub fn composite(
    base: &RgbImage,
    target: &AmodalInstance,
    occluder: &CompleteObject,
    offset: (i64, i64),
    image_id: u64,
) -> Result<Composite, SynthError> {
    let (w, h) = (base.width() as usize, base.height() as usize);
    if target.amodal_mask.width() != w || target.amodal_mask.height() != h {
        return Err(MaskError::DimensionMismatch(target.amodal_mask.height(), target.amodal_mask.width(), h, w).into());
    }
    let pasted = BinaryMask::from_fn(h, w, |x, y| {
        let cx = x as i64 - offset.0;
        let cy = y as i64 - offset.1;
        cx >= 0
            && cy >= 0
            && (cx as usize) < occluder.width()
            && (cy as usize) < occluder.height()
            && occluder.mask.get(cx as usize, cy as usize)
    });
    if pasted.is_empty() {
        return Err(SynthError::OffCanvas);
    }
    let mut image = base.clone();
    for y in 0..h {
        for x in 0..w {
            if pasted.get(x, y) {
                let p = occluder.crop.get_pixel((x as i64 - offset.0) as u32, (y as i64 - offset.1) as u32);
                image.put_pixel(x as u32, y as u32, *p);
            }
        }
    }
    let modal = target.modal_mask.subtract(&pasted)?;
    let fully_hidden = modal.is_empty();
    let target = AmodalInstance::new(
        image_id,
        modal,
        target.amodal_mask.clone(),
        target.category.clone(),
        Origin::SyntheticOccluded,
    )?;
    let occluder = AmodalInstance::new(
        image_id,
        pasted.clone(),
        pasted.clone(),
        occluder.category.clone(),
        Origin::SyntheticUnoccluded,
    )?;
    Ok(Composite { image, target, occluder, pasted, fully_hidden })
}

/// The occluded target and its original unoccluded version, sharing a key.
#[derive(Clone, Debug, PartialEq)]
pub struct DualPair {
    pub pair_key: u64,
    pub unoccluded: AmodalInstance,
    pub occluded: AmodalInstance,
}

pub fn dual_emit(original: &AmodalInstance, synthesized: &AmodalInstance, pair_key: u64) -> DualPair {
    let mut unoccluded = original.clone();
    unoccluded.modal_mask = original.amodal_mask.clone();
    unoccluded.modal_box = Some(original.amodal_box);
    unoccluded.is_occluded = false;
    unoccluded.origin = Origin::SyntheticUnoccluded;
    let mut occluded = synthesized.clone();
    occluded.origin = Origin::SyntheticOccluded;
    DualPair { pair_key, unoccluded, occluded }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Background {
    Flat,
    Noise,
}

impl Background {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "flat" => Some(Self::Flat),
            "noise" => Some(Self::Noise),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Rectangle,
    Ellipse,
}

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Self::Rectangle => "rectangle",
            Self::Ellipse => "ellipse",
        }
    }

    pub fn mask(self, w: usize, h: usize) -> BinaryMask {
        match self {
            Self::Rectangle => BinaryMask::full(h, w),
            Self::Ellipse => {
                let (rx, ry) = (w as f64 / 2.0, h as f64 / 2.0);
                BinaryMask::from_fn(h, w, |x, y| {
                    let dx = (x as f64 + 0.5 - rx) / rx;
                    let dy = (y as f64 + 0.5 - ry) / ry;
                    dx * dx + dy * dy <= 1.0
                })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    pub target_ror_range: (f64, f64),
    pub scale_jitter: (f64, f64),
    pub placement_tolerance: f64,
    pub seed: u64,
    pub pairs: usize,
    pub canvas_size: usize,
    /// Inclusive side-length range of generated objects, in pixels.
    pub object_size: (usize, usize),
    pub background: Background,
    pub dual_emission: bool,
    /// Also annotate each pasted occluder as a foreground instance.
    pub emit_occluders: bool,
    /// Fresh (occluder, direction, ROR) draws per pair before it is skipped.
    pub max_attempts: usize,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            target_ror_range: (0.15, 0.60),
            scale_jitter: (0.8, 1.2),
            placement_tolerance: 0.02,
            seed: 0,
            pairs: 100,
            canvas_size: 64,
            object_size: (16, 32),
            background: Background::Noise,
            dual_emission: true,
            emit_occluders: false,
            max_attempts: 8,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let (a, b) = self.target_ror_range;
        if !(0.0 < a && a <= b && b < 1.0) {
            return Err(SynthError::Config(format!("target_ror_range ({a}, {b}) must be ordered inside (0, 1)")));
        }
        let (a, b) = self.scale_jitter;
        if !(0.0 < a && a <= b) {
            return Err(SynthError::Config(format!("scale_jitter ({a}, {b}) must be ordered and positive")));
        }
        if !(self.placement_tolerance > 0.0) {
            return Err(SynthError::Config("placement_tolerance must be positive".into()));
        }
        let (lo, hi) = self.object_size;
        if lo < 2 || lo > hi || hi + 4 > self.canvas_size {
            return Err(SynthError::Config(format!(
                "object_size ({lo}, {hi}) must be ordered, at least 2 and fit a {} canvas",
                self.canvas_size
            )));
        }
        if self.max_attempts == 0 {
            return Err(SynthError::Config("max_attempts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub pair_key: u64,
    pub requested_ror: f64,
    pub achieved_ror: f64,
    pub attempts: usize,
    pub target_shape: Shape,
    pub occluder_shape: Shape,
    /// Long-side scale drawn from `scale_jitter`.
    pub occluder_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedPair {
    pub pair_key: u64,
    pub reason: String,
    pub max_attainable: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisReport {
    pub seed: u64,
    pub requested_pairs: usize,
    pub emitted_pairs: usize,
    pub failed_attempts: usize,
    pub mean_requested_ror: Option<f64>,
    pub mean_achieved_ror: Option<f64>,
    pub samples: Vec<SampleReport>,
    pub skipped: Vec<SkippedPair>,
}

/// A synthesized corpus held in memory.
#[derive(Clone, Debug)]
pub struct SynthesisOutput {
    pub manifest: DatasetManifest,
    /// Pixel data, aligned with `manifest.images`.
    pub images: Vec<RgbImage>,
    pub report: SynthesisReport,
}

impl SynthesisOutput {
    pub fn training_set(&self, name: &str) -> Result<TrainingSet, MaskError> {
        let mut images: Vec<TrainingImage> = self
            .images
            .iter()
            .map(|im| TrainingImage { image: im.clone(), instances: Vec::new() })
            .collect();
        let pos: std::collections::HashMap<u64, usize> =
            self.manifest.images.iter().enumerate().map(|(i, r)| (r.id, i)).collect();
        for a in &self.manifest.annotations {
            images[pos[&a.image_id]].instances.push(a.to_instance()?);
        }
        images.retain(|im| !im.instances.is_empty());
        Ok(TrainingSet { name: name.to_string(), images })
    }
}

fn random_color<R: Rng + ?Sized>(rng: &mut R) -> [u8; 3] {
    [rng.random_range(30..226), rng.random_range(30..226), rng.random_range(30..226)]
}

fn jitter<R: Rng + ?Sized>(c: u8, amp: i32, rng: &mut R) -> u8 {
    (c as i32 + rng.random_range(-amp..=amp)).clamp(0, 255) as u8
}

fn background<R: Rng + ?Sized>(kind: Background, size: usize, rng: &mut R) -> RgbImage {
    let base = [rng.random_range(60..196), rng.random_range(60..196), rng.random_range(60..196)];
    RgbImage::from_fn(size as u32, size as u32, |_, _| match kind {
        Background::Flat => Rgb(base),
        Background::Noise => Rgb([jitter(base[0], 24, rng), jitter(base[1], 24, rng), jitter(base[2], 24, rng)]),
    })
}

/// A textured rectangle or ellipse of random size and colour.
pub fn random_object<R: Rng + ?Sized>(size: (usize, usize), source_id: u64, rng: &mut R) -> CompleteObject {
    let shape = if rng.random_bool(0.5) { Shape::Rectangle } else { Shape::Ellipse };
    let w = rng.random_range(size.0..=size.1);
    let h = rng.random_range(size.0..=size.1);
    let color = random_color(rng);
    let crop = RgbImage::from_fn(w as u32, h as u32, |_, _| {
        Rgb([jitter(color[0], 10, rng), jitter(color[1], 10, rng), jitter(color[2], 10, rng)])
    });
    CompleteObject::cut(&crop, &shape.mask(w, h), source_id, Some(shape.name().into())).expect("shape masks are nonempty")
}

fn shape_of(obj: &CompleteObject) -> Shape {
    match obj.category.as_deref() {
        Some("ellipse") => Shape::Ellipse,
        _ => Shape::Rectangle,
    }
}

/// Pastes `obj` onto `image` with its crop's top-left at `(x0, y0)` and
/// returns the canvas mask.
fn paste(image: &mut RgbImage, obj: &CompleteObject, x0: usize, y0: usize) -> BinaryMask {
    let n = image.width() as usize;
    let m = BinaryMask::from_fn(image.height() as usize, n, |x, y| {
        x >= x0 && y >= y0 && x - x0 < obj.width() && y - y0 < obj.height() && obj.mask.get(x - x0, y - y0)
    });
    for y in 0..obj.height() {
        for x in 0..obj.width() {
            if obj.mask.get(x, y) {
                image.put_pixel((x0 + x) as u32, (y0 + y) as u32, *obj.crop.get_pixel(x as u32, y as u32));
            }
        }
    }
    m
}

struct PairOutcome {
    original: RgbImage,
    synthesized: RgbImage,
    pair: DualPair,
    occluder: AmodalInstance,
    report: SampleReport,
    failed: usize,
}

fn synthesize_pair(cfg: &SynthesisConfig, pair_key: u64) -> Result<PairOutcome, (SkippedPair, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(pair_key);
    let n = cfg.canvas_size;
    let target = random_object(cfg.object_size, 2 * pair_key, &mut rng);
    let x0 = rng.random_range(2..=n - 2 - target.width());
    let y0 = rng.random_range(2..=n - 2 - target.height());
    let mut original = background(cfg.background, n, &mut rng);
    let amodal = paste(&mut original, &target, x0, y0);
    let original_id = 2 * pair_key + 1;
    let synth_id = 2 * pair_key + 2;
    let target_inst = AmodalInstance::new(original_id, amodal.clone(), amodal.clone(), target.category.clone(), Origin::SyntheticUnoccluded)
        .expect("pasted object is nonempty");

    let mut last: Option<SkippedPair> = None;
    for attempt in 1..=cfg.max_attempts {
        let raw = random_object(cfg.object_size, 2 * pair_key + 1, &mut rng);
        let s = if cfg.scale_jitter.0 < cfg.scale_jitter.1 {
            rng.random_range(cfg.scale_jitter.0..cfg.scale_jitter.1)
        } else {
            cfg.scale_jitter.0
        };
        let (a, b) = cfg.target_ror_range;
        let desired = if a < b { rng.random_range(a..b) } else { a };
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let occ = match normalize_size_with_scale(&raw, target.long_side(), s) {
            Ok(o) => o,
            Err(e) => {
                last = Some(SkippedPair { pair_key, reason: e.to_string(), max_attainable: None });
                continue;
            }
        };
        let placement = match place_occluder(&amodal, &occ, desired, cfg.placement_tolerance, angle) {
            Ok(p) => p,
            Err(e) => {
                let max_attainable = match e {
                    SynthError::Infeasible { max_attainable, .. } => Some(max_attainable),
                    SynthError::ToleranceMiss { best, .. } => Some(best),
                    _ => None,
                };
                last = Some(SkippedPair { pair_key, reason: e.to_string(), max_attainable });
                continue;
            }
        };
        let comp = match composite(&original, &target_inst, &occ, placement.offset, synth_id) {
            Ok(c) if !c.fully_hidden => c,
            Ok(_) => {
                last = Some(SkippedPair { pair_key, reason: "target fully hidden".into(), max_attainable: None });
                continue;
            }
            Err(e) => {
                last = Some(SkippedPair { pair_key, reason: e.to_string(), max_attainable: None });
                continue;
            }
        };
        let pair = dual_emit(&target_inst, &comp.target, pair_key);
        return Ok(PairOutcome {
            original,
            synthesized: comp.image,
            pair,
            occluder: comp.occluder,
            report: SampleReport {
                pair_key,
                requested_ror: desired,
                achieved_ror: placement.achieved_ror,
                attempts: attempt,
                target_shape: shape_of(&target),
                occluder_shape: shape_of(&occ),
                occluder_scale: s,
            },
            failed: attempt - 1,
        });
    }
    Err((last.expect("at least one attempt"), cfg.max_attempts))
}

/// Generates `cfg.pairs` target/occluder pairs. Each pair uses its own RNG
/// stream derived from the seed and the pair index, so any subset can be
/// regenerated independently.
pub fn synthesize(cfg: &SynthesisConfig) -> Result<SynthesisOutput, SynthError> {
    cfg.validate()?;
    let mut manifest = DatasetManifest {
        info: Some(ManifestInfo { name: Some("synthetic-occlusion".into()), split: None, mixture_weight: None }),
        ..Default::default()
    };
    let mut images = Vec::new();
    let mut report = SynthesisReport {
        seed: cfg.seed,
        requested_pairs: cfg.pairs,
        emitted_pairs: 0,
        failed_attempts: 0,
        mean_requested_ror: None,
        mean_achieved_ror: None,
        samples: Vec::new(),
        skipped: Vec::new(),
    };
    let mut next_ann = 1u64;
    let n = cfg.canvas_size;
    let add_image = |manifest: &mut DatasetManifest, images: &mut Vec<RgbImage>, id: u64, im: RgbImage| {
        manifest.images.push(ImageRecord { id, width: n, height: n, file: format!("images/{id:06}.png") });
        images.push(im);
    };
    for k in 0..cfg.pairs as u64 {
        match synthesize_pair(cfg, k) {
            Ok(out) => {
                report.failed_attempts += out.failed;
                if cfg.dual_emission {
                    add_image(&mut manifest, &mut images, out.pair.unoccluded.image_id, out.original);
                    manifest.annotations.push(AnnotationRecord::from_instance(next_ann, &out.pair.unoccluded, Some(k)));
                    next_ann += 1;
                }
                add_image(&mut manifest, &mut images, out.pair.occluded.image_id, out.synthesized);
                manifest.annotations.push(AnnotationRecord::from_instance(next_ann, &out.pair.occluded, Some(k)));
                next_ann += 1;
                if cfg.emit_occluders {
                    manifest.annotations.push(AnnotationRecord::from_instance(next_ann, &out.occluder, None));
                    next_ann += 1;
                }
                report.samples.push(out.report);
            }
            Err((skip, failed)) => {
                report.failed_attempts += failed;
                report.skipped.push(skip);
            }
        }
    }
    report.emitted_pairs = report.samples.len();
    if !report.samples.is_empty() {
        let m = report.samples.len() as f64;
        report.mean_requested_ror = Some(report.samples.iter().map(|s| s.requested_ror).sum::<f64>() / m);
        report.mean_achieved_ror = Some(report.samples.iter().map(|s| s.achieved_ror).sum::<f64>() / m);
    }
    Ok(SynthesisOutput { manifest, images, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn square(n: usize) -> CompleteObject {
        CompleteObject {
            crop: RgbImage::from_pixel(n as u32, n as u32, Rgb([200, 10, 10])),
            mask: BinaryMask::full(n, n),
            source_id: 0,
            category: None,
        }
    }

    fn object(w: usize, h: usize, shape: Shape) -> CompleteObject {
        let crop = RgbImage::from_fn(w as u32, h as u32, |x, y| Rgb([x as u8, y as u8, 7]));
        CompleteObject::cut(&crop, &shape.mask(w, h), 1, Some(shape.name().into())).unwrap()
    }

    struct Fixed(BinaryMask);
    impl MaskPredictor for Fixed {
        fn predict_mask(&self, _: &RgbImage, _: &BoundingBox) -> Result<BinaryMask, SynthError> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn collect_complete_thresholds() {
        let visible = BinaryMask::rect(16, 16, 2, 2, 8, 4);
        let inst = AmodalInstance::new(0, visible.clone(), visible.clone(), None, Origin::Real).unwrap();
        let src = vec![TrainingImage { image: RgbImage::new(16, 16), instances: vec![inst] }];
        assert_eq!(collect_complete(&src, &Fixed(visible.clone()), 0.9).unwrap().len(), 1);
        // IoU 0.5: half of a doubled region
        let bigger = BinaryMask::rect(16, 16, 2, 2, 8, 8);
        assert!((bigger.iou(&visible).unwrap() - 0.5).abs() < 1e-12);
        assert!(collect_complete(&src, &Fixed(bigger.clone()), 0.9).unwrap().is_empty());
        assert_eq!(collect_complete(&src, &Fixed(BinaryMask::zeros(16, 16)), 0.0).unwrap().len(), 1);
        let obj = &collect_complete(&src, &Fixed(visible), 0.9).unwrap()[0];
        assert_eq!((obj.width(), obj.height()), (8, 4));
        assert_eq!(obj.mask.area(), 32);
    }

    #[test]
    fn collect_complete_requires_visible() {
        let amodal = BinaryMask::rect(8, 8, 1, 1, 3, 3);
        let inst = AmodalInstance::new(0, BinaryMask::zeros(8, 8), amodal, None, Origin::Real).unwrap();
        let src = vec![TrainingImage { image: RgbImage::new(8, 8), instances: vec![inst] }];
        assert!(matches!(collect_complete(&src, &Fixed(BinaryMask::zeros(8, 8)), 0.5), Err(SynthError::MissingVisible(0))));
    }

    #[test]
    fn normalize_examples() {
        let n = normalize_size_with_scale(&square(20), 20, 1.0).unwrap();
        assert_eq!(n.long_side(), 20);
        let n = normalize_size_with_scale(&object(100, 50, Shape::Rectangle), 60, 1.0).unwrap();
        assert_eq!((n.width(), n.height()), (60, 30));
        assert!(normalize_size_with_scale(&object(1, 9, Shape::Rectangle), 20, 1.0).is_err());
    }

    #[test]
    fn resize_cover_keeps_tightness() {
        for (w, h) in [(31, 17), (9, 30), (40, 40)] {
            let m = Shape::Ellipse.mask(w, h);
            for (nw, nh) in [(5, 3), (12, 7), (60, 33), (w, h)] {
                let r = resize_cover(&m, nh, nw);
                assert_eq!(r.tight_bbox().unwrap(), BoundingBox::new(0.0, 0.0, nw as f64, nh as f64));
            }
        }
    }

    #[test]
    fn place_zero_keeps_disjoint() {
        let target = BinaryMask::rect(64, 64, 20, 20, 16, 16);
        let p = place_occluder(&target, &square(16), 0.0, 0.02, 0.3).unwrap();
        assert_eq!(p.achieved_ror, 0.0);
    }

    #[test]
    fn place_half_square_matches_exhaustive_scan() {
        let target = BinaryMask::rect(64, 64, 24, 24, 16, 16);
        let occ = square(16);
        // exhaustive oracle: which offsets realize ROR 0.5 within tolerance
        let mut feasible = 0;
        for oy in 0..48i64 {
            for ox in 0..48i64 {
                let ix = (ox + 16).min(40) - ox.max(24);
                let iy = (oy + 16).min(40) - oy.max(24);
                let r = (ix.max(0) * iy.max(0)) as f64 / 256.0;
                if (r - 0.5).abs() <= 0.02 {
                    feasible += 1;
                }
            }
        }
        assert!(feasible > 0);
        for angle in [0.0, 0.7, 1.6, 3.1, 4.0, 5.5] {
            let p = place_occluder(&target, &occ, 0.5, 0.02, angle).unwrap();
            assert!((p.achieved_ror - 0.5).abs() <= 0.02, "{angle}: {p:?}");
            let ix = (p.offset.0 + 16).min(40) - p.offset.0.max(24);
            let iy = (p.offset.1 + 16).min(40) - p.offset.1.max(24);
            assert_eq!((ix.max(0) * iy.max(0)) as f64 / 256.0, p.achieved_ror);
        }
    }

    #[test]
    fn place_infeasible_area_bound() {
        let target = BinaryMask::rect(64, 64, 10, 10, 30, 30);
        let occ = square(9); // 81 / 900 = 0.09
        match place_occluder(&target, &occ, 0.9, 0.02, 1.0) {
            Err(SynthError::Infeasible { max_attainable, .. }) => assert!(max_attainable <= 0.09 + 1e-12),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn composite_examples() {
        let base = RgbImage::from_pixel(32, 32, Rgb([1, 2, 3]));
        let amodal = BinaryMask::rect(32, 32, 2, 2, 8, 8);
        let target = AmodalInstance::new(1, amodal.clone(), amodal.clone(), None, Origin::SyntheticUnoccluded).unwrap();
        let occ = object(6, 5, Shape::Ellipse);

        let far = composite(&base, &target, &occ, (20, 20), 2).unwrap();
        assert_eq!(far.target.modal_mask, amodal);
        assert!(!far.target.is_occluded);

        let big = square(12);
        let cover = composite(&base, &target, &big, (0, 0), 2).unwrap();
        assert!(cover.fully_hidden && cover.target.modal_mask.is_empty());

        let c = composite(&base, &target, &occ, (6, 4), 2).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                let (cx, cy) = (x as i64 - 6, y as i64 - 4);
                let inside = (0..6).contains(&cx) && (0..5).contains(&cy) && occ.mask.get(cx as usize, cy as usize);
                let want = if inside { *occ.crop.get_pixel(cx as u32, cy as u32) } else { *base.get_pixel(x, y) };
                assert_eq!(*c.image.get_pixel(x, y), want);
            }
        }
        assert_eq!(c.target.modal_mask, amodal.subtract(&c.pasted).unwrap());
        assert_eq!(c.target.amodal_mask, amodal);
        assert!(!c.occluder.is_occluded);
        assert!(matches!(composite(&base, &target, &occ, (40, 0), 2), Err(SynthError::OffCanvas)));
    }

    #[test]
    fn dual_emit_pairs() {
        let amodal = BinaryMask::rect(16, 16, 2, 2, 8, 8);
        let orig = AmodalInstance::new(1, amodal.clone(), amodal.clone(), None, Origin::SyntheticUnoccluded).unwrap();
        let occl = AmodalInstance::new(2, BinaryMask::rect(16, 16, 2, 2, 4, 8), amodal.clone(), None, Origin::SyntheticOccluded)
            .unwrap();
        let p = dual_emit(&orig, &occl, 9);
        assert!(!p.unoccluded.is_occluded && p.occluded.is_occluded);
        assert_eq!(p.unoccluded.amodal_mask, p.occluded.amodal_mask);
        assert_eq!(p.unoccluded.origin, Origin::SyntheticUnoccluded);
        assert_eq!(p.occluded.origin, Origin::SyntheticOccluded);
    }

    #[test]
    fn synthesize_small_corpus() {
        let cfg = SynthesisConfig { pairs: 20, seed: 3, ..Default::default() };
        let out = synthesize(&cfg).unwrap();
        out.manifest.validate().unwrap();
        assert_eq!(out.report.emitted_pairs + out.report.skipped.len(), 20);
        assert_eq!(out.manifest.annotations.len(), 2 * out.report.emitted_pairs);
        assert_eq!(out.images.len(), out.manifest.images.len());
        for s in &out.report.samples {
            assert!((s.achieved_ror - s.requested_ror).abs() <= 0.02);
        }
        let again = synthesize(&cfg).unwrap();
        assert_eq!(again.manifest, out.manifest);
        assert_eq!(again.images, out.images);
        let set = out.training_set("toy").unwrap();
        assert_eq!(set.num_instances(), out.manifest.annotations.len());
    }

    #[test]
    fn synthesize_rejects_bad_config() {
        let cfg = SynthesisConfig { target_ror_range: (0.6, 0.2), ..Default::default() };
        assert!(synthesize(&cfg).is_err());
        let cfg = SynthesisConfig { placement_tolerance: 0.0, ..Default::default() };
        assert!(synthesize(&cfg).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn aspect_preserved(w in 2usize..80, h in 2usize..80, target in 4usize..60, s in 0.5f64..1.5) {
            let occ = object(w, h, Shape::Ellipse);
            let (w, h) = (occ.width(), occ.height());
            let n = normalize_size_with_scale(&occ, target, s).unwrap();
            let f = target as f64 * s / w.max(h) as f64;
            prop_assert!((n.width() as f64 - w as f64 * f).abs() <= 1.0);
            prop_assert!((n.height() as f64 - h as f64 * f).abs() <= 1.0);
            prop_assert_eq!(n.mask.tight_bbox().unwrap(), BoundingBox::new(0.0, 0.0, n.width() as f64, n.height() as f64));
        }

        #[test]
        fn placement_within_tolerance(
            tw in 14usize..30, th in 14usize..30, ow in 14usize..30, oh in 14usize..30,
            te in any::<bool>(), oe in any::<bool>(), desired in 0.15f64..0.6, angle in 0.0f64..6.28,
        ) {
            let ts = if te { Shape::Ellipse } else { Shape::Rectangle };
            let os = if oe { Shape::Ellipse } else { Shape::Rectangle };
            let tm = ts.mask(tw, th);
            let target = BinaryMask::from_fn(64, 64, |x, y| x >= 16 && y >= 16 && x - 16 < tw && y - 16 < th && tm.get(x - 16, y - 16));
            let occ = object(ow, oh, os);
            match place_occluder(&target, &occ, desired, 0.02, angle) {
                Ok(p) => {
                    prop_assert!((p.achieved_ror - desired).abs() <= 0.02);
                    prop_assert_eq!(p.achieved_ror, overlap_ror(&target, &occ.mask, p.offset));
                }
                Err(SynthError::Infeasible { max_attainable, .. }) => prop_assert!(max_attainable < desired),
                Err(SynthError::ToleranceMiss { .. }) => {}
                Err(e) => prop_assert!(false, "{}", e),
            }
        }
    }
}
