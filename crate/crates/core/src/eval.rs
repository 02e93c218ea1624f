//! Mask AP/AR with greedy matching and 101-point interpolated precision,
//! plus an independent brute-force evaluator used to cross-check it.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetManifest, RleJson, SchemaError};
use crate::mask::{BinaryMask, MaskError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("invalid eval config: {0}")]
    Config(String),
    #[error("result image ids missing from the ground truth: {0:?}")]
    IdMismatch(Vec<u64>),
    #[error("oracle size guard: image {image_id} has {count} instances (limit {limit})")]
    SizeGuard { image_id: u64, count: usize, limit: usize },
    #[error(transparent)]
    Schema(#[from] SchemaError),
}

/// IoU thresholds `0.50, 0.55, ..., 0.95`, each the nearest double to its decimal.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    /// Per-image cap on detections, applied after sorting by score.
    pub max_detections: usize,
    pub class_agnostic: bool,
    /// Keep the full matching trace in the report.
    pub trace: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { iou_thresholds: coco_thresholds(), max_detections: 100, class_agnostic: true, trace: false }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.iou_thresholds.is_empty() {
            return Err(EvalError::Config("no IoU thresholds".into()));
        }
        if self.iou_thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(EvalError::Config("IoU thresholds must be strictly increasing".into()));
        }
        if self.iou_thresholds.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
            return Err(EvalError::Config("IoU thresholds must lie in (0, 1]".into()));
        }
        if self.max_detections == 0 {
            return Err(EvalError::Config("max_detections must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub image_id: u64,
    pub mask: BinaryMask,
    pub category: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub image_id: u64,
    pub mask: BinaryMask,
    pub score: f64,
    pub category: Option<String>,
}

/// Outcome of greedy matching for one detection (indices into the inputs).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub threshold: f64,
    pub image_id: u64,
    pub detection: usize,
    pub ground_truth: Option<usize>,
    pub iou: Option<f64>,
}

/// Greedy matching of detections (already sorted by descending score) to
/// ground truths: each detection takes the unmatched ground truth of highest
/// IoU at or above `threshold`, the lowest index on ties.
pub fn match_detections(dets: &[&BinaryMask], gts: &[&BinaryMask], threshold: f64) -> Result<Vec<Option<(usize, f64)>>, EvalError> {
    let ious = iou_matrix(dets, gts)?;
    Ok(greedy(&ious, gts.len(), threshold))
}

fn iou_matrix(dets: &[&BinaryMask], gts: &[&BinaryMask]) -> Result<Vec<Vec<f64>>, EvalError> {
    dets.iter()
        .map(|d| gts.iter().map(|g| d.iou(g).map_err(EvalError::from)).collect())
        .collect()
}

fn greedy(ious: &[Vec<f64>], n_gt: usize, threshold: f64) -> Vec<Option<(usize, f64)>> {
    let mut taken = vec![false; n_gt];
    ious.iter()
        .map(|row| {
            let mut best: Option<(usize, f64)> = None;
            for (g, &v) in row.iter().enumerate() {
                if taken[g] || v < threshold {
                    continue;
                }
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
            }
            best
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdResult {
    pub threshold: f64,
    pub ap: Option<f64>,
    pub recall: Option<f64>,
    /// Interpolated precision at recall `0.00, 0.01, ..., 1.00`.
    pub precision: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageBreakdown {
    pub image_id: u64,
    pub ground_truths: usize,
    pub detections: usize,
    /// Matches at the first IoU threshold.
    pub matched: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryResult {
    pub ground_truths: usize,
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ar: Option<f64>,
}

/// All metrics are percentages; `None` when there is no ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ar: Option<f64>,
    pub num_ground_truths: usize,
    pub num_detections: usize,
    pub per_threshold: Vec<ThresholdResult>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_image: Vec<ImageBreakdown>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_category: Option<BTreeMap<String, CategoryResult>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<MatchRecord>,
}

impl EvalReport {
    /// Precision/recall curves as CSV: `threshold,recall,precision`.
    pub fn pr_curve_csv(&self) -> String {
        let mut s = String::from("threshold,recall,precision\n");
        for t in &self.per_threshold {
            for (i, p) in t.precision.iter().enumerate() {
                let _ = writeln!(s, "{:.2},{:.2},{}", t.threshold, i as f64 / 100.0, p);
            }
        }
        s
    }
}

struct ImageGroup {
    image_id: u64,
    gts: Vec<usize>,
    /// Detection indices sorted by descending score and capped.
    dets: Vec<usize>,
}

fn group_by_image(dets: &[Detection], gts: &[GroundTruth], max_dets: usize) -> Vec<ImageGroup> {
    let mut ids: BTreeSet<u64> = gts.iter().map(|g| g.image_id).collect();
    ids.extend(dets.iter().map(|d| d.image_id));
    let mut by_gt: HashMap<u64, Vec<usize>> = HashMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_gt.entry(g.image_id).or_default().push(i);
    }
    let mut by_det: HashMap<u64, Vec<usize>> = HashMap::new();
    for (i, d) in dets.iter().enumerate() {
        by_det.entry(d.image_id).or_default().push(i);
    }
    ids.into_iter()
        .map(|id| {
            let mut d = by_det.remove(&id).unwrap_or_default();
            d.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
            d.truncate(max_dets);
            ImageGroup { image_id: id, gts: by_gt.remove(&id).unwrap_or_default(), dets: d }
        })
        .collect()
}

/// 101-point interpolated AP from detections in global ranking order.
fn interpolated(tp: &[bool], n_gt: usize) -> (f64, f64, Vec<f64>) {
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let (mut t, mut f) = (0usize, 0usize);
    for &hit in tp {
        if hit {
            t += 1;
        } else {
            f += 1;
        }
        precision.push(t as f64 / (t + f) as f64);
        recall.push(t as f64 / n_gt as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let curve: Vec<f64> = (0..=100)
        .map(|k| {
            let r = k as f64 / 100.0;
            let i = recall.partition_point(|&x| x < r);
            precision.get(i).copied().unwrap_or(0.0)
        })
        .collect();
    let ap = curve.iter().sum::<f64>() / curve.len() as f64;
    (ap, recall.last().copied().unwrap_or(0.0), curve)
}

fn pct(x: Option<f64>) -> Option<f64> {
    x.map(|v| 100.0 * v)
}

fn all_thresholds(cfg: &EvalConfig) -> Vec<f64> {
    let mut ts = cfg.iou_thresholds.clone();
    for extra in [0.5, 0.75] {
        if !ts.contains(&extra) {
            ts.push(extra);
        }
    }
    ts
}

struct Core {
    per_threshold: Vec<ThresholdResult>,
    ap: Option<f64>,
    ap50: Option<f64>,
    ap75: Option<f64>,
    ar: Option<f64>,
    per_image: Vec<ImageBreakdown>,
    trace: Vec<MatchRecord>,
    n_gt: usize,
    n_det: usize,
}

fn evaluate_core(dets: &[Detection], gts: &[GroundTruth], cfg: &EvalConfig) -> Result<Core, EvalError> {
    let groups = group_by_image(dets, gts, cfg.max_detections);
    let ious: Vec<Vec<Vec<f64>>> = groups
        .iter()
        .map(|g| {
            let d: Vec<&BinaryMask> = g.dets.iter().map(|&i| &dets[i].mask).collect();
            let t: Vec<&BinaryMask> = g.gts.iter().map(|&i| &gts[i].mask).collect();
            iou_matrix(&d, &t)
        })
        .collect::<Result<_, _>>()?;
    // global ranking: stable sort of the per-image lists concatenated in image order
    let mut ranking: Vec<(usize, usize)> =
        groups.iter().enumerate().flat_map(|(gi, g)| (0..g.dets.len()).map(move |k| (gi, k))).collect();
    ranking.sort_by(|a, b| dets[groups[b.0].dets[b.1]].score.total_cmp(&dets[groups[a.0].dets[a.1]].score));
    let n_gt = gts.len();
    let n_det = ranking.len();

    let thresholds = all_thresholds(cfg);
    let mut results = Vec::new();
    let mut trace = Vec::new();
    let mut per_image = Vec::new();
    for (ti, &thr) in thresholds.iter().enumerate() {
        let matches: Vec<Vec<Option<(usize, f64)>>> =
            groups.iter().zip(&ious).map(|(g, m)| greedy(m, g.gts.len(), thr)).collect();
        if ti == 0 {
            per_image = groups
                .iter()
                .zip(&matches)
                .map(|(g, m)| ImageBreakdown {
                    image_id: g.image_id,
                    ground_truths: g.gts.len(),
                    detections: g.dets.len(),
                    matched: m.iter().flatten().count(),
                })
                .collect();
        }
        if cfg.trace && ti < cfg.iou_thresholds.len() {
            for (g, m) in groups.iter().zip(&matches) {
                for (k, r) in m.iter().enumerate() {
                    trace.push(MatchRecord {
                        threshold: thr,
                        image_id: g.image_id,
                        detection: g.dets[k],
                        ground_truth: r.map(|(j, _)| g.gts[j]),
                        iou: r.map(|(_, v)| v),
                    });
                }
            }
        }
        let tp: Vec<bool> = ranking.iter().map(|&(gi, k)| matches[gi][k].is_some()).collect();
        let r = if n_gt == 0 {
            ThresholdResult { threshold: thr, ap: None, recall: None, precision: Vec::new() }
        } else {
            let (ap, recall, curve) = interpolated(&tp, n_gt);
            ThresholdResult { threshold: thr, ap: Some(ap), recall: Some(recall), precision: curve }
        };
        results.push(r);
    }
    let main = &results[..cfg.iou_thresholds.len()];
    let mean = |f: fn(&ThresholdResult) -> Option<f64>| -> Option<f64> {
        let v: Option<Vec<f64>> = main.iter().map(f).collect();
        v.map(|v| v.iter().sum::<f64>() / v.len() as f64)
    };
    let at = |t: f64| results.iter().find(|r| r.threshold == t).and_then(|r| r.ap);
    Ok(Core {
        ap: pct(mean(|r| r.ap)),
        ar: pct(mean(|r| r.recall)),
        ap50: pct(at(0.5)),
        ap75: pct(at(0.75)),
        per_threshold: results
            .into_iter()
            .map(|mut r| {
                r.ap = pct(r.ap);
                r.recall = pct(r.recall);
                r
            })
            .collect(),
        per_image,
        trace,
        n_gt,
        n_det,
    })
}

/// Class-agnostic (or, with `class_agnostic = false`, per-category averaged)
/// mask AP/AR.
pub fn average_precision(dets: &[Detection], gts: &[GroundTruth], cfg: &EvalConfig) -> Result<EvalReport, EvalError> {
    cfg.validate()?;
    check_scores(dets)?;
    let core = evaluate_core(dets, gts, cfg)?;
    let mut report = EvalReport {
        ap: core.ap,
        ap50: core.ap50,
        ap75: core.ap75,
        ar: core.ar,
        num_ground_truths: core.n_gt,
        num_detections: core.n_det,
        per_threshold: core.per_threshold,
        per_image: core.per_image,
        per_category: None,
        trace: core.trace,
    };
    if !cfg.class_agnostic {
        let per = per_category(dets, gts, cfg, evaluate_core)?;
        apply_category_means(&mut report, &per);
        report.per_category = Some(per);
    }
    Ok(report)
}

fn per_category(
    dets: &[Detection],
    gts: &[GroundTruth],
    cfg: &EvalConfig,
    eval: fn(&[Detection], &[GroundTruth], &EvalConfig) -> Result<Core, EvalError>,
) -> Result<BTreeMap<String, CategoryResult>, EvalError> {
    let key = |c: &Option<String>| c.clone().unwrap_or_default();
    let cats: BTreeSet<String> = gts.iter().map(|g| key(&g.category)).collect();
    let mut out = BTreeMap::new();
    for c in cats {
        let d: Vec<Detection> = dets.iter().filter(|d| key(&d.category) == c).cloned().collect();
        let g: Vec<GroundTruth> = gts.iter().filter(|g| key(&g.category) == c).cloned().collect();
        let core = eval(&d, &g, cfg)?;
        out.insert(c, CategoryResult { ground_truths: g.len(), ap: core.ap, ap50: core.ap50, ap75: core.ap75, ar: core.ar });
    }
    Ok(out)
}

fn apply_category_means(report: &mut EvalReport, per: &BTreeMap<String, CategoryResult>) {
    let mean = |f: fn(&CategoryResult) -> Option<f64>| {
        let v: Option<Vec<f64>> = per.values().map(f).collect();
        v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
    };
    report.ap = mean(|c| c.ap);
    report.ap50 = mean(|c| c.ap50);
    report.ap75 = mean(|c| c.ap75);
    report.ar = mean(|c| c.ar);
}

fn check_scores(dets: &[Detection]) -> Result<(), EvalError> {
    match dets.iter().position(|d| !d.score.is_finite()) {
        Some(i) => Err(EvalError::Config(format!("detection {i} has score {}", dets[i].score))),
        None => Ok(()),
    }
}

pub const ORACLE_LIMIT: usize = 20;

/// Brute-force evaluation of the same definitions: pixel-loop IoU, explicit
/// ranking keys, and interpolated precision taken directly as the maximum
/// precision over all ranks reaching each recall level.
pub fn oracle_ap(dets: &[Detection], gts: &[GroundTruth], cfg: &EvalConfig) -> Result<EvalReport, EvalError> {
    cfg.validate()?;
    check_scores(dets)?;
    let mut counts: BTreeMap<u64, (usize, usize)> = BTreeMap::new();
    for g in gts {
        counts.entry(g.image_id).or_default().0 += 1;
    }
    for d in dets {
        counts.entry(d.image_id).or_default().1 += 1;
    }
    for (&image_id, &(g, d)) in &counts {
        if g.max(d) > ORACLE_LIMIT {
            return Err(EvalError::SizeGuard { image_id, count: g.max(d), limit: ORACLE_LIMIT });
        }
    }
    let core = oracle_core(dets, gts, cfg)?;
    let mut report = EvalReport {
        ap: core.ap,
        ap50: core.ap50,
        ap75: core.ap75,
        ar: core.ar,
        num_ground_truths: core.n_gt,
        num_detections: core.n_det,
        per_threshold: core.per_threshold,
        per_image: Vec::new(),
        per_category: None,
        trace: Vec::new(),
    };
    if !cfg.class_agnostic {
        let per = per_category(dets, gts, cfg, oracle_core)?;
        apply_category_means(&mut report, &per);
        report.per_category = Some(per);
    }
    Ok(report)
}

fn pixel_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64, EvalError> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(MaskError::DimensionMismatch(a.height(), a.width(), b.height(), b.width()).into());
    }
    let (mut inter, mut union) = (0u64, 0u64);
    for y in 0..a.height() {
        for x in 0..a.width() {
            let (p, q) = (a.get(x, y), b.get(x, y));
            inter += (p && q) as u64;
            union += (p || q) as u64;
        }
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

fn oracle_core(dets: &[Detection], gts: &[GroundTruth], cfg: &EvalConfig) -> Result<Core, EvalError> {
    let images: BTreeSet<u64> = gts.iter().map(|g| g.image_id).chain(dets.iter().map(|d| d.image_id)).collect();
    // per-image rank: descending score, then input order
    let mut kept: Vec<(usize, usize, usize)> = Vec::new(); // (image rank, within-image rank, det index)
    for (ir, &id) in images.iter().enumerate() {
        let mut mine: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].image_id == id).collect();
        mine.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
        for (wr, &i) in mine.iter().take(cfg.max_detections).enumerate() {
            kept.push((ir, wr, i));
        }
    }
    let mut global = kept.clone();
    global.sort_by(|a, b| {
        dets[b.2].score.partial_cmp(&dets[a.2].score).unwrap().then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1))
    });
    let n_gt = gts.len();
    let thresholds = all_thresholds(cfg);
    let mut per_threshold = Vec::new();
    for &thr in &thresholds {
        let mut matched_gt = vec![false; gts.len()];
        let mut is_tp = vec![false; dets.len()];
        // matching is per image in within-image rank order
        let mut order = kept.clone();
        order.sort_by_key(|&(ir, wr, _)| (ir, wr));
        for &(_, _, di) in &order {
            let mut best: Option<(usize, f64)> = None;
            for gi in 0..gts.len() {
                if gts[gi].image_id != dets[di].image_id || matched_gt[gi] {
                    continue;
                }
                let v = pixel_iou(&dets[di].mask, &gts[gi].mask)?;
                if v >= thr && best.is_none_or(|(_, b)| v > b) {
                    best = Some((gi, v));
                }
            }
            if let Some((gi, _)) = best {
                matched_gt[gi] = true;
                is_tp[di] = true;
            }
        }
        if n_gt == 0 {
            per_threshold.push(ThresholdResult { threshold: thr, ap: None, recall: None, precision: Vec::new() });
            continue;
        }
        let points: Vec<(f64, f64)> = (1..=global.len())
            .map(|k| {
                let tp = global[..k].iter().filter(|e| is_tp[e.2]).count();
                (tp as f64 / n_gt as f64, tp as f64 / k as f64)
            })
            .collect();
        let curve: Vec<f64> = (0..=100)
            .map(|k| {
                let r = k as f64 / 100.0;
                points.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max)
            })
            .collect();
        let ap = curve.iter().sum::<f64>() / 101.0;
        let recall = points.last().map_or(0.0, |p| p.0);
        per_threshold.push(ThresholdResult { threshold: thr, ap: Some(100.0 * ap), recall: Some(100.0 * recall), precision: curve });
    }
    let main = &per_threshold[..cfg.iou_thresholds.len()];
    let mean = |f: fn(&ThresholdResult) -> Option<f64>| -> Option<f64> {
        let v: Option<Vec<f64>> = main.iter().map(f).collect();
        v.map(|v| v.iter().sum::<f64>() / v.len() as f64)
    };
    let at = |t: f64| per_threshold.iter().find(|r| r.threshold == t).and_then(|r| r.ap);
    Ok(Core {
        ap: mean(|r| r.ap),
        ar: mean(|r| r.recall),
        ap50: at(0.5),
        ap75: at(0.75),
        per_threshold: per_threshold.clone(),
        per_image: Vec::new(),
        trace: Vec::new(),
        n_gt,
        n_det: global.len(),
    })
}

/// A record of the inference result file, as consumed by the evaluator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub image_id: u64,
    pub bbox: [f64; 4],
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub box_kind: Option<crate::mask::BoxKind>,
    pub segmentation: RleJson,
    pub iou_estimate: f64,
    pub score_refined: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degenerate: bool,
}

/// Which score of a result record ranks detections.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreField {
    Refined,
    Front,
}

/// Evaluates a result file against the amodal masks of a ground-truth manifest.
pub fn evaluate_run(
    gt: &DatasetManifest,
    results: &[ResultRecord],
    score: ScoreField,
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    let known: BTreeSet<u64> = gt.images.iter().map(|im| im.id).collect();
    let missing: BTreeSet<u64> = results.iter().map(|r| r.image_id).filter(|id| !known.contains(id)).collect();
    if !missing.is_empty() {
        return Err(EvalError::IdMismatch(missing.into_iter().collect()));
    }
    let gts: Vec<GroundTruth> = gt
        .annotations
        .iter()
        .map(|a| {
            Ok(GroundTruth { image_id: a.image_id, mask: a.amodal_segmentation.to_mask()?, category: a.category.clone() })
        })
        .collect::<Result<_, MaskError>>()?;
    let dets: Vec<Detection> = results
        .iter()
        .map(|r| {
            Ok(Detection {
                image_id: r.image_id,
                mask: r.segmentation.to_mask()?,
                score: match score {
                    ScoreField::Refined => r.score_refined,
                    ScoreField::Front => r.score,
                },
                category: r.category.clone(),
            })
        })
        .collect::<Result<_, MaskError>>()?;
    average_precision(&dets, &gts, cfg)
}
