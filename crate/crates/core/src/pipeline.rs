//! Detector boxes in, amodal masks with refined confidences out.

use std::collections::BTreeMap;
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::RleJson;
use crate::eval::ResultRecord;
use crate::mask::{BinaryMask, BoundingBox, BoxKind};
use crate::model::{ModelError, Predictor};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{what} = {value} is outside [0, 1]")]
    OutOfRange { what: &'static str, value: f64 },
    #[error("detection record {index}{line}: {message}", line = line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Record { index: usize, line: Option<usize>, message: String },
    #[error("detection for image {got} passed with image {expected}")]
    WrongImage { expected: u64, got: u64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// `score_front × iou_estimate`.
pub fn refine_confidence(score_front: f64, iou_estimate: f64) -> Result<f64, PipelineError> {
    for (what, value) in [("score_front", score_front), ("iou_estimate", iou_estimate)] {
        if !(0.0..=1.0).contains(&value) {
            return Err(PipelineError::OutOfRange { what, value });
        }
    }
    Ok(score_front * iou_estimate)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionRecord {
    pub image_id: u64,
    /// Clamped to the image; may have zero area.
    pub bbox: BoundingBox,
    pub score_front: f64,
    pub category: Option<String>,
    pub box_kind: BoxKind,
    pub modal_mask: Option<BinaryMask>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AmodalResult {
    pub detection: DetectionRecord,
    pub amodal_mask: BinaryMask,
    pub iou_estimate: f64,
    pub score_refined: f64,
    /// The box was empty after clamping; the mask is empty and the score 0.
    pub degenerate: bool,
}

impl AmodalResult {
    pub fn to_record(&self) -> ResultRecord {
        ResultRecord {
            image_id: self.detection.image_id,
            bbox: self.detection.bbox.to_xywh(),
            score: self.detection.score_front,
            category: self.detection.category.clone(),
            box_kind: Some(self.detection.box_kind),
            segmentation: RleJson::from_mask(&self.amodal_mask),
            iou_estimate: self.iou_estimate,
            score_refined: self.score_refined,
            degenerate: self.degenerate,
        }
    }
}

/// Prompts the predictor with every detection of one image. Results keep the
/// input order; see [`sorted_by_refined`] for the ranked view.
pub fn run_inference(predictor: &Predictor, image: &RgbImage, image_id: u64, detections: &[DetectionRecord]) -> Result<Vec<AmodalResult>, PipelineError> {
    if detections.is_empty() {
        return Ok(Vec::new());
    }
    if let Some(d) = detections.iter().find(|d| d.image_id != image_id) {
        return Err(PipelineError::WrongImage { expected: image_id, got: d.image_id });
    }
    let (w, h) = (image.width() as usize, image.height() as usize);
    let embedding = predictor.embed(image)?;
    detections
        .iter()
        .map(|d| match predictor.predict_with_embedding(&embedding, h, w, &d.bbox) {
            Ok(p) => {
                let iou = p.iou_estimate.clamp(0.0, 1.0);
                Ok(AmodalResult {
                    detection: d.clone(),
                    amodal_mask: p.mask(),
                    iou_estimate: iou,
                    score_refined: refine_confidence(d.score_front, iou)?,
                    degenerate: false,
                })
            }
            Err(ModelError::DegenerateBox(_)) => Ok(AmodalResult {
                detection: d.clone(),
                amodal_mask: BinaryMask::zeros(h, w),
                iou_estimate: 0.0,
                score_refined: 0.0,
                degenerate: true,
            }),
            Err(e) => Err(e.into()),
        })
        .collect()
}

/// Indices of `results` by descending refined score; ties keep input order.
pub fn sorted_by_refined(results: &[AmodalResult]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..results.len()).collect();
    idx.sort_by(|&a, &b| results[b].score_refined.total_cmp(&results[a].score_refined));
    idx
}

/// One record of a detection file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionJson {
    pub image_id: u64,
    pub bbox: [f64; 4],
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub box_kind: Option<BoxKind>,
}

/// Parsed detections plus warnings about clamped boxes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Ingested {
    pub records: Vec<DetectionRecord>,
    pub warnings: Vec<String>,
}

/// Parses a JSON array or JSON-lines detection file. `dims` maps an image id
/// to `(width, height)`; unknown images are rejected.
pub fn parse_detections(text: &str, dims: impl Fn(u64) -> Option<(usize, usize)>) -> Result<Ingested, PipelineError> {
    let raw: Vec<(Option<usize>, DetectionJson)> = if text.trim_start().starts_with('[') {
        let v: Vec<serde_json::Value> = serde_json::from_str(text)
            .map_err(|e| PipelineError::Record { index: 0, line: Some(e.line()), message: e.to_string() })?;
        v.into_iter()
            .enumerate()
            .map(|(i, v)| {
                serde_json::from_value(v).map(|d| (None, d)).map_err(|e| PipelineError::Record {
                    index: i,
                    line: None,
                    message: e.to_string(),
                })
            })
            .collect::<Result<_, _>>()?
    } else {
        let mut out = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let d = serde_json::from_str(line).map_err(|e| PipelineError::Record {
                index: out.len(),
                line: Some(ln + 1),
                message: e.to_string(),
            })?;
            out.push((Some(ln + 1), d));
        }
        out
    };
    let mut ingested = Ingested::default();
    for (index, (line, d)) in raw.into_iter().enumerate() {
        let bad = |message: String| PipelineError::Record { index, line, message };
        if !(d.score.is_finite() && (0.0..=1.0).contains(&d.score)) {
            return Err(bad(format!("score {} outside [0, 1]", d.score)));
        }
        let [x, y, w, h] = d.bbox;
        if d.bbox.iter().any(|v| !v.is_finite()) || w < 0.0 || h < 0.0 {
            return Err(bad(format!("malformed bbox {:?}", d.bbox)));
        }
        let (iw, ih) = dims(d.image_id).ok_or_else(|| bad(format!("unknown image_id {}", d.image_id)))?;
        let b = BoundingBox::new(x, y, w, h);
        let clamped = clamp_box(&b, iw, ih);
        if clamped != b {
            let msg = format!("record {index}: bbox {:?} exceeds {iw}x{ih} image {}; clamped", d.bbox, d.image_id);
            log::warn!("{msg}");
            ingested.warnings.push(msg);
        }
        ingested.records.push(DetectionRecord {
            image_id: d.image_id,
            bbox: clamped,
            score_front: d.score,
            category: d.category,
            box_kind: d.box_kind.unwrap_or_default(),
            modal_mask: None,
        });
    }
    Ok(ingested)
}

/// Intersection with the image rectangle; may leave a zero-area box.
fn clamp_box(b: &BoundingBox, w: usize, h: usize) -> BoundingBox {
    let x0 = b.x.clamp(0.0, w as f64);
    let y0 = b.y.clamp(0.0, h as f64);
    let x1 = b.x1().clamp(0.0, w as f64);
    let y1 = b.y1().clamp(0.0, h as f64);
    BoundingBox::new(x0, y0, (x1 - x0).max(0.0), (y1 - y0).max(0.0))
}

pub fn ingest_detections(path: &Path, dims: impl Fn(u64) -> Option<(usize, usize)>) -> Result<Ingested, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io { path: path.display().to_string(), source })?;
    parse_detections(&text, dims)
}

/// Groups records by image id, keeping file order inside each group.
pub fn group_by_image(records: &[DetectionRecord]) -> BTreeMap<u64, Vec<DetectionRecord>> {
    let mut m: BTreeMap<u64, Vec<DetectionRecord>> = BTreeMap::new();
    for r in records {
        m.entry(r.image_id).or_default().push(r.clone());
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PredictorConfig;
    use proptest::prelude::*;

    #[test]
    fn refine_examples() {
        assert!((refine_confidence(0.8, 0.9).unwrap() - 0.72).abs() < 1e-15);
        assert_eq!(refine_confidence(1.0, 0.37).unwrap(), 0.37);
        assert_eq!(refine_confidence(0.0, 0.5).unwrap(), 0.0);
        assert_eq!(refine_confidence(0.5, 0.0).unwrap(), 0.0);
        assert!(refine_confidence(1.2, 0.5).is_err());
        assert!(refine_confidence(0.5, -0.1).is_err());
    }

    fn dims(id: u64) -> Option<(usize, usize)> {
        (id < 10).then_some((64, 48))
    }

    #[test]
    fn parse_array_and_lines() {
        let arr = r#"[{"image_id":1,"bbox":[1,2,3,4],"score":0.5},
                      {"image_id":1,"bbox":[5,5,10,10],"score":0.9,"category":"dog","box_kind":"amodal"},
                      {"image_id":2,"bbox":[0,0,1,1],"score":1.0}]"#;
        let r = parse_detections(arr, dims).unwrap();
        assert_eq!(r.records.len(), 3);
        assert_eq!(r.records[0].box_kind, BoxKind::Modal);
        assert_eq!(r.records[1].box_kind, BoxKind::Amodal);
        assert!(r.warnings.is_empty());
        let lines = "{\"image_id\":1,\"bbox\":[1,2,3,4],\"score\":0.5}\n\n{\"image_id\":3,\"bbox\":[0,0,2,2],\"score\":0.1}\n";
        assert_eq!(parse_detections(lines, dims).unwrap().records.len(), 2);
    }

    #[test]
    fn parse_rejects_and_clamps() {
        let e = parse_detections(r#"[{"image_id":1,"bbox":[1,2,3,4],"score":0.5},{"image_id":1,"bbox":[1,2,3,4],"score":1.2}]"#, dims)
            .unwrap_err();
        assert!(matches!(e, PipelineError::Record { index: 1, .. }), "{e}");
        let e = parse_detections("{\"image_id\":1,\"bbox\":[1,2,3,4],\"score\":0.5}\n{\"image_id\":1}\n", dims).unwrap_err();
        assert!(matches!(e, PipelineError::Record { index: 1, line: Some(2), .. }), "{e}");
        assert!(parse_detections(r#"[{"image_id":11,"bbox":[1,2,3,4],"score":0.5}]"#, dims).is_err());
        let r = parse_detections(r#"[{"image_id":1,"bbox":[60,40,10,20],"score":0.5}]"#, dims).unwrap();
        assert_eq!(r.records[0].bbox, BoundingBox::new(60.0, 40.0, 4.0, 8.0));
        assert_eq!(r.warnings.len(), 1);
    }

    fn predictor() -> Predictor {
        Predictor::new(PredictorConfig { image_size: 32, embed_dim: 16, ..Default::default() }).unwrap()
    }

    fn detection(bbox: BoundingBox, score: f64) -> DetectionRecord {
        DetectionRecord { image_id: 4, bbox, score_front: score, category: None, box_kind: BoxKind::Modal, modal_mask: None }
    }

    #[test]
    fn inference_contract() {
        let p = predictor();
        let image = RgbImage::from_fn(40, 40, |x, y| image::Rgb([(x * 6) as u8, (y * 6) as u8, 9]));
        assert!(run_inference(&p, &image, 4, &[]).unwrap().is_empty());
        let b = BoundingBox::new(5.0, 5.0, 20.0, 12.0);
        let dets = vec![
            detection(b, 1.0),
            detection(BoundingBox::new(41.0, 3.0, 0.0, 0.0), 0.9),
            detection(b, 1.0),
            detection(BoundingBox::new(2.0, 20.0, 10.0, 10.0), 0.4),
        ];
        let res = run_inference(&p, &image, 4, &dets).unwrap();
        assert_eq!(res.len(), dets.len());
        let direct = p.predict(&image, &b).unwrap();
        assert!((res[0].score_refined - direct.iou_estimate.clamp(0.0, 1.0)).abs() < 1e-12);
        assert!(res[1].degenerate && res[1].amodal_mask.is_empty() && res[1].score_refined == 0.0);
        // equal refined scores keep input order
        let order = sorted_by_refined(&res);
        let first = order.iter().position(|&i| i == 0).unwrap();
        let second = order.iter().position(|&i| i == 2).unwrap();
        assert!(first < second);
        for r in &res {
            assert!(r.score_refined <= r.detection.score_front.min(1.0));
        }
        assert_eq!(run_inference(&p, &image, 4, &dets).unwrap(), res);
        assert!(run_inference(&p, &image, 5, &dets).is_err());
    }

    proptest! {
        #[test]
        fn argsort_invariant_under_rescaling(
            pairs in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 1..50),
            c in 0.01f64..1.0,
        ) {
            let refined: Vec<f64> = pairs.iter().map(|&(s, i)| refine_confidence(s, i).unwrap()).collect();
            let scaled: Vec<f64> = pairs.iter().map(|&(s, i)| refine_confidence(s * c, i).unwrap()).collect();
            let order = |v: &[f64]| {
                let mut idx: Vec<usize> = (0..v.len()).collect();
                idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]));
                idx
            };
            prop_assert_eq!(order(&refined), order(&scaled));
        }

        #[test]
        fn refine_monotone(s in 0.0f64..0.99, ds in 1e-6f64..0.01, iou in 1e-3f64..=1.0) {
            prop_assert!(refine_confidence(s + ds, iou).unwrap() > refine_confidence(s, iou).unwrap());
        }
    }
}
