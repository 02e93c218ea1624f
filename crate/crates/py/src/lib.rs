//! Python access to the mask utilities, losses, synthesis, statistics and
//! evaluation. Masks cross the boundary as nested lists of 0/1 rows; corpora
//! and reports as JSON strings.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use amodal_core::dataset::{DatasetManifest, RleJson};
use amodal_core::eval::{evaluate_run, EvalConfig, ResultRecord, ScoreField};
use amodal_core::filter::compute_stats;
use amodal_core::losses::{total_loss, LossConfig, MaskProbabilities};
use amodal_core::mask::BinaryMask;
use amodal_core::synth::{synthesize, SynthesisConfig};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_mask(rows: &[Vec<u8>]) -> PyResult<BinaryMask> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(value_err("rows have different lengths"));
    }
    Ok(BinaryMask::from_fn(h, w, |x, y| rows[y][x] != 0))
}

fn to_rows(m: &BinaryMask) -> Vec<Vec<u32>> {
    (0..m.height()).map(|y| (0..m.width()).map(|x| m.get(x, y) as u32).collect()).collect()
}

/// COCO RLE (`{"size": [h, w], "counts": [...]}`) of a 0/1 row list.
#[pyfunction]
fn encode_rle(rows: Vec<Vec<u8>>) -> PyResult<String> {
    serde_json::to_string(&RleJson::from_mask(&to_mask(&rows)?)).map_err(value_err)
}

#[pyfunction]
fn decode_rle(rle: &str) -> PyResult<Vec<Vec<u32>>> {
    let r: RleJson = serde_json::from_str(rle).map_err(value_err)?;
    Ok(to_rows(&r.to_mask().map_err(value_err)?))
}

#[pyfunction]
fn mask_iou(a: Vec<Vec<u8>>, b: Vec<Vec<u8>>) -> PyResult<f64> {
    to_mask(&a)?.iou(&to_mask(&b)?).map_err(value_err)
}

/// `(dice, focal, iou, total)` for per-pixel probabilities, a 0/1 target and
/// the predicted IoU.
#[pyfunction]
fn losses(probabilities: Vec<Vec<f64>>, target: Vec<Vec<u8>>, iou_prediction: f64) -> PyResult<(f64, f64, f64, f64)> {
    let gt = to_mask(&target)?;
    let values: Vec<f64> = probabilities.into_iter().flatten().collect();
    let p = MaskProbabilities::new(gt.height(), gt.width(), values).map_err(value_err)?;
    let r = total_loss(&p, &gt, iou_prediction, &LossConfig::default()).map_err(value_err)?;
    Ok((r.dice, r.focal, r.iou, r.total))
}

#[pyfunction]
fn refine_confidence(score_front: f64, iou_estimate: f64) -> PyResult<f64> {
    amodal_core::pipeline::refine_confidence(score_front, iou_estimate).map_err(value_err)
}

/// Synthesizes `pairs` occlusion pairs; returns `(manifest_json, report_json)`.
/// Pixel data is not returned.
#[pyfunction]
#[pyo3(signature = (pairs, seed=0))]
fn synthesize_manifest(pairs: usize, seed: u64) -> PyResult<(String, String)> {
    let out = synthesize(&SynthesisConfig { pairs, seed, ..Default::default() }).map_err(value_err)?;
    let report = serde_json::to_string(&out.report).map_err(value_err)?;
    Ok((out.manifest.to_json(), report))
}

fn parse_manifest(text: &str) -> PyResult<DatasetManifest> {
    let m: DatasetManifest = serde_json::from_str(text).map_err(value_err)?;
    m.validate().map_err(value_err)?;
    Ok(m)
}

/// `(n_instances, n_images, poi, avg_ror)` of a manifest.
#[pyfunction]
fn corpus_stats(manifest: &str) -> PyResult<(usize, usize, f64, Option<f64>)> {
    let s = compute_stats(&parse_manifest(manifest)?).map_err(value_err)?;
    Ok((s.n_instances, s.n_images, s.poi, s.avg_ror))
}

/// Class-agnostic evaluation of a result list against a manifest; returns the
/// report as JSON.
#[pyfunction]
#[pyo3(signature = (manifest, results, score="refined"))]
fn evaluate(manifest: &str, results: &str, score: &str) -> PyResult<String> {
    let gt = parse_manifest(manifest)?;
    let records: Vec<ResultRecord> = serde_json::from_str(results).map_err(value_err)?;
    let field = match score {
        "refined" => ScoreField::Refined,
        "front" => ScoreField::Front,
        other => return Err(value_err(format!("unknown score field {other:?}"))),
    };
    let report = evaluate_run(&gt, &records, field, &EvalConfig::default()).map_err(value_err)?;
    serde_json::to_string(&report).map_err(value_err)
}

#[pymodule]
fn amodal(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(encode_rle, m)?)?;
    m.add_function(wrap_pyfunction!(decode_rle, m)?)?;
    m.add_function(wrap_pyfunction!(mask_iou, m)?)?;
    m.add_function(wrap_pyfunction!(losses, m)?)?;
    m.add_function(wrap_pyfunction!(refine_confidence, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize_manifest, m)?)?;
    m.add_function(wrap_pyfunction!(corpus_stats, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
