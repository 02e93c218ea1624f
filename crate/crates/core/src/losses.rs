//! Training objective: soft Dice + Focal + λ·|ρ̂ − IoU| with analytic gradients.
//!
//! All reductions run in a fixed sequential order so golden values are
//! bit-reproducible.

use crate::mask::{BinaryMask, MaskError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("prediction is {0}x{1} but ground truth is {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("probability {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("invalid loss config: {0}")]
    Config(String),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_iou: f64,
    pub gamma: f64,
    pub probability_floor: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda_iou: 0.05, gamma: 2.0, probability_floor: 1e-7 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.lambda_iou >= 0.0) {
            return Err(LossError::Config(format!("lambda_iou {} < 0", self.lambda_iou)));
        }
        if !(self.gamma >= 0.0) {
            return Err(LossError::Config(format!("gamma {} < 0", self.gamma)));
        }
        if !(self.probability_floor > 0.0 && self.probability_floor < 1e-3) {
            return Err(LossError::Config(format!(
                "probability_floor {} not in (0, 1e-3)",
                self.probability_floor
            )));
        }
        Ok(())
    }
}

/// Per-pixel foreground probabilities, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskProbabilities {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl MaskProbabilities {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self, LossError> {
        if values.len() != height * width {
            return Err(LossError::Mask(MaskError::BadLength {
                got: values.len(),
                expected: height * width,
            }));
        }
        if let Some(&bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(LossError::OutOfRange(bad));
        }
        Ok(Self { height, width, values })
    }

    /// Hard 0/1 probabilities from a mask.
    pub fn from_mask(m: &BinaryMask) -> Self {
        let values = m.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Self { height: m.height(), width: m.width(), values }
    }

    pub fn from_logits(height: usize, width: usize, logits: &[f32]) -> Self {
        let values = logits.iter().map(|&z| sigmoid(z as f64)).collect();
        Self { height, width, values }
    }

    pub fn threshold(&self, t: f64) -> BinaryMask {
        let bits = self.values.iter().map(|&p| p > t).collect();
        BinaryMask::from_bits(self.height, self.width, bits).expect("sizes agree")
    }

    fn check(&self, gt: &BinaryMask) -> Result<(), LossError> {
        if self.height != gt.height() || self.width != gt.width() {
            return Err(LossError::DimensionMismatch(
                self.height,
                self.width,
                gt.height(),
                gt.width(),
            ));
        }
        Ok(())
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn dice_sums(pred: &MaskProbabilities, gt: &BinaryMask) -> (f64, f64, f64) {
    let mut inter = 0.0;
    let mut sum_p = 0.0;
    let mut sum_g = 0.0;
    for (&p, &g) in pred.values.iter().zip(gt.bits()) {
        if g {
            inter += p;
            sum_g += 1.0;
        }
        sum_p += p;
    }
    (inter, sum_p, sum_g)
}

/// `1 - 2 Σ p·g / (Σ p + Σ g)`; zero when both sums vanish.
pub fn dice_loss(pred: &MaskProbabilities, gt: &BinaryMask) -> Result<f64, LossError> {
    pred.check(gt)?;
    let (inter, sum_p, sum_g) = dice_sums(pred, gt);
    let denom = sum_p + sum_g;
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok(1.0 - 2.0 * inter / denom)
}

/// d dice / d p_i.
pub fn dice_loss_grad(pred: &MaskProbabilities, gt: &BinaryMask) -> Result<Vec<f64>, LossError> {
    pred.check(gt)?;
    let (inter, sum_p, sum_g) = dice_sums(pred, gt);
    let denom = sum_p + sum_g;
    if denom == 0.0 {
        return Ok(vec![0.0; pred.values.len()]);
    }
    let base = 2.0 * inter / (denom * denom);
    Ok(gt
        .bits()
        .iter()
        .map(|&g| base - if g { 2.0 / denom } else { 0.0 })
        .collect())
}

fn p_target(p: f64, g: bool) -> f64 {
    if g {
        p
    } else {
        1.0 - p
    }
}

/// Mean over pixels of `-(1 - p_t)^γ ln p_t`, with `p_t` floored for the log.
pub fn focal_loss(
    pred: &MaskProbabilities,
    gt: &BinaryMask,
    gamma: f64,
    floor: f64,
) -> Result<f64, LossError> {
    pred.check(gt)?;
    let n = pred.values.len();
    if n == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (&p, &g) in pred.values.iter().zip(gt.bits()) {
        let pt = p_target(p, g).clamp(floor, 1.0 - floor);
        total += -(1.0 - pt).powf(gamma) * pt.ln();
    }
    Ok(total / n as f64)
}

/// d focal / d p_i, inside the unclamped region.
pub fn focal_loss_grad(
    pred: &MaskProbabilities,
    gt: &BinaryMask,
    gamma: f64,
    floor: f64,
) -> Result<Vec<f64>, LossError> {
    pred.check(gt)?;
    let n = pred.values.len() as f64;
    Ok(pred
        .values
        .iter()
        .zip(gt.bits())
        .map(|(&p, &g)| {
            let pt = p_target(p, g).clamp(floor, 1.0 - floor);
            let q = 1.0 - pt;
            let d_pt = if gamma == 0.0 {
                -1.0 / pt
            } else {
                gamma * q.powf(gamma - 1.0) * pt.ln() - q.powf(gamma) / pt
            };
            let sign = if g { 1.0 } else { -1.0 };
            sign * d_pt / n
        })
        .collect())
}

/// `|ρ̂ - IoU(pred_binary, gt)|`.
pub fn iou_loss(rho_hat: f64, pred_binary: &BinaryMask, gt: &BinaryMask) -> Result<f64, LossError> {
    if !(0.0..=1.0).contains(&rho_hat) {
        return Err(LossError::OutOfRange(rho_hat));
    }
    Ok((rho_hat - pred_binary.iou(gt)?).abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub dice: f64,
    pub focal: f64,
    pub iou: f64,
    pub total: f64,
}

impl LossReport {
    pub fn compose(dice: f64, focal: f64, iou: f64, lambda_iou: f64) -> Self {
        Self { dice, focal, iou, total: dice + focal + lambda_iou * iou }
    }

    pub fn is_finite(&self) -> bool {
        self.dice.is_finite() && self.focal.is_finite() && self.iou.is_finite() && self.total.is_finite()
    }
}

/// Dice + Focal + λ·IoU, where the IoU term compares ρ̂ with the prediction thresholded at 0.5.
pub fn total_loss(
    pred: &MaskProbabilities,
    gt: &BinaryMask,
    rho_hat: f64,
    cfg: &LossConfig,
) -> Result<LossReport, LossError> {
    cfg.validate()?;
    let dice = dice_loss(pred, gt)?;
    let focal = focal_loss(pred, gt, cfg.gamma, cfg.probability_floor)?;
    let iou = iou_loss(rho_hat, &pred.threshold(0.5), gt)?;
    Ok(LossReport::compose(dice, focal, iou, cfg.lambda_iou))
}

/// Gradients of the full objective with respect to the mask logits and the
/// pre-squash IoU-head output.
#[derive(Debug, Clone)]
pub struct LogitGradients {
    pub report: LossReport,
    pub mask_logits: Vec<f64>,
    pub iou_logit: f64,
}

/// Evaluates the objective from raw logits and differentiates it through the
/// sigmoids. `iou_logit` is the IoU head's output before squashing.
pub fn loss_and_logit_grads(
    logits: &[f64],
    iou_logit: f64,
    gt: &BinaryMask,
    cfg: &LossConfig,
) -> Result<LogitGradients, LossError> {
    let (h, w) = (gt.height(), gt.width());
    if logits.len() != h * w {
        return Err(LossError::Mask(MaskError::BadLength { got: logits.len(), expected: h * w }));
    }
    let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    let pred = MaskProbabilities { height: h, width: w, values: probs };
    let rho = sigmoid(iou_logit);
    let report = total_loss(&pred, gt, rho, cfg)?;

    let d_dice = dice_loss_grad(&pred, gt)?;
    let n = pred.values.len() as f64;
    let floor = cfg.probability_floor;
    let gamma = cfg.gamma;
    let mask_logits = pred
        .values
        .iter()
        .zip(gt.bits())
        .zip(&d_dice)
        .map(|((&p, &g), &dd)| {
            // focal derivative taken directly in logit space: finite for saturated pixels
            let pt_raw = p_target(p, g);
            let pt = pt_raw.clamp(floor, 1.0 - floor);
            let q = 1.0 - pt_raw;
            let d_focal_dz = gamma * pt_raw * q.powf(gamma) * pt.ln() - q.powf(gamma + 1.0);
            let sign = if g { 1.0 } else { -1.0 };
            dd * p * (1.0 - p) + sign * d_focal_dz / n
        })
        .collect();

    let actual_iou = pred.threshold(0.5).iou(gt)?;
    let sign = if rho > actual_iou {
        1.0
    } else if rho < actual_iou {
        -1.0
    } else {
        0.0
    };
    let iou_logit_grad = cfg.lambda_iou * sign * rho * (1.0 - rho);
    Ok(LogitGradients { report, mask_logits, iou_logit: iou_logit_grad })
}
