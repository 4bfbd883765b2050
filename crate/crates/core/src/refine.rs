//! Bounding-box refinement: merging two annotation sources, hard confidence
//! filtering, and the soft-weighted detection loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::BoxGeom;
use crate::types::BoxAnn;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    /// Auxiliary boxes at or above this IoU with a primary box are duplicates.
    pub merge_iou_threshold: f64,
    /// Boxes below this confidence are eliminated (hard constraint).
    pub hard_conf_min: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            merge_iou_threshold: 0.7,
            hard_conf_min: 0.3,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.merge_iou_threshold) {
            return Err(Error::Config(format!(
                "merge_iou_threshold must be in [0, 1], got {}",
                self.merge_iou_threshold
            )));
        }
        if !(0.0..=1.0).contains(&self.hard_conf_min) {
            return Err(Error::Config(format!(
                "hard_conf_min must be in [0, 1], got {}",
                self.hard_conf_min
            )));
        }
        Ok(())
    }
}

/// Intersection-over-union of two boxes.
pub fn iou(a: &BoxGeom, b: &BoxGeom) -> f64 {
    a.iou(b)
}

/// Merge a frame's primary annotations with an auxiliary detection stream.
///
/// An auxiliary box whose IoU with some primary box reaches the threshold is
/// a duplicate: the primary box (and its identity) is kept, its confidence
/// raised to the max of the pair. Non-overlapping auxiliary boxes are
/// appended unlabeled. Idempotent: merging the output with the same
/// auxiliary list again changes nothing.
pub fn merge_sources(primary: &[BoxAnn], auxiliary: &[BoxAnn], cfg: &RefineConfig) -> Vec<BoxAnn> {
    let mut out: Vec<BoxAnn> = primary.to_vec();
    for aux in auxiliary {
        // Best-overlapping primary (first index wins ties).
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in out.iter().enumerate() {
            let v = p.bbox.iou(&aux.bbox);
            if v >= cfg.merge_iou_threshold && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((i, v));
            }
        }
        match best {
            Some((i, _)) => {
                if aux.confidence > out[i].confidence {
                    out[i].confidence = aux.confidence;
                }
            }
            None => {
                let mut nb = aux.clone();
                nb.identity = None;
                out.push(nb);
            }
        }
    }
    out
}

/// Remove boxes with confidence below the hard minimum; order preserved.
pub fn hard_filter(boxes: &[BoxAnn], cfg: &RefineConfig) -> Vec<BoxAnn> {
    boxes
        .iter()
        .filter(|b| b.confidence >= cfg.hard_conf_min)
        .cloned()
        .collect()
}

/// Value and gradients of the soft-weighted detection loss.
#[derive(Debug, Clone)]
pub struct DetLossOutput {
    pub value: f64,
    pub grad_scores: Vec<f64>,
    pub grad_reg: Vec<[f64; 4]>,
}

/// Weighted detection loss over a batch of boxes:
///
///   L = sum_i w_i * [BCE(score_i, cls_i) + 1{cls_i = 1} * smoothL1(reg_i, target_i)] / sum_i w_i
///
/// and 0 when all weights are zero. Scores are probabilities; gradients are
/// returned for the scores and the regression predictions.
pub fn weighted_det_loss(
    scores: &[f64],
    cls_targets: &[u8],
    reg_pred: &[[f64; 4]],
    reg_target: &[[f64; 4]],
    weights: &[f64],
) -> Result<DetLossOutput> {
    let n = scores.len();
    if cls_targets.len() != n || reg_pred.len() != n || reg_target.len() != n || weights.len() != n
    {
        return Err(Error::Contract(format!(
            "weighted_det_loss length mismatch: scores {n}, cls {}, reg {}, target {}, weights {}",
            cls_targets.len(),
            reg_pred.len(),
            reg_target.len(),
            weights.len()
        )));
    }
    let wsum: f64 = weights.iter().sum();
    let mut out = DetLossOutput {
        value: 0.0,
        grad_scores: vec![0.0; n],
        grad_reg: vec![[0.0; 4]; n],
    };
    if wsum <= 0.0 {
        return Ok(out);
    }

    let mut total = 0.0;
    for i in 0..n {
        let w = weights[i];
        if w == 0.0 {
            continue;
        }
        let s = scores[i].clamp(1e-12, 1.0 - 1e-12);
        let y = cls_targets[i] as f64;
        total += w * -(y * s.ln() + (1.0 - y) * (1.0 - s).ln());
        out.grad_scores[i] = w * (-y / s + (1.0 - y) / (1.0 - s)) / wsum;
        if cls_targets[i] == 1 {
            for k in 0..4 {
                let d = reg_pred[i][k] - reg_target[i][k];
                let (v, g) = if d.abs() < 1.0 {
                    (0.5 * d * d, d)
                } else {
                    (d.abs() - 0.5, d.signum())
                };
                total += w * v;
                out.grad_reg[i][k] = w * g / wsum;
            }
        }
    }
    out.value = total / wsum;
    Ok(out)
}
