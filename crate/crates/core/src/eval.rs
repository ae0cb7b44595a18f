//! Evaluation: ROC/AUC for per-cell dynamic scores, precision-recall over an
//! IoU-threshold sweep, and bounding-box RMSE.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou, orientation_difference, ObjectBox};

/// Slack applied to IoU comparisons in matching, so that boxes identical up
/// to rounding still match at threshold 1.
pub const IOU_EPSILON: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("ROC needs at least one positive and one negative label")]
    SingleClass,
    #[error("length mismatch: {0} scores vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("frame count mismatch: {0} detection frames vs {1} ground-truth frames")]
    FrameMismatch(usize, usize),
    #[error("no ground-truth boxes in any frame")]
    EmptyGroundTruth,
    #[error("no matched pairs")]
    EmptyMatches,
    #[error("invalid threshold sweep")]
    InvalidSweep,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub x: f64,
    pub y: f64,
}

/// ROC curve over every distinct score, from the strictest threshold
/// (+∞, no positives predicted) to the loosest, and its area.
///
/// Cells with score ≥ threshold are predicted positive. The area is the
/// trapezoidal integral evaluated in integer arithmetic, so it equals the
/// Mann-Whitney statistic with ties counted half exactly.
pub fn roc(scores: &[f64], labels: &[bool]) -> Result<(Vec<CurvePoint>, f64), EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch(scores.len(), labels.len()));
    }
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // stable: ties keep input order
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut curve = vec![CurvePoint {
        threshold: f64::INFINITY,
        x: 0.0,
        y: 0.0,
    }];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut twice_area: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]].total_cmp(&s).is_eq() {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        twice_area += (fp - fp0) as u128 * (tp + tp0) as u128;
        curve.push(CurvePoint {
            threshold: s,
            x: fp as f64 / neg as f64,
            y: tp as f64 / pos as f64,
        });
    }
    let auc = twice_area as f64 / (2 * pos as u128 * neg as u128) as f64;
    Ok((curve, auc))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchPair {
    pub detection: usize,
    pub ground_truth: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchResult {
    pub pairs: Vec<MatchPair>,
    pub unmatched_detections: Vec<usize>,
    pub unmatched_ground_truths: Vec<usize>,
}

/// Greedy one-to-one matching. Detections are visited by descending score
/// (missing scores count as 0, ties keep input order); each takes the
/// unmatched ground truth of highest IoU, provided that IoU reaches
/// `iou_min` (less [`IOU_EPSILON`]).
pub fn match_boxes(detections: &[ObjectBox], ground_truths: &[ObjectBox], iou_min: f64) -> MatchResult {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    let score = |i: usize| detections[i].score.unwrap_or(0.0);
    order.sort_by(|&a, &b| score(b).total_cmp(&score(a)));
    let mut gt_used = vec![false; ground_truths.len()];
    let mut result = MatchResult::default();
    for d in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in ground_truths.iter().enumerate() {
            if gt_used[g] {
                continue;
            }
            let v = iou(&detections[d], gt);
            if v >= iou_min - IOU_EPSILON && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        match best {
            Some((g, v)) => {
                gt_used[g] = true;
                result.pairs.push(MatchPair {
                    detection: d,
                    ground_truth: g,
                    iou: v,
                });
            }
            None => result.unmatched_detections.push(d),
        }
    }
    result.unmatched_detections.sort_unstable();
    result.unmatched_ground_truths = (0..ground_truths.len()).filter(|&g| !gt_used[g]).collect();
    result
}

/// IoU thresholds 0.01, 0.02, …, 1.00.
pub fn default_iou_sweep() -> Vec<f64> {
    (1..=100).map(|i| i as f64 / 100.0).collect()
}

/// Precision (y) and recall (x) pooled over all frames at each IoU
/// threshold, and AP as the mean precision over the sweep. Precision is 0
/// at thresholds where there are no detections at all.
pub fn precision_recall(
    detections: &[Vec<ObjectBox>],
    ground_truths: &[Vec<ObjectBox>],
    thresholds: &[f64],
) -> Result<(Vec<CurvePoint>, f64), EvalError> {
    if detections.len() != ground_truths.len() {
        return Err(EvalError::FrameMismatch(detections.len(), ground_truths.len()));
    }
    if thresholds.is_empty() || thresholds.iter().any(|t| !t.is_finite()) {
        return Err(EvalError::InvalidSweep);
    }
    let n_gt: usize = ground_truths.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return Err(EvalError::EmptyGroundTruth);
    }
    let n_det: usize = detections.iter().map(Vec::len).sum();
    let curve: Vec<CurvePoint> = thresholds
        .iter()
        .map(|&t| {
            let tp: usize = detections
                .iter()
                .zip(ground_truths)
                .map(|(d, g)| match_boxes(d, g, t).pairs.len())
                .sum();
            CurvePoint {
                threshold: t,
                x: tp as f64 / n_gt as f64,
                y: if n_det == 0 { 0.0 } else { tp as f64 / n_det as f64 },
            }
        })
        .collect();
    let ap = curve.iter().map(|p| p.y).sum::<f64>() / curve.len() as f64;
    Ok((curve, ap))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxRmse {
    pub width: f64,
    pub length: f64,
    pub position: f64,
    /// Degrees; orientations are compared modulo π.
    pub orientation_deg: f64,
    pub count: usize,
}

/// RMSE over (detection, ground truth) pairs. Both boxes are compared in
/// their `width ≤ length` form.
pub fn box_rmse<'a>(
    pairs: impl IntoIterator<Item = (&'a ObjectBox, &'a ObjectBox)>,
) -> Result<BoxRmse, EvalError> {
    let (mut sw, mut sl, mut sp, mut so, mut n) = (0.0, 0.0, 0.0, 0.0, 0usize);
    for (d, g) in pairs {
        let (d, g) = (d.length_major(), g.length_major());
        sw += (d.width - g.width).powi(2);
        sl += (d.length - g.length).powi(2);
        sp += (d.center_east - g.center_east).powi(2) + (d.center_north - g.center_north).powi(2);
        so += orientation_difference(d.orientation, g.orientation).powi(2);
        n += 1;
    }
    if n == 0 {
        return Err(EvalError::EmptyMatches);
    }
    let k = n as f64;
    Ok(BoxRmse {
        width: (sw / k).sqrt(),
        length: (sl / k).sqrt(),
        position: (sp / k).sqrt(),
        orientation_deg: (so / k).sqrt().to_degrees(),
        count: n,
    })
}

/// Matches every frame at `iou_min` and returns the RMSE over all pairs.
pub fn sequence_rmse(
    detections: &[Vec<ObjectBox>],
    ground_truths: &[Vec<ObjectBox>],
    iou_min: f64,
) -> Result<BoxRmse, EvalError> {
    if detections.len() != ground_truths.len() {
        return Err(EvalError::FrameMismatch(detections.len(), ground_truths.len()));
    }
    let mut pairs = Vec::new();
    for (d, g) in detections.iter().zip(ground_truths) {
        for p in match_boxes(d, g, iou_min).pairs {
            pairs.push((&d[p.detection], &g[p.ground_truth]));
        }
    }
    box_rmse(pairs)
}

/// Writes a curve as CSV with columns `threshold,x,y`.
pub fn write_curve_csv<W: Write>(curve: &[CurvePoint], out: W) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    for p in curve {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

/// Headline numbers of one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub auc: Option<f64>,
    pub ap: Option<f64>,
    pub rmse: Option<BoxRmse>,
}
