//! Confusion-count metrics and precision-recall analysis for heavily skewed
//! voxel classification.
//!
//! Zero-denominator conventions (recorded in every report so numbers stay
//! auditable):
//! - precision with no predicted positives is 1 (no predictions, no false alarms)
//! - DSC and F2 with empty prediction and empty truth are 1
//! - sensitivity with no actual positives is 1; specificity with no actual
//!   negatives is 1

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Human-readable statement of the conventions above, embedded in reports.
pub const METRIC_CONVENTIONS: &str = "precision=1 when tp+fp=0; dsc=f2=1 when 2tp+fp+fn=0; \
     sensitivity=1 when tp+fn=0; specificity=1 when tn+fp=0";

/// Voxelwise confusion counts from a binarized prediction against ground truth.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub true_neg: u64,
}

impl ConfusionCounts {
    pub fn new(true_pos: u64, false_pos: u64, false_neg: u64, true_neg: u64) -> Self {
        ConfusionCounts {
            true_pos,
            false_pos,
            false_neg,
            true_neg,
        }
    }

    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }

    /// Accumulates another volume's counts (micro aggregation).
    pub fn accumulate(&mut self, other: &ConfusionCounts) {
        self.true_pos += other.true_pos;
        self.false_pos += other.false_pos;
        self.false_neg += other.false_neg;
        self.true_neg += other.true_neg;
    }
}

/// One precision-recall point; thresholds are the unique scores in
/// decreasing order.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PRPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Precision-recall curve plus its step-wise average-precision area.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PRCurve {
    pub points: Vec<PRPoint>,
    pub apr: f64,
}

/// Thresholds prediction probabilities: a voxel is lesion iff p0 >= threshold.
pub fn binarize(p0: &Tensor, threshold: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::config(format!(
            "binarize threshold must be in [0, 1], got {threshold}"
        )));
    }
    Ok(p0.map(|v| if v >= threshold { 1.0 } else { 0.0 }))
}

/// Counts voxelwise agreement between a binary prediction and binary labels.
pub fn confusion(pred: &Tensor, labels: &Tensor) -> Result<ConfusionCounts> {
    if pred.shape() != labels.shape() {
        return Err(Error::shape_mismatch(
            "confusion",
            labels.shape(),
            pred.shape(),
        ));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(labels.iter()) {
        match (p != 0.0, g != 0.0) {
            (true, true) => c.true_pos += 1,
            (true, false) => c.false_pos += 1,
            (false, true) => c.false_neg += 1,
            (false, false) => c.true_neg += 1,
        }
    }
    Ok(c)
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        1.0
    } else {
        num / den
    }
}

/// Dice similarity coefficient, 2TP/(2TP+FP+FN).
pub fn dsc(c: &ConfusionCounts) -> f64 {
    let (tp, fp, fneg) = (c.true_pos as f64, c.false_pos as f64, c.false_neg as f64);
    ratio(2.0 * tp, 2.0 * tp + fp + fneg)
}

/// F2 score, 5TP/(5TP+4FN+FP).
pub fn f2(c: &ConfusionCounts) -> f64 {
    let (tp, fp, fneg) = (c.true_pos as f64, c.false_pos as f64, c.false_neg as f64);
    ratio(5.0 * tp, 5.0 * tp + 4.0 * fneg + fp)
}

/// Sensitivity (recall), TP/(TP+FN).
pub fn sensitivity(c: &ConfusionCounts) -> f64 {
    let (tp, fneg) = (c.true_pos as f64, c.false_neg as f64);
    ratio(tp, tp + fneg)
}

/// Specificity, TN/(TN+FP).
pub fn specificity(c: &ConfusionCounts) -> f64 {
    let (tn, fp) = (c.true_neg as f64, c.false_pos as f64);
    ratio(tn, tn + fp)
}

/// Precision, TP/(TP+FP).
pub fn precision(c: &ConfusionCounts) -> f64 {
    let (tp, fp) = (c.true_pos as f64, c.false_pos as f64);
    ratio(tp, tp + fp)
}

/// How the area under the PR curve is integrated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PRArea {
    /// Step-wise average precision, sum over k of (R_k - R_{k-1}) * P_k.
    /// The default: linear interpolation in PR space overstates area on
    /// skewed data.
    StepAverage,
    /// Linear trapezoids between consecutive points, exposed for comparison.
    Trapezoid,
}

/// Builds the precision-recall curve of lesion scores against binary labels,
/// one point per unique score, visited in decreasing order. Ties between
/// voxels are broken by voxel index, so the curve is deterministic.
pub fn pr_curve(p0_scores: &Tensor, labels: &Tensor) -> Result<PRCurve> {
    pr_curve_with_area(p0_scores, labels, PRArea::StepAverage)
}

pub fn pr_curve_with_area(
    p0_scores: &Tensor,
    labels: &Tensor,
    area: PRArea,
) -> Result<PRCurve> {
    if p0_scores.shape() != labels.shape() {
        return Err(Error::shape_mismatch(
            "pr_curve",
            labels.shape(),
            p0_scores.shape(),
        ));
    }
    let total_pos = labels.iter().filter(|&&g| g != 0.0).count() as f64;
    if total_pos == 0.0 {
        return Err(Error::NoPositiveLabels);
    }

    let mut order: Vec<usize> = (0..p0_scores.len()).collect();
    order.sort_by(|&a, &b| {
        p0_scores.data()[b]
            .partial_cmp(&p0_scores.data()[a])
            .expect("scores must not contain NaN")
            .then(a.cmp(&b))
    });

    let mut points = Vec::new();
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut i = 0;
    while i < order.len() {
        let score = p0_scores.data()[order[i]];
        // consume the whole tie group before emitting a point
        while i < order.len() && p0_scores.data()[order[i]] == score {
            if labels.data()[order[i]] != 0.0 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(PRPoint {
            threshold: score,
            precision: tp as f64 / (tp + fp) as f64,
            recall: tp as f64 / total_pos,
        });
    }

    let apr = match area {
        PRArea::StepAverage => {
            let mut acc = 0.0;
            let mut prev_recall = 0.0;
            for p in &points {
                acc += (p.recall - prev_recall) * p.precision;
                prev_recall = p.recall;
            }
            acc
        }
        PRArea::Trapezoid => {
            let mut acc = 0.0;
            let mut prev = PRPoint {
                threshold: f64::INFINITY,
                precision: points[0].precision,
                recall: 0.0,
            };
            for p in &points {
                acc += (p.recall - prev.recall) * 0.5 * (p.precision + prev.precision);
                prev = *p;
            }
            acc
        }
    };
    Ok(PRCurve { points, apr })
}

/// Area under the ROC curve via the rank statistic. Kept as an optional
/// extra; PR analysis is the primary view for skewed data.
pub fn roc_auc(p0_scores: &Tensor, labels: &Tensor) -> Result<f64> {
    if p0_scores.shape() != labels.shape() {
        return Err(Error::shape_mismatch(
            "roc_auc",
            labels.shape(),
            p0_scores.shape(),
        ));
    }
    let pos: u64 = labels.iter().filter(|&&g| g != 0.0).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 {
        return Err(Error::NoPositiveLabels);
    }
    if neg == 0 {
        return Ok(1.0);
    }
    let mut order: Vec<usize> = (0..p0_scores.len()).collect();
    order.sort_by(|&a, &b| {
        p0_scores.data()[a]
            .partial_cmp(&p0_scores.data()[b])
            .expect("scores must not contain NaN")
            .then(a.cmp(&b))
    });
    // midranks for ties
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let score = p0_scores.data()[order[i]];
        let start = i;
        while i < order.len() && p0_scores.data()[order[i]] == score {
            i += 1;
        }
        let midrank = (start + i + 1) as f64 / 2.0; // 1-based average rank
        for &idx in &order[start..i] {
            if labels.data()[idx] != 0.0 {
                rank_sum_pos += midrank;
            }
        }
    }
    let pos_f = pos as f64;
    Ok((rank_sum_pos - pos_f * (pos_f + 1.0) / 2.0) / (pos_f * neg as f64))
}

/// Renders a PR curve as CSV with header `threshold,precision,recall` and
/// six decimal places per field.
pub fn pr_curve_to_csv(curve: &PRCurve) -> String {
    let mut out = String::from("threshold,precision,recall\n");
    for p in &curve.points {
        writeln!(
            out,
            "{:.6},{:.6},{:.6}",
            p.threshold, p.precision, p.recall
        )
        .expect("writing to String cannot fail");
    }
    out
}

/// Deterministically thins a PR curve to at most `max_points` points for
/// export, always keeping the first point, the last point, and the point
/// whose threshold is the operating threshold's ceiling in the score set
/// (so threshold-0.5 metrics stay recomputable from the CSV).
pub fn downsample_curve(curve: &PRCurve, max_points: usize, operating_threshold: f64) -> PRCurve {
    let n = curve.points.len();
    if max_points == 0 || n <= max_points {
        return curve.clone();
    }
    // index of the last point with threshold >= operating_threshold
    let keep_op = curve
        .points
        .iter()
        .rposition(|p| p.threshold >= operating_threshold);
    let stride = (n - 1) as f64 / (max_points - 1) as f64;
    let mut keep: Vec<usize> = (0..max_points)
        .map(|i| ((i as f64 * stride).round() as usize).min(n - 1))
        .collect();
    if let Some(op) = keep_op {
        keep.push(op);
    }
    keep.sort_unstable();
    keep.dedup();
    PRCurve {
        points: keep.into_iter().map(|i| curve.points[i]).collect(),
        apr: curve.apr,
    }
}
