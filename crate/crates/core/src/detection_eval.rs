//! IoU, non-maximum suppression and COCO-style average precision.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in pixel corners with a confidence score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    #[serde(default = "default_score")]
    pub score: f64,
}

fn default_score() -> f64 {
    1.0
}

impl EvalBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64, score: f64) -> Result<Self> {
        let b = Self { x0, y0, x1, y1, score };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x0, self.y0, self.x1, self.y1].iter().all(|v| v.is_finite());
        if !finite || self.x1 <= self.x0 || self.y1 <= self.y0 {
            return Err(Error::invalid(format!(
                "degenerate box [{}, {}, {}, {}]",
                self.x0, self.y0, self.x1, self.y1
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> [f64; 2] {
        [(self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0]
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        self.x0 <= p[0] && p[0] <= self.x1 && self.y0 <= p[1] && p[1] <= self.y1
    }
}

pub fn iou(a: &EvalBox, b: &EvalBox) -> f64 {
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

pub const DEFAULT_NMS_IOU: f64 = 0.45;

/// Indices of `boxes` by descending score; equal scores keep input order.
fn score_order(boxes: &[EvalBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].score.total_cmp(&boxes[a].score));
    order
}

/// Greedy suppression: a box is dropped when its IoU with an already kept,
/// higher-scoring box exceeds `iou_threshold`.
pub fn nms(boxes: &[EvalBox], iou_threshold: f64) -> Vec<EvalBox> {
    nms_indices(boxes, iou_threshold).into_iter().map(|i| boxes[i]).collect()
}

/// Indices of the boxes [`nms`] keeps, in the order it keeps them.
pub fn nms_indices(boxes: &[EvalBox], iou_threshold: f64) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for i in score_order(boxes) {
        if kept.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= iou_threshold) {
            kept.push(i);
        }
    }
    kept
}

/// IoU thresholds 0.50:0.05:0.95.
pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    /// `(iou_threshold, ap)` pairs in the order requested.
    pub per_threshold: Vec<(f64, f64)>,
    pub mean: f64,
}

/// True-positive flags of the score-sorted predictions at one IoU threshold.
///
/// Each prediction takes the unmatched ground truth it overlaps most, if that
/// overlap reaches the threshold.
pub fn match_predictions(preds: &[EvalBox], gts: &[EvalBox], iou_threshold: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    score_order(preds)
        .into_iter()
        .map(|i| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if taken[j] {
                    continue;
                }
                let o = iou(&preds[i], g);
                if o >= iou_threshold && best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            match best {
                Some((j, _)) => {
                    taken[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// 101-point interpolated area under the precision-recall curve.
pub fn interpolated_ap(tp_flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(tp_flags.len());
    let mut precision = Vec::with_capacity(tp_flags.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &hit in tp_flags {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let total: f64 = (0..=100)
        .map(|k| {
            let r = k as f64 / 100.0;
            let idx = recall.partition_point(|&x| x < r - 1e-12);
            precision.get(idx).copied().unwrap_or(0.0)
        })
        .sum();
    total / 101.0
}

/// AP at each IoU threshold and their mean.
pub fn average_precision(preds: &[EvalBox], gts: &[EvalBox], iou_thresholds: &[f64]) -> ApReport {
    let per_threshold: Vec<(f64, f64)> = iou_thresholds
        .iter()
        .map(|&t| (t, interpolated_ap(&match_predictions(preds, gts, t), gts.len())))
        .collect();
    let mean = if per_threshold.is_empty() {
        0.0
    } else {
        per_threshold.iter().map(|(_, ap)| ap).sum::<f64>() / per_threshold.len() as f64
    };
    ApReport { per_threshold, mean }
}

/// Headline detection numbers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionSummary {
    #[serde(rename = "AP")]
    pub ap: f64,
    #[serde(rename = "AP50")]
    pub ap50: f64,
    #[serde(rename = "AP75")]
    pub ap75: f64,
}

pub fn summarize(preds: &[EvalBox], gts: &[EvalBox]) -> DetectionSummary {
    let report = average_precision(preds, gts, &coco_iou_thresholds());
    DetectionSummary {
        ap: report.mean,
        ap50: report.per_threshold[0].1,
        ap75: report.per_threshold[5].1,
    }
}

/// Drops ground-truth faces narrower or shorter than `min_fraction` of the
/// image, along with predictions centered on a dropped face that overlap no
/// remaining face by at least 0.5.
pub fn filter_small_faces(
    preds: &[EvalBox],
    gts: &[EvalBox],
    image_w: f64,
    image_h: f64,
    min_fraction: f64,
) -> (Vec<EvalBox>, Vec<EvalBox>) {
    let (kept, dropped): (Vec<EvalBox>, Vec<EvalBox>) = gts
        .iter()
        .partition(|g| g.width() >= min_fraction * image_w && g.height() >= min_fraction * image_h);
    let preds = preds
        .iter()
        .filter(|p| {
            let inside_dropped = dropped.iter().any(|d| d.contains(p.center()));
            !inside_dropped || kept.iter().any(|g| iou(p, g) >= 0.5)
        })
        .copied()
        .collect();
    (preds, kept)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64, s: f64) -> EvalBox {
        EvalBox::new(x0, y0, x1, y1, s).unwrap()
    }

    #[test]
    fn iou_cases() {
        let a = b(0.0, 0.0, 2.0, 2.0, 1.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(5.0, 5.0, 6.0, 6.0, 1.0)), 0.0);
        assert!((iou(&a, &b(1.0, 1.0, 3.0, 3.0, 1.0)) - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_box_rejected() {
        assert!(EvalBox::new(1.0, 0.0, 1.0, 2.0, 0.5).is_err());
    }

    #[test]
    fn nms_basic() {
        let a = b(0.0, 0.0, 10.0, 10.0, 0.9);
        assert_eq!(nms(&[a], 0.45), vec![a]);
        let dup = EvalBox { score: 0.8, ..a };
        assert_eq!(nms(&[dup, a], 0.45), vec![a]);
    }

    #[test]
    fn perfect_detector() {
        let gts = vec![b(0.0, 0.0, 10.0, 10.0, 1.0), b(20.0, 20.0, 40.0, 35.0, 1.0)];
        let preds = vec![EvalBox { score: 0.3, ..gts[0] }, EvalBox { score: 0.7, ..gts[1] }];
        let s = summarize(&preds, &gts);
        assert_eq!((s.ap, s.ap50, s.ap75), (1.0, 1.0, 1.0));
    }

    #[test]
    fn no_predictions() {
        let gts = vec![b(0.0, 0.0, 10.0, 10.0, 1.0)];
        assert_eq!(summarize(&[], &gts).ap, 0.0);
    }

    #[test]
    fn one_tp_one_fp() {
        // pred A overlaps the ground truth with IoU 0.6; pred B misses it
        let gt = b(0.0, 0.0, 10.0, 10.0, 1.0);
        let tp = b(0.0, 0.0, 10.0, 6.0, 0.5);
        assert!((iou(&tp, &gt) - 0.6).abs() < 1e-12);
        let fp = b(50.0, 50.0, 60.0, 60.0, 0.9);
        // ranked FP, TP: PR points (r=0, p=0), (r=1, p=1/2); envelope 1/2 everywhere
        let ap50 = average_precision(&[tp, fp], &[gt], &[0.5]).mean;
        assert!((ap50 - 0.5).abs() < 1e-12);
        // ranked TP, FP: precision 1 reaches recall 1
        let fp_low = EvalBox { score: 0.1, ..fp };
        assert_eq!(average_precision(&[tp, fp_low], &[gt], &[0.5]).mean, 1.0);
        // at 0.75 the overlap is too small
        assert_eq!(average_precision(&[tp, fp_low], &[gt], &[0.75]).mean, 0.0);
    }

    #[test]
    fn small_face_filter() {
        let big = b(0.0, 0.0, 50.0, 50.0, 1.0);
        let tiny = b(100.0, 100.0, 103.0, 103.0, 1.0);
        let on_tiny = b(100.0, 100.0, 104.0, 104.0, 0.8);
        let on_big = b(0.0, 0.0, 50.0, 48.0, 0.9);
        let (p, g) = filter_small_faces(&[on_tiny, on_big], &[big, tiny], 300.0, 300.0, 0.02);
        assert_eq!(g, vec![big]);
        assert_eq!(p, vec![on_big]);
    }
}
