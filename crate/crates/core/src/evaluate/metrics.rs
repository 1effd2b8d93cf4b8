use crate::detector::{iou, Detection, GroundTruth};
use crate::error::{Error, Result};

/// Overlap threshold for a detection to count as a hit.
pub const MATCH_IOU: f64 = 0.5;
/// Suppression overlap used before scoring.
pub const NMS_IOU: f64 = 0.45;
/// Confidence threshold for "detected" in the success rate.
pub const CONF_THRESHOLD: f64 = 0.5;

/// Greedy non-maximum suppression by descending `C_obj * P_cls`; equal
/// scores keep input order.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .score()
            .total_cmp(&detections[a].score())
            .then(a.cmp(&b))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = detections[i];
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) < iou_threshold) {
            kept.push(d);
        }
    }
    kept
}

/// All-point interpolated AP for a single class with one ground-truth box
/// per image. Detections from every image are merged by descending score;
/// each matches its image's box when IoU ≥ `iou_threshold` and the box is
/// still unmatched.
pub fn average_precision(
    detections: &[Vec<Detection>],
    truths: &[GroundTruth],
    iou_threshold: f64,
) -> f64 {
    let total = truths.len().min(detections.len());
    if total == 0 {
        return 0.0;
    }
    let mut merged: Vec<(f64, usize, usize)> = detections
        .iter()
        .take(total)
        .enumerate()
        .flat_map(|(img, ds)| ds.iter().enumerate().map(move |(j, d)| (d.score(), img, j)))
        .collect();
    merged.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut matched = vec![false; total];
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(merged.len());
    for (rank, &(_, img, j)) in merged.iter().enumerate() {
        if !matched[img] && iou(&detections[img][j].bbox, &truths[img].bbox) >= iou_threshold {
            matched[img] = true;
            tp += 1;
        }
        curve.push((tp as f64 / total as f64, tp as f64 / (rank + 1) as f64));
    }
    // precision envelope, then area under the step curve
    for i in (0..curve.len().saturating_sub(1)).rev() {
        curve[i].1 = curve[i].1.max(curve[i + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (recall, precision) in curve {
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

/// Whether any detection has confidence ≥ `conf` and overlaps `truth` by
/// at least [`MATCH_IOU`].
pub fn is_detected(detections: &[Detection], truth: &GroundTruth, conf: f64) -> bool {
    detections
        .iter()
        .any(|d| d.score() >= conf && iou(&d.bbox, &truth.bbox) >= MATCH_IOU)
}

/// Fraction of clean-detected images that are no longer detected under
/// the adversarial texture. Inputs are post-suppression detections.
pub fn attack_success_rate(
    clean: &[Vec<Detection>],
    adversarial: &[Vec<Detection>],
    truths: &[GroundTruth],
    conf: f64,
) -> Result<f64> {
    if clean.len() != adversarial.len() || clean.len() != truths.len() {
        return Err(Error::Invalid(format!(
            "success rate needs matching image sets, got {} clean, {} adversarial, {} truths",
            clean.len(),
            adversarial.len(),
            truths.len()
        )));
    }
    let mut detected = 0usize;
    let mut evaded = 0usize;
    for ((c, a), t) in clean.iter().zip(adversarial).zip(truths) {
        if is_detected(c, t, conf) {
            detected += 1;
            if !is_detected(a, t, conf) {
                evaded += 1;
            }
        }
    }
    if detected == 0 {
        return Err(Error::UndefinedAsr);
    }
    Ok(evaded as f64 / detected as f64)
}
