//! Attack evaluation: per-box outcome bucketing (label flip, survive,
//! vanish, other misclassification), per-image fabrication flags, and
//! 11-point average precision for clean/patched comparisons.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::compositor::{apply, placement_for, TransformParams};
use crate::detector::{ContextBlobDetector, CLASS_NAMES};
use crate::types::{AnnotatedImage, Detection, GtBox, ImageTensor, Patch, TargetClassMapping};

/// A detection explains a ground-truth box when their IoU reaches this.
pub const MATCH_IOU: f64 = 0.5;

/// A detection overlapping no ground-truth box by at least this much is a
/// fabrication when it carries an attack target class.
pub const FABRICATION_IOU: f64 = 0.3;

/// Ground-truth width edges separating the small / medium / large bins.
pub const SIZE_BIN_EDGES: [f64; 2] = [16.0, 28.0];

/// What happened to one ground-truth box under a set of detections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxOutcome {
    /// Localized fine but re-labeled to the attack's target class.
    LabelFlip,
    /// Localized and labeled with the original class.
    Correct,
    /// No detection overlaps the box.
    Vanish,
    /// Overlapping detections exist but none carries the original or the
    /// target class.
    OtherMisclass,
}

/// Ground truth and detector output for one image, under one condition
/// (clean or patched).
#[derive(Debug, Clone)]
pub struct EvalSample {
    pub gt_boxes: Vec<GtBox>,
    pub detections: Vec<Detection>,
}

/// Buckets one ground-truth box. Detections overlapping by at least
/// [`MATCH_IOU`] are candidates; a candidate with the mapped target class
/// wins over one with the original class, and no candidates at all means
/// the box vanished.
pub fn classify_box(
    gt: &GtBox,
    detections: &[Detection],
    mapping: &TargetClassMapping,
) -> BoxOutcome {
    let candidates: Vec<&Detection> = detections
        .iter()
        .filter(|d| d.bbox.iou(&gt.bbox) >= MATCH_IOU)
        .collect();
    if let Some(target) = mapping.apply(gt.class_id) {
        if candidates.iter().any(|d| d.class_id == target) {
            return BoxOutcome::LabelFlip;
        }
    }
    if candidates.is_empty() {
        return BoxOutcome::Vanish;
    }
    if candidates.iter().any(|d| d.class_id == gt.class_id) {
        return BoxOutcome::Correct;
    }
    BoxOutcome::OtherMisclass
}

/// True when a detection with an attack target class fails to overlap every
/// ground-truth box by [`FABRICATION_IOU`].
pub fn has_fabrication(
    gt_boxes: &[GtBox],
    detections: &[Detection],
    mapping: &TargetClassMapping,
) -> bool {
    detections.iter().any(|d| {
        mapping.iter().any(|(_, target)| target == d.class_id)
            && gt_boxes
                .iter()
                .all(|gt| d.bbox.iou(&gt.bbox) < FABRICATION_IOU)
    })
}

/// Flip statistics for one ground-truth width bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeBinReport {
    pub label: String,
    pub min_width: f64,
    /// Exclusive upper edge; None for the open-ended top bin.
    pub max_width: Option<f64>,
    pub relevant_gt: usize,
    pub flipped: usize,
    pub flip_rate: f64,
}

/// Metrics for one condition (clean or patched) over a set of images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub images: usize,
    pub total_gt: usize,
    /// Boxes whose class the attack mapping re-labels.
    pub relevant_gt: usize,
    pub flipped: usize,
    pub correct_relevant: usize,
    pub vanished_relevant: usize,
    pub other_misclassified_relevant: usize,
    pub correct_total: usize,
    pub fabricated_images: usize,
    pub flip_rate: f64,
    pub vanish_rate: f64,
    pub correct_rate: f64,
    pub fabrication_rate: f64,
    pub mean_ap: f64,
    pub per_class_ap: BTreeMap<String, f64>,
    pub size_bins: Vec<SizeBinReport>,
}

/// Clean/patched pair over the same image set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub clean: ConditionReport,
    pub patched: ConditionReport,
}

fn rate(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn class_name(class_id: usize) -> String {
    CLASS_NAMES
        .get(class_id)
        .map(|n| n.to_string())
        .unwrap_or_else(|| format!("class_{class_id}"))
}

/// Evaluates one condition. Outcome counts cover every ground-truth box;
/// flip/vanish rates are relative to mapping-relevant boxes, the correct
/// rate to all boxes win or lose.
pub fn evaluate_condition(
    samples: &[EvalSample],
    mapping: &TargetClassMapping,
) -> ConditionReport {
    let mut report = ConditionReport {
        images: samples.len(),
        total_gt: 0,
        relevant_gt: 0,
        flipped: 0,
        correct_relevant: 0,
        vanished_relevant: 0,
        other_misclassified_relevant: 0,
        correct_total: 0,
        fabricated_images: 0,
        flip_rate: 0.0,
        vanish_rate: 0.0,
        correct_rate: 0.0,
        fabrication_rate: 0.0,
        mean_ap: 0.0,
        per_class_ap: BTreeMap::new(),
        size_bins: Vec::new(),
    };
    let bins: [(String, f64, Option<f64>); 3] = [
        ("small".to_string(), 0.0, Some(SIZE_BIN_EDGES[0])),
        (
            "medium".to_string(),
            SIZE_BIN_EDGES[0],
            Some(SIZE_BIN_EDGES[1]),
        ),
        ("large".to_string(), SIZE_BIN_EDGES[1], None),
    ];
    let mut bin_counts = [(0usize, 0usize); 3];
    for sample in samples {
        for gt in &sample.gt_boxes {
            report.total_gt += 1;
            let outcome = classify_box(gt, &sample.detections, mapping);
            if outcome == BoxOutcome::Correct {
                report.correct_total += 1;
            }
            if mapping.is_relevant(gt.class_id) {
                report.relevant_gt += 1;
                let bin_idx = match gt.bbox.width() {
                    w if w < SIZE_BIN_EDGES[0] => 0,
                    w if w < SIZE_BIN_EDGES[1] => 1,
                    _ => 2,
                };
                bin_counts[bin_idx].0 += 1;
                match outcome {
                    BoxOutcome::LabelFlip => {
                        report.flipped += 1;
                        bin_counts[bin_idx].1 += 1;
                    }
                    BoxOutcome::Correct => report.correct_relevant += 1,
                    BoxOutcome::Vanish => report.vanished_relevant += 1,
                    BoxOutcome::OtherMisclass => report.other_misclassified_relevant += 1,
                }
            }
        }
        if has_fabrication(&sample.gt_boxes, &sample.detections, mapping) {
            report.fabricated_images += 1;
        }
    }
    report.flip_rate = rate(report.flipped, report.relevant_gt);
    report.vanish_rate = rate(report.vanished_relevant, report.relevant_gt);
    report.correct_rate = rate(report.correct_total, report.total_gt);
    report.fabrication_rate = rate(report.fabricated_images, report.images);
    for (idx, (label, lo, hi)) in bins.into_iter().enumerate() {
        let (relevant, flipped) = bin_counts[idx];
        report.size_bins.push(SizeBinReport {
            label,
            min_width: lo,
            max_width: hi,
            relevant_gt: relevant,
            flipped,
            flip_rate: rate(flipped, relevant),
        });
    }
    let mut class_ids: Vec<usize> = samples
        .iter()
        .flat_map(|s| s.gt_boxes.iter().map(|g| g.class_id))
        .collect();
    class_ids.sort_unstable();
    class_ids.dedup();
    let mut ap_sum = 0.0;
    for class_id in &class_ids {
        let ap = average_precision(samples, *class_id);
        ap_sum += ap;
        report.per_class_ap.insert(class_name(*class_id), ap);
    }
    if !class_ids.is_empty() {
        report.mean_ap = ap_sum / class_ids.len() as f64;
    }
    report
}

/// Evaluates the clean and patched detections over the same images.
pub fn evaluate_pair(
    clean: &[EvalSample],
    patched: &[EvalSample],
    mapping: &TargetClassMapping,
) -> EvaluationReport {
    EvaluationReport {
        clean: evaluate_condition(clean, mapping),
        patched: evaluate_condition(patched, mapping),
    }
}

/// Composites the patch under every mapped ground-truth box at a fixed
/// scale with the identity transform. Boxes whose placement leaves the
/// frame are left unpatched.
pub fn compose_eval_image(
    image: &AnnotatedImage,
    patch: &Patch,
    mapping: &TargetClassMapping,
    eval_scale: f64,
) -> ImageTensor {
    let mut pixels = image.pixels.clone();
    let identity = TransformParams::identity();
    for gt in &image.boxes {
        if !mapping.is_relevant(gt.class_id) {
            continue;
        }
        if let Some(placement) =
            placement_for(&gt.bbox, image.width(), image.height(), eval_scale)
        {
            pixels = apply(&pixels, patch, &placement, &identity);
        }
    }
    pixels
}

/// Runs the detector over each image, optionally compositing a patch at
/// `eval_scale` first, and pairs the detections with the ground truth.
pub fn collect_samples(
    images: &[AnnotatedImage],
    detector: &ContextBlobDetector,
    mapping: &TargetClassMapping,
    patch: Option<(&Patch, f64)>,
) -> Vec<EvalSample> {
    images
        .iter()
        .map(|image| {
            let detections = match patch {
                Some((p, eval_scale)) => {
                    detector.detect(&compose_eval_image(image, p, mapping, eval_scale))
                }
                None => detector.detect(&image.pixels),
            };
            EvalSample {
                gt_boxes: image.boxes.clone(),
                detections,
            }
        })
        .collect()
}

/// 11-point interpolated average precision for one class at IoU 0.5.
/// Detections are matched greedily in confidence order against the
/// highest-IoU unmatched ground-truth box of the class.
pub fn average_precision(samples: &[EvalSample], class_id: usize) -> f64 {
    let total_gt: usize = samples
        .iter()
        .map(|s| s.gt_boxes.iter().filter(|g| g.class_id == class_id).count())
        .sum();
    if total_gt == 0 {
        return 0.0;
    }
    // (confidence, sample index, detection index), globally ordered.
    let mut ranked: Vec<(f64, usize, usize)> = Vec::new();
    for (si, sample) in samples.iter().enumerate() {
        for (di, det) in sample.detections.iter().enumerate() {
            if det.class_id == class_id {
                ranked.push((det.confidence, si, di));
            }
        }
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut matched: Vec<Vec<bool>> = samples
        .iter()
        .map(|s| vec![false; s.gt_boxes.len()])
        .collect();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut curve: Vec<(f64, f64)> = Vec::with_capacity(ranked.len());
    for (_, si, di) in ranked {
        let det = &samples[si].detections[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in samples[si].gt_boxes.iter().enumerate() {
            if gt.class_id != class_id || matched[si][gi] {
                continue;
            }
            let iou = det.bbox.iou(&gt.bbox);
            if iou >= MATCH_IOU && best.is_none_or(|(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, _)) => {
                matched[si][gi] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        curve.push((
            tp as f64 / total_gt as f64,
            tp as f64 / (tp + fp) as f64,
        ));
    }
    let mut ap = 0.0;
    for i in 0..=10 {
        let r = i as f64 / 10.0;
        let p = curve
            .iter()
            .filter(|(recall, _)| *recall >= r)
            .map(|(_, precision)| *precision)
            .fold(0.0, f64::max);
        ap += p;
    }
    ap / 11.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{CLASS_GREEN, CLASS_RED};
    use crate::types::BBox;

    fn mapping() -> TargetClassMapping {
        TargetClassMapping::new([(CLASS_RED, CLASS_GREEN)]).unwrap()
    }

    fn boxed(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    fn gt_red() -> GtBox {
        GtBox {
            bbox: boxed(0.0, 0.0, 10.0, 10.0),
            class_id: CLASS_RED,
        }
    }

    #[test]
    fn classify_covers_all_buckets() {
        let m = mapping();
        let gt = gt_red();
        let on_target = |class_id| Detection::new(boxed(0.0, 0.0, 10.0, 10.0), 0.9, class_id);
        assert_eq!(
            classify_box(&gt, &[on_target(CLASS_GREEN)], &m),
            BoxOutcome::LabelFlip
        );
        assert_eq!(
            classify_box(&gt, &[on_target(CLASS_RED)], &m),
            BoxOutcome::Correct
        );
        assert_eq!(classify_box(&gt, &[], &m), BoxOutcome::Vanish);
        // Overlap 25 / 175 is below the matching threshold.
        let off = Detection::new(boxed(5.0, 5.0, 15.0, 15.0), 0.9, CLASS_RED);
        assert_eq!(classify_box(&gt, &[off], &m), BoxOutcome::Vanish);
        // Flip wins over survive when both candidates overlap.
        assert_eq!(
            classify_box(&gt, &[on_target(CLASS_RED), on_target(CLASS_GREEN)], &m),
            BoxOutcome::LabelFlip
        );
        // A green gt hit only by red detections is neither correct nor
        // flipped.
        let gt_green = GtBox {
            bbox: boxed(0.0, 0.0, 10.0, 10.0),
            class_id: CLASS_GREEN,
        };
        assert_eq!(
            classify_box(&gt_green, &[on_target(CLASS_RED)], &m),
            BoxOutcome::OtherMisclass
        );
    }

    #[test]
    fn fabrication_requires_target_class_away_from_gt() {
        let m = mapping();
        let gts = vec![gt_red()];
        let far_green = Detection::new(boxed(50.0, 50.0, 60.0, 60.0), 0.8, CLASS_GREEN);
        assert!(has_fabrication(&gts, &[far_green], &m));
        let far_red = Detection::new(boxed(50.0, 50.0, 60.0, 60.0), 0.8, CLASS_RED);
        assert!(!has_fabrication(&gts, &[far_red], &m));
        // IoU 25/175 with the gt is below 0.3, still fabricated; a larger
        // overlap is not.
        let near = Detection::new(boxed(5.0, 5.0, 15.0, 15.0), 0.8, CLASS_GREEN);
        assert!(has_fabrication(&gts, &[near], &m));
        let overlapping = Detection::new(boxed(0.0, 2.0, 10.0, 12.0), 0.8, CLASS_GREEN);
        assert!(!has_fabrication(&gts, &[overlapping], &m));
    }

    #[test]
    fn average_precision_hand_value() {
        // Two gt boxes, one matched detection at 0.9 and one false
        // positive at 0.8: precision 1.0 up to recall 0.5, absent beyond.
        let sample = EvalSample {
            gt_boxes: vec![
                gt_red(),
                GtBox {
                    bbox: boxed(30.0, 30.0, 40.0, 40.0),
                    class_id: CLASS_RED,
                },
            ],
            detections: vec![
                Detection::new(boxed(0.0, 0.0, 10.0, 10.0), 0.9, CLASS_RED),
                Detection::new(boxed(60.0, 60.0, 70.0, 70.0), 0.8, CLASS_RED),
            ],
        };
        let ap = average_precision(&[sample], CLASS_RED);
        assert_eq!(ap, 6.0 / 11.0);
    }

    #[test]
    fn average_precision_perfect_and_empty() {
        let sample = EvalSample {
            gt_boxes: vec![gt_red()],
            detections: vec![Detection::new(boxed(0.0, 0.0, 10.0, 10.0), 0.9, CLASS_RED)],
        };
        assert_eq!(average_precision(std::slice::from_ref(&sample), CLASS_RED), 1.0);
        assert_eq!(average_precision(&[sample], CLASS_GREEN), 0.0);
        let no_dets = EvalSample {
            gt_boxes: vec![gt_red()],
            detections: vec![],
        };
        assert_eq!(average_precision(&[no_dets], CLASS_RED), 0.0);
    }

    #[test]
    fn condition_report_hand_counts() {
        let m = mapping();
        let img1 = EvalSample {
            gt_boxes: vec![
                gt_red(),
                GtBox {
                    bbox: boxed(30.0, 30.0, 40.0, 40.0),
                    class_id: CLASS_GREEN,
                },
            ],
            detections: vec![
                Detection::new(boxed(0.0, 0.0, 10.0, 10.0), 0.9, CLASS_GREEN),
                Detection::new(boxed(30.0, 30.0, 40.0, 40.0), 0.9, CLASS_GREEN),
            ],
        };
        let img2 = EvalSample {
            gt_boxes: vec![gt_red()],
            detections: vec![Detection::new(
                boxed(70.0, 70.0, 80.0, 80.0),
                0.9,
                CLASS_GREEN,
            )],
        };
        let report = evaluate_condition(&[img1, img2], &m);
        assert_eq!(report.images, 2);
        assert_eq!(report.total_gt, 3);
        assert_eq!(report.relevant_gt, 2);
        assert_eq!(report.flipped, 1);
        assert_eq!(report.vanished_relevant, 1);
        assert_eq!(report.correct_total, 1);
        assert_eq!(report.flip_rate, 0.5);
        assert_eq!(report.vanish_rate, 0.5);
        assert_eq!(report.correct_rate, 1.0 / 3.0);
        // Image 2's stray green box touches nothing.
        assert_eq!(report.fabricated_images, 1);
        assert_eq!(report.fabrication_rate, 0.5);
        assert!(report.per_class_ap.contains_key("red"));
        assert!(report.per_class_ap.contains_key("green"));
        // All relevant boxes are 10 px wide, landing in the small bin.
        assert_eq!(report.size_bins[0].relevant_gt, 2);
        assert_eq!(report.size_bins[0].flipped, 1);
        assert_eq!(report.size_bins[1].relevant_gt, 0);
    }

    #[test]
    fn rates_are_finite_on_empty_input() {
        let report = evaluate_condition(&[], &mapping());
        assert_eq!(report.flip_rate, 0.0);
        assert_eq!(report.correct_rate, 0.0);
        assert_eq!(report.fabrication_rate, 0.0);
        assert_eq!(report.mean_ap, 0.0);
    }
}
