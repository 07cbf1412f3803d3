//! IoU, PASCAL-style average precision and the hue-band localization metric.

use serde::{Deserialize, Serialize};

use crate::data::{BoundingBox, LabeledImage};
use crate::error::{Error, Result};
use crate::nets::{decode_detections, nms, Detection, NetworkHandle};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Intersection over union in normalized coordinates.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    if inter <= 0.0 || union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    pub confidence: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// AP with its curve and final counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApDetail {
    pub ap: f64,
    pub curve: Vec<PrPoint>,
    pub counts: MatchCounts,
}

/// Greedy per-image matching in descending confidence order. Returns the
/// confidence-sorted detection order and the TP flag of each.
fn greedy_match(dets: &[(usize, Detection)], gts: &[(usize, BoundingBox)], iou_threshold: f64) -> (Vec<usize>, Vec<bool>) {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].1.confidence.total_cmp(&dets[a].1.confidence).then(a.cmp(&b)));
    let mut matched = vec![false; gts.len()];
    let mut tp = Vec::with_capacity(dets.len());
    for &i in &order {
        let (img, det) = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, (gimg, gt)) in gts.iter().enumerate() {
            if gimg != img || matched[j] || gt.class_id != det.bbox.class_id {
                continue;
            }
            let v = iou(&det.bbox, gt);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        match best {
            Some((j, v)) if v >= iou_threshold => {
                matched[j] = true;
                tp.push(true);
            }
            _ => tp.push(false),
        }
    }
    (order, tp)
}

/// Area under the monotone precision envelope over recall steps
/// (all-points interpolation).
fn envelope_area(recalls: &[f64], precisions: &[f64]) -> f64 {
    let mut mrec = vec![0.0];
    mrec.extend_from_slice(recalls);
    mrec.push(1.0);
    let mut mpre = vec![0.0];
    mpre.extend_from_slice(precisions);
    mpre.push(0.0);
    for i in (0..mpre.len() - 1).rev() {
        mpre[i] = mpre[i].max(mpre[i + 1]);
    }
    let mut ap = 0.0;
    for i in 1..mrec.len() {
        if mrec[i] != mrec[i - 1] {
            ap += (mrec[i] - mrec[i - 1]) * mpre[i];
        }
    }
    ap
}

pub fn average_precision_detail(dets: &[(usize, Detection)], gts: &[(usize, BoundingBox)], iou_threshold: f64) -> ApDetail {
    let (order, tp) = greedy_match(dets, gts, iou_threshold);
    let n_gt = gts.len();
    let mut curve = Vec::with_capacity(order.len());
    let (mut ctp, mut cfp) = (0usize, 0usize);
    for (k, &i) in order.iter().enumerate() {
        if tp[k] {
            ctp += 1;
        } else {
            cfp += 1;
        }
        curve.push(PrPoint {
            recall: if n_gt == 0 { 0.0 } else { ctp as f64 / n_gt as f64 },
            precision: ctp as f64 / (ctp + cfp) as f64,
            confidence: dets[i].1.confidence,
        });
    }
    let counts = MatchCounts { tp: ctp, fp: cfp, fn_: n_gt - ctp };
    let ap = if n_gt == 0 {
        if dets.is_empty() {
            log::warn!("average precision undefined without detections or ground truth; reporting 0");
        }
        0.0
    } else {
        let r: Vec<f64> = curve.iter().map(|p| p.recall).collect();
        let p: Vec<f64> = curve.iter().map(|p| p.precision).collect();
        envelope_area(&r, &p)
    };
    ApDetail { ap, curve, counts }
}

/// Average precision of `(image_id, detection)` pairs against `(image_id, box)`
/// ground truth at a given IoU threshold.
pub fn average_precision(dets: &[(usize, Detection)], gts: &[(usize, BoundingBox)], iou_threshold: f64) -> f64 {
    average_precision_detail(dets, gts, iou_threshold).ap
}

/// Metric identifier written into every report.
pub const AP_INTERPOLATION: &str = "all_points_voc2010";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Percent, one decimal.
    pub ap30: f64,
    pub ap50: f64,
    pub pr_curves: Vec<(f64, Vec<PrPoint>)>,
    pub counts: Vec<(f64, MatchCounts)>,
    pub interpolation: String,
    pub conf_threshold: f64,
    pub nms_threshold: f64,
    pub images: usize,
    pub ground_truth_boxes: usize,
}

impl EvalReport {
    /// PR curve of one IoU threshold as CSV `confidence,precision,recall`.
    pub fn pr_csv(&self, iou_threshold: f64) -> Option<String> {
        let (_, curve) = self.pr_curves.iter().find(|(t, _)| (*t - iou_threshold).abs() < 1e-12)?;
        let mut s = String::from("confidence,precision,recall\n");
        for p in curve {
            s.push_str(&format!("{},{},{}\n", p.confidence, p.precision, p.recall));
        }
        Some(s)
    }
}

pub const DEFAULT_CONF_THRESHOLD: f64 = 0.1;
pub const DEFAULT_NMS_THRESHOLD: f64 = 0.45;
const EVAL_BATCH: usize = 16;

fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

/// Detections after decoding and NMS for each image.
pub fn predict<T: Scalar>(
    detector: &NetworkHandle<T>,
    images: &[LabeledImage<T>],
    conf_threshold: f64,
    nms_threshold: f64,
) -> Result<Vec<Vec<Detection>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        let batch = Tensor::stack(&chunk.iter().map(|i| &i.pixels).collect::<Vec<_>>());
        let grid = detector.detect_grid(&batch)?;
        for dets in decode_detections(&grid, conf_threshold) {
            out.push(nms(&dets, nms_threshold));
        }
    }
    Ok(out)
}

/// Runs the detector over a labeled test set and reports AP at IoU 0.3 and 0.5.
pub fn evaluate_model<T: Scalar>(
    detector: &NetworkHandle<T>,
    test: &[LabeledImage<T>],
    conf_threshold: f64,
    nms_threshold: f64,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::validation("test", "empty test set"));
    }
    if test.iter().any(|i| !i.labeled()) {
        return Err(Error::validation("test", "test images must be labeled"));
    }
    let preds = predict(detector, test, conf_threshold, nms_threshold)?;
    Ok(report_from_predictions(&preds, test, conf_threshold, nms_threshold))
}

pub fn report_from_predictions<T: Scalar>(
    preds: &[Vec<Detection>],
    test: &[LabeledImage<T>],
    conf_threshold: f64,
    nms_threshold: f64,
) -> EvalReport {
    let dets: Vec<(usize, Detection)> =
        preds.iter().enumerate().flat_map(|(i, d)| d.iter().map(move |x| (i, *x))).collect();
    let gts: Vec<(usize, BoundingBox)> =
        test.iter().enumerate().flat_map(|(i, img)| img.boxes_or_empty().iter().map(move |b| (i, *b))).collect();
    let mut pr_curves = Vec::new();
    let mut counts = Vec::new();
    let mut aps = Vec::new();
    for thr in [0.3, 0.5] {
        let d = average_precision_detail(&dets, &gts, thr);
        aps.push(round1(100.0 * d.ap));
        pr_curves.push((thr, d.curve));
        counts.push((thr, d.counts));
    }
    EvalReport {
        ap30: aps[0],
        ap50: aps[1],
        pr_curves,
        counts,
        interpolation: AP_INTERPOLATION.to_string(),
        conf_threshold,
        nms_threshold,
        images: test.len(),
        ground_truth_boxes: gts.len(),
    }
}

/// HSV region that scene clusters occupy in every style.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HueBand {
    /// Degrees, `hue_lo <= hue <= hue_hi`.
    pub hue_lo: f64,
    pub hue_hi: f64,
    pub min_saturation: f64,
    pub min_value: f64,
}

impl Default for HueBand {
    fn default() -> Self {
        Self { hue_lo: 265.0, hue_hi: 330.0, min_saturation: 0.3, min_value: 0.12 }
    }
}

impl HueBand {
    pub fn contains(&self, rgb: [u8; 3]) -> bool {
        let [r, g, b] = rgb.map(|v| v as f64 / 255.0);
        let max = r.max(g).max(b);
        let min = r.min(g).min(b);
        let delta = max - min;
        if max < self.min_value || max <= 0.0 || delta / max < self.min_saturation || delta == 0.0 {
            return false;
        }
        let mut hue = if max == r {
            60.0 * ((g - b) / delta)
        } else if max == g {
            60.0 * ((b - r) / delta + 2.0)
        } else {
            60.0 * ((r - g) / delta + 4.0)
        };
        if hue < 0.0 {
            hue += 360.0;
        }
        (self.hue_lo..=self.hue_hi).contains(&hue)
    }
}

/// Minimum component area, in pixels, for the hue-band localizer.
pub const MIN_COMPONENT_AREA: usize = 4;

/// Tight boxes of 8-connected in-band components with at least
/// [`MIN_COMPONENT_AREA`] pixels.
pub fn hue_band_boxes(img: &image::RgbImage, band: &HueBand) -> Vec<BoundingBox> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mask: Vec<bool> = img.pixels().map(|p| band.contains(p.0)).collect();
    let mut seen = vec![false; w * h];
    let mut boxes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
        let mut area = 0;
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            area += 1;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        if area >= MIN_COMPONENT_AREA {
            boxes.push(BoundingBox::from_corners(
                0,
                x0 as f64 / w as f64,
                y0 as f64 / h as f64,
                (x1 + 1) as f64 / w as f64,
                (y1 + 1) as f64 / h as f64,
            ));
        }
    }
    boxes
}

/// Greedy one-to-one matching by descending IoU; returns the mean IoU over
/// `reference` boxes with unmatched ones counting as zero.
pub fn matched_mean_iou(found: &[BoundingBox], reference: &[BoundingBox]) -> f64 {
    if reference.is_empty() {
        return if found.is_empty() { 1.0 } else { 0.0 };
    }
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, r) in reference.iter().enumerate() {
        for (j, f) in found.iter().enumerate() {
            let v = iou(r, f);
            if v > 0.0 {
                pairs.push((v, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_r = vec![false; reference.len()];
    let mut used_f = vec![false; found.len()];
    let mut total = 0.0;
    for (v, i, j) in pairs {
        if !used_r[i] && !used_f[j] {
            used_r[i] = true;
            used_f[j] = true;
            total += v;
        }
    }
    total / reference.len() as f64
}

/// Mean over images of the matched IoU between hue-band components of the
/// translated image and the source labels. Images without source boxes are
/// skipped.
pub fn semantic_consistency_score(
    translated: &[image::RgbImage],
    source_labels: &[Vec<BoundingBox>],
    band: &HueBand,
) -> Result<f64> {
    if translated.is_empty() {
        return Err(Error::validation("translated", "empty image list"));
    }
    if translated.len() != source_labels.len() {
        return Err(Error::validation("source_labels", "one label list per image required"));
    }
    // images without reference clusters carry no localization signal
    let scores: Vec<f64> = translated
        .iter()
        .zip(source_labels)
        .filter(|(_, labels)| !labels.is_empty())
        .map(|(img, labels)| matched_mean_iou(&hue_band_boxes(img, band), labels))
        .collect();
    if scores.is_empty() {
        return Err(Error::validation("source_labels", "no image has reference boxes"));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(cx: f64, cy: f64, w: f64, h: f64, conf: f64) -> Detection {
        Detection { bbox: BoundingBox::new(0, cx, cy, w, h), confidence: conf }
    }

    #[test]
    fn iou_cases() {
        let a = BoundingBox::new(0, 0.5, 0.5, 0.2, 0.2);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BoundingBox::new(0, 0.1, 0.1, 0.1, 0.1)), 0.0);
        // (0,0)-(2,2) and (1,1)-(3,3) on a 4-unit canvas
        let p = BoundingBox::from_corners(0, 0.0, 0.0, 0.5, 0.5);
        let q = BoundingBox::from_corners(0, 0.25, 0.25, 0.75, 0.75);
        assert!((iou(&p, &q) - 1.0 / 7.0).abs() < 1e-12);
        assert_eq!(iou(&p, &q), iou(&q, &p));
    }

    #[test]
    fn worked_ap_examples() {
        let gt = BoundingBox::new(0, 0.5, 0.5, 0.2, 0.2);
        assert_eq!(average_precision(&[(0, det(0.5, 0.5, 0.2, 0.2, 0.9))], &[(0, gt)], 0.5), 1.0);

        let d = average_precision_detail(
            &[(0, det(0.5, 0.5, 0.2, 0.2, 0.9)), (0, det(0.1, 0.1, 0.1, 0.1, 0.5))],
            &[(0, gt)],
            0.5,
        );
        assert_eq!(d.ap, 1.0);
        assert_eq!((d.curve[0].recall, d.curve[0].precision), (1.0, 1.0));
        assert_eq!((d.curve[1].recall, d.curve[1].precision), (1.0, 0.5));

        let gt2 = BoundingBox::new(0, 0.2, 0.2, 0.1, 0.1);
        let ap = average_precision(
            &[(0, det(0.5, 0.5, 0.2, 0.2, 0.9)), (0, det(0.8, 0.8, 0.1, 0.1, 0.8))],
            &[(0, gt), (0, gt2)],
            0.5,
        );
        assert!((ap - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ap_degenerate_inputs() {
        assert_eq!(average_precision(&[], &[], 0.5), 0.0);
        assert_eq!(average_precision(&[(0, det(0.5, 0.5, 0.2, 0.2, 0.9))], &[], 0.5), 0.0);
        assert_eq!(average_precision(&[], &[(0, BoundingBox::new(0, 0.5, 0.5, 0.2, 0.2))], 0.5), 0.0);
    }

    #[test]
    fn detections_only_match_their_own_image() {
        let gt = BoundingBox::new(0, 0.5, 0.5, 0.2, 0.2);
        assert_eq!(average_precision(&[(1, det(0.5, 0.5, 0.2, 0.2, 0.9))], &[(0, gt)], 0.5), 0.0);
    }

    #[test]
    fn counts_add_up() {
        let gts = vec![(0, BoundingBox::new(0, 0.5, 0.5, 0.2, 0.2)), (1, BoundingBox::new(0, 0.3, 0.3, 0.2, 0.2))];
        let d = average_precision_detail(&[(0, det(0.5, 0.5, 0.2, 0.2, 0.9)), (0, det(0.5, 0.5, 0.2, 0.2, 0.8))], &gts, 0.5);
        assert_eq!(d.counts, MatchCounts { tp: 1, fp: 1, fn_: 1 });
    }

    #[test]
    fn hue_band_accepts_cluster_purple_only() {
        let band = HueBand::default();
        assert!(band.contains([110, 40, 130]));
        assert!(!band.contains([40, 120, 40]));
        assert!(!band.contains([5, 5, 5]));
        assert!(!band.contains([128, 128, 128]));
    }

    #[test]
    fn component_boxes_are_tight() {
        let mut img = image::RgbImage::from_pixel(16, 16, image::Rgb([30, 120, 30]));
        for y in 4..8 {
            for x in 2..5 {
                img.put_pixel(x, y, image::Rgb([110, 40, 130]));
            }
        }
        img.put_pixel(12, 12, image::Rgb([110, 40, 130]));
        let boxes = hue_band_boxes(&img, &HueBand::default());
        assert_eq!(boxes.len(), 1);
        let b = boxes[0];
        assert!((b.corners().0 - 2.0 / 16.0).abs() < 1e-12);
        assert!((b.corners().3 - 8.0 / 16.0).abs() < 1e-12);
    }

    #[test]
    fn matched_iou_counts_unmatched_as_zero() {
        let a = BoundingBox::new(0, 0.3, 0.3, 0.2, 0.2);
        let b = BoundingBox::new(0, 0.7, 0.7, 0.2, 0.2);
        assert_eq!(matched_mean_iou(&[a], &[a, b]), 0.5);
        assert_eq!(matched_mean_iou(&[a, b], &[a]), 1.0);
    }
}
