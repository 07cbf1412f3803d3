use serde::{Deserialize, Serialize};

use crate::data::BoundingBox;
use crate::eval::iou;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::DetectorConfig;

/// Raw predictions at one scale. `logits` is `[N, A * (5 + C), S, S]`; the
/// per-anchor channel order is `tx, ty, tw, th, objectness, class...`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridScale<T> {
    pub side: usize,
    pub anchors: Vec<[f64; 2]>,
    pub num_classes: usize,
    pub logits: Tensor<T>,
}

impl<T: Scalar> GridScale<T> {
    pub fn batch(&self) -> usize {
        self.logits.shape()[0]
    }

    /// Flat index of channel `f` of anchor `a` at cell `(y, x)` of item `n`.
    #[inline]
    pub fn index(&self, n: usize, a: usize, f: usize, y: usize, x: usize) -> usize {
        let cpa = 5 + self.num_classes;
        let ch = self.anchors.len() * cpa;
        ((n * ch + a * cpa + f) * self.side + y) * self.side + x
    }

    #[inline]
    pub fn get(&self, n: usize, a: usize, f: usize, y: usize, x: usize) -> f64 {
        self.logits.data()[self.index(n, a, f, y, x)].to_f64_lossy()
    }

    /// Decoded box of anchor `a` at cell `(y, x)`.
    pub fn decode_box(&self, n: usize, a: usize, y: usize, x: usize) -> BoundingBox {
        let s = self.side as f64;
        let cx = (x as f64 + sigmoid(self.get(n, a, 0, y, x))) / s;
        let cy = (y as f64 + sigmoid(self.get(n, a, 1, y, x))) / s;
        let w = self.anchors[a][0] * self.get(n, a, 2, y, x).exp();
        let h = self.anchors[a][1] * self.get(n, a, 3, y, x).exp();
        BoundingBox::new(0, cx, cy, w, h)
    }
}

/// Two-scale raw detector output: `scales[0]` coarse (S), `scales[1]` fine (2S).
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionGrid<T> {
    pub scales: Vec<GridScale<T>>,
}

impl<T: Scalar> DetectionGrid<T> {
    pub fn new(cfg: &DetectorConfig, coarse: Tensor<T>, fine: Tensor<T>) -> Self {
        let mk = |logits: Tensor<T>, anchors: &Vec<[f64; 2]>| GridScale {
            side: logits.shape()[2],
            anchors: anchors.clone(),
            num_classes: cfg.num_classes,
            logits,
        };
        Self { scales: vec![mk(coarse, &cfg.anchors[0]), mk(fine, &cfg.anchors[1])] }
    }

    pub fn batch(&self) -> usize {
        self.scales[0].batch()
    }

    /// Number of anchor slots per image across both scales.
    pub fn slots(&self) -> usize {
        self.scales.iter().map(|s| s.side * s.side * s.anchors.len()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub confidence: f64,
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Decodes every anchor slot of every image, keeping those with confidence at
/// least `conf_threshold`. Returns one list per batch item.
pub fn decode_detections<T: Scalar>(grid: &DetectionGrid<T>, conf_threshold: f64) -> Vec<Vec<Detection>> {
    (0..grid.batch())
        .map(|n| {
            let mut dets = Vec::new();
            for scale in &grid.scales {
                for a in 0..scale.anchors.len() {
                    for y in 0..scale.side {
                        for x in 0..scale.side {
                            let obj = sigmoid(scale.get(n, a, 4, y, x));
                            let (class_id, class_p) = (0..scale.num_classes)
                                .map(|c| (c, sigmoid(scale.get(n, a, 5 + c, y, x))))
                                .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
                            let confidence = obj * class_p;
                            if confidence < conf_threshold {
                                continue;
                            }
                            let raw = scale.decode_box(n, a, y, x);
                            let Some(mut bbox) = raw.clipped() else { continue };
                            bbox.class_id = class_id as u32;
                            dets.push(Detection { bbox, confidence });
                        }
                    }
                }
            }
            dets
        })
        .collect()
}

/// Greedy non-maximum suppression. Ties in confidence keep input order.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence).then(a.cmp(&b)));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = dets[i];
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) <= iou_threshold) {
            kept.push(d);
        }
    }
    kept
}
