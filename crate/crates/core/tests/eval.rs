mod support;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use semgan::eval::{average_precision, iou, report_from_predictions};
use semgan::nets::Detection;
use semgan::{BoundingBox, LabeledImage, Tensor};

fn det(b: BoundingBox, confidence: f64) -> Detection {
    Detection { bbox: b, confidence }
}

#[test]
fn matches_exhaustive_oracle_on_fifty_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..50 {
        let (dets, gts) = support::random_ap_instance(&mut rng);
        for thr in [0.3, 0.5] {
            let got = average_precision(&dets, &gts, thr);
            let want = support::oracle_ap(&dets, &gts, thr);
            assert!((got - want).abs() < 1e-9, "case {case} thr {thr}: {got} vs {want}");
        }
    }
}

#[test]
fn worked_examples() {
    let g = BoundingBox::new(0, 0.5, 0.5, 0.2, 0.2);
    let far = BoundingBox::new(0, 0.1, 0.1, 0.1, 0.1);
    assert_eq!(average_precision(&[(0, det(g, 0.9))], &[(0, g)], 0.5), 1.0);
    assert_eq!(average_precision(&[(0, det(g, 0.9)), (0, det(far, 0.5))], &[(0, g)], 0.5), 1.0);
    let g2 = BoundingBox::new(0, 0.8, 0.8, 0.1, 0.1);
    assert_eq!(average_precision(&[(0, det(g, 0.9)), (0, det(far, 0.8))], &[(0, g), (0, g2)], 0.5), 0.5);
}

#[test]
fn iou_examples() {
    let a = BoundingBox::from_corners(0, 0.0, 0.0, 0.2, 0.2);
    let b = BoundingBox::from_corners(0, 0.1, 0.1, 0.3, 0.3);
    assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-12);
    assert_eq!(iou(&a, &a), 1.0);
    assert_eq!(iou(&a, &BoundingBox::from_corners(0, 0.5, 0.5, 0.6, 0.6)), 0.0);
}

fn dataset(boxes: &[Vec<BoundingBox>]) -> Vec<LabeledImage<f32>> {
    boxes
        .iter()
        .enumerate()
        .map(|(i, b)| LabeledImage {
            id: format!("img_{i}"),
            domain: "test".into(),
            pixels: Tensor::zeros(&[3, 8, 8]),
            boxes: Some(b.clone()),
        })
        .collect()
}

#[test]
fn perfect_and_silent_detectors() {
    let boxes = vec![vec![BoundingBox::new(0, 0.3, 0.3, 0.2, 0.2)], vec![BoundingBox::new(0, 0.6, 0.5, 0.3, 0.2)]];
    let test = dataset(&boxes);
    let exact: Vec<Vec<Detection>> = boxes.iter().map(|b| b.iter().map(|&x| det(x, 0.9)).collect()).collect();
    let r = report_from_predictions(&exact, &test, 0.1, 0.45);
    assert_eq!((r.ap30, r.ap50), (100.0, 100.0));
    let r = report_from_predictions(&[vec![], vec![]], &test, 0.1, 0.45);
    assert_eq!((r.ap30, r.ap50), (0.0, 0.0));
}

fn instance() -> impl Strategy<Value = support::ApInstance> {
    any::<u64>().prop_map(|s| support::random_ap_instance(&mut ChaCha8Rng::seed_from_u64(s)))
}

fn valid_box() -> impl Strategy<Value = BoundingBox> {
    (0.05f64..0.5, 0.05f64..0.5, 0.0f64..1.0, 0.0f64..1.0).prop_map(|(w, h, u, v)| {
        BoundingBox::new(0, w / 2.0 + u * (1.0 - w), h / 2.0 + v * (1.0 - h), w, h)
    })
}

proptest! {
    #[test]
    fn oracle_agreement((dets, gts) in instance(), thr in 0.1f64..0.9) {
        let got = average_precision(&dets, &gts, thr);
        prop_assert!((got - support::oracle_ap(&dets, &gts, thr)).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&got));
    }

    #[test]
    fn only_confidence_order_matters((dets, gts) in instance()) {
        let squashed: Vec<_> = dets.iter().map(|(i, d)| (*i, Detection { confidence: (3.0 * d.confidence).exp() - 7.0, ..*d })).collect();
        prop_assert_eq!(average_precision(&dets, &gts, 0.5), average_precision(&squashed, &gts, 0.5));
    }

    #[test]
    fn duplicating_a_false_positive_never_helps((dets, gts) in instance(), pick in any::<prop::sample::Index>()) {
        let base = average_precision(&dets, &gts, 0.5);
        let fps = certain_false_positives(&dets, &gts);
        if !fps.is_empty() {
            let fp = fps[pick.index(fps.len())];
            let mut more = dets.clone();
            more.push(dets[fp]);
            prop_assert!(average_precision(&more, &gts, 0.5) <= base + 1e-12);
        }
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in valid_box(), b in valid_box()) {
        let v = iou(&a, &b);
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn disjoint_copy_keeps_ap(boxes in prop::collection::vec(prop::collection::vec(valid_box(), 0..3), 1..4), noise in 0.0f64..0.05) {
        let preds: Vec<Vec<Detection>> = boxes
            .iter()
            .enumerate()
            .map(|(i, b)| b.iter().enumerate().map(|(j, x)| det(BoundingBox { cx: (x.cx + noise).min(1.0), ..*x }, 1.0 / (2 + 10 * i + j) as f64)).collect())
            .collect();
        let once = report_from_predictions(&preds, &dataset(&boxes), 0.1, 0.45);
        let doubled: Vec<_> = boxes.iter().chain(boxes.iter()).cloned().collect();
        let twice = report_from_predictions(&[preds.clone(), preds].concat(), &dataset(&doubled), 0.1, 0.45);
        prop_assert_eq!((once.ap30, once.ap50), (twice.ap30, twice.ap50));
    }
}

/// Detections overlapping no ground truth of their image at IoU 0.5.
fn certain_false_positives(dets: &[(usize, Detection)], gts: &[(usize, BoundingBox)]) -> Vec<usize> {
    (0..dets.len())
        .filter(|&i| {
            let (img, d) = &dets[i];
            !gts.iter().any(|(g, b)| g == img && iou(&d.bbox, b) >= 0.5)
        })
        .collect()
}
