//! Straightforward COCO-style mAP used as a reference in tests. It shares no
//! code with the crate's evaluator.

use gid_core::detector::Detection;
use gid_core::evaluation::{DetectionResult, ImageGroundTruth};
use gid_core::geometry::{BoundingBox, LabeledBox};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn overlap(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Per-threshold mean AP over classes that have ground truth.
pub fn reference_per_threshold(results: &[DetectionResult], gts: &[ImageGroundTruth], num_classes: usize) -> Vec<f64> {
    let thresholds: Vec<f64> = (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect();
    let classes: Vec<usize> = (0..num_classes)
        .filter(|c| gts.iter().any(|g| g.objects.iter().any(|o| o.class == *c)))
        .collect();
    thresholds
        .iter()
        .map(|&t| {
            if classes.is_empty() {
                return 0.0;
            }
            classes.iter().map(|&c| reference_ap(results, gts, c, t)).sum::<f64>() / classes.len() as f64
        })
        .collect()
}

pub fn reference_map(results: &[DetectionResult], gts: &[ImageGroundTruth], num_classes: usize) -> f64 {
    let per = reference_per_threshold(results, gts, num_classes);
    per.iter().sum::<f64>() / per.len() as f64
}

fn reference_ap(results: &[DetectionResult], gts: &[ImageGroundTruth], class: usize, t: f64) -> f64 {
    let mut flagged: Vec<(f64, bool)> = Vec::new();
    let mut total_gt = 0;
    for (r, g) in results.iter().zip(gts) {
        let truth: Vec<BoundingBox> = g.objects.iter().filter(|o| o.class == class).map(|o| o.bbox).collect();
        total_gt += truth.len();
        let mut dets: Vec<&Detection> = r.detections.iter().filter(|d| d.class == class).collect();
        dets.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        dets.truncate(100);
        let mut used = vec![false; truth.len()];
        for d in dets {
            let mut pick: Option<(usize, f64)> = None;
            for (j, b) in truth.iter().enumerate() {
                let o = overlap(&d.bbox, b);
                if used[j] || o < t {
                    continue;
                }
                if pick.map_or(true, |(_, best)| o >= best) {
                    pick = Some((j, o));
                }
            }
            if let Some((j, _)) = pick {
                used[j] = true;
            }
            flagged.push((d.score, pick.is_some()));
        }
    }
    if total_gt == 0 {
        return 0.0;
    }
    flagged.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut points = Vec::new();
    let mut tp = 0.0;
    for (i, &(_, hit)) in flagged.iter().enumerate() {
        if hit {
            tp += 1.0;
        }
        points.push((tp / total_gt as f64, tp / (i + 1) as f64));
    }
    (0..=100)
        .map(|k| {
            // numpy linspace(0, 1, 101) semantics: k * 0.01, last point exactly 1
            let r = if k == 100 { 1.0 } else { k as f64 * 0.01 };
            points
                .iter()
                .filter(|p| p.0 >= r)
                .map(|p| p.1)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 101.0
}

/// Ten random images with jittered true detections, misclassified copies and
/// pure false positives.
pub fn random_case(seed: u64, num_classes: usize) -> (Vec<DetectionResult>, Vec<ImageGroundTruth>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    let mut gts = Vec::new();
    for image_id in 0..10u64 {
        let mut objects = Vec::new();
        for _ in 0..rng.random_range(0..6) {
            let (x, y) = (rng.random_range(0.0..50.0), rng.random_range(0.0..50.0));
            let (w, h) = (rng.random_range(4.0..30.0), rng.random_range(4.0..30.0));
            objects.push(LabeledBox {
                bbox: BoundingBox::new(x, y, x + w, y + h),
                class: rng.random_range(0..num_classes),
            });
        }
        let mut detections = Vec::new();
        for o in &objects {
            for _ in 0..rng.random_range(0..3) {
                let j = |rng: &mut ChaCha8Rng| rng.random_range(-4.0..4.0);
                let b = o.bbox;
                let x1 = b.x1 + j(&mut rng);
                let y1 = b.y1 + j(&mut rng);
                let bbox = BoundingBox::new(x1, y1, (b.x2 + j(&mut rng)).max(x1 + 1.0), (b.y2 + j(&mut rng)).max(y1 + 1.0));
                let class = if rng.random_bool(0.85) { o.class } else { rng.random_range(0..num_classes) };
                detections.push(Detection {
                    bbox,
                    score: rng.random_range(0.0..1.0),
                    class,
                });
            }
        }
        for _ in 0..rng.random_range(0..4) {
            let (x, y) = (rng.random_range(0.0..50.0), rng.random_range(0.0..50.0));
            detections.push(Detection {
                bbox: BoundingBox::new(x, y, x + rng.random_range(2.0..20.0), y + rng.random_range(2.0..20.0)),
                score: rng.random_range(0.0..1.0),
                class: rng.random_range(0..num_classes),
            });
        }
        results.push(DetectionResult { image_id, detections });
        gts.push(ImageGroundTruth { image_id, objects });
    }
    (results, gts)
}

/// Detections identical to the ground truth with score 1.
pub fn perfect(gts: &[ImageGroundTruth]) -> Vec<DetectionResult> {
    gts.iter()
        .map(|g| DetectionResult {
            image_id: g.image_id,
            detections: g
                .objects
                .iter()
                .map(|o| Detection {
                    bbox: o.bbox,
                    score: 1.0,
                    class: o.class,
                })
                .collect(),
        })
        .collect()
}
