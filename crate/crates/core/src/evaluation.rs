//! COCO-style box mAP.
//!
//! Per class and IoU threshold, detections are matched greedily to unmatched
//! ground truth in descending score order, precision is made monotone from
//! the right and sampled at 101 recall points. Classes without ground truth
//! are left out of the mean.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::detector::Detection;
use crate::error::{GidError, Result};
use crate::geometry::{descending_order, iou, BoundingBox, LabeledBox};

pub const MAX_DETECTIONS: usize = 100;
pub const RECALL_POINTS: usize = 101;

/// `0.50, 0.55, ..., 0.95`
pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| if i == 9 { 0.95 } else { 0.5 + i as f64 * 0.05 }).collect()
}

fn recall_thresholds() -> Vec<f64> {
    (0..RECALL_POINTS)
        .map(|i| if i == RECALL_POINTS - 1 { 1.0 } else { i as f64 * 0.01 })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult {
    pub image_id: u64,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageGroundTruth {
    pub image_id: u64,
    pub objects: Vec<LabeledBox>,
}

pub fn ground_truth(samples: &[Sample]) -> Vec<ImageGroundTruth> {
    samples
        .iter()
        .map(|s| ImageGroundTruth {
            image_id: s.id,
            objects: s.objects.clone(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean over evaluated classes and all thresholds; 0 when nothing was evaluated.
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// Per-class AP averaged over thresholds; `None` for classes without ground truth.
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes at each threshold.
    pub per_threshold: Vec<f64>,
    pub iou_thresholds: Vec<f64>,
}

/// AP of one class at one IoU threshold.
fn class_ap(
    results: &[DetectionResult],
    gts: &[ImageGroundTruth],
    class: usize,
    threshold: f64,
    recall_thr: &[f64],
) -> f64 {
    let num_gt: usize = gts
        .iter()
        .map(|g| g.objects.iter().filter(|o| o.class == class).count())
        .sum();
    // (score, is true positive) in image order, then sorted stably by score
    let mut scored: Vec<(f64, bool)> = Vec::new();
    for (res, gt) in results.iter().zip(gts) {
        let gt_boxes: Vec<&BoundingBox> = gt.objects.iter().filter(|o| o.class == class).map(|o| &o.bbox).collect();
        let dets: Vec<&Detection> = res.detections.iter().filter(|d| d.class == class).collect();
        let order = descending_order(&dets.iter().map(|d| d.score).collect::<Vec<_>>());
        let mut taken = vec![false; gt_boxes.len()];
        for &di in order.iter().take(MAX_DETECTIONS) {
            let d = dets[di];
            let mut best = threshold.min(1.0 - 1e-10);
            let mut matched = None;
            for (gi, g) in gt_boxes.iter().enumerate() {
                if taken[gi] {
                    continue;
                }
                let o = iou(&d.bbox, g);
                if o < best {
                    continue;
                }
                best = o;
                matched = Some(gi);
            }
            if let Some(gi) = matched {
                taken[gi] = true;
            }
            scored.push((d.score, matched.is_some()));
        }
    }
    if scored.is_empty() || num_gt == 0 {
        return 0.0;
    }
    let order = descending_order(&scored.iter().map(|s| s.0).collect::<Vec<_>>());
    let mut recall = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &i in &order {
        if scored[i].1 {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    for &r in recall_thr {
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / recall_thr.len() as f64
}

/// Evaluates `results` against `gts`, paired by position; image ids must match.
pub fn average_precision(
    results: &[DetectionResult],
    gts: &[ImageGroundTruth],
    iou_thresholds: &[f64],
    num_classes: usize,
) -> Result<EvalReport> {
    if results.len() != gts.len() || results.iter().zip(gts).any(|(r, g)| r.image_id != g.image_id) {
        return Err(GidError::contract("results and ground truth cover different images"));
    }
    for r in results {
        for d in &r.detections {
            if !(0.0..=1.0).contains(&d.score) {
                return Err(GidError::contract(format!("detection score {} outside [0, 1]", d.score)));
            }
            if d.class >= num_classes {
                return Err(GidError::contract(format!("detection class {} out of range", d.class)));
            }
        }
    }
    if let Some(o) = gts.iter().flat_map(|g| &g.objects).find(|o| o.class >= num_classes) {
        return Err(GidError::contract(format!("ground-truth class {} out of range", o.class)));
    }
    let recall_thr = recall_thresholds();
    let has_gt: Vec<bool> = (0..num_classes)
        .map(|c| gts.iter().any(|g| g.objects.iter().any(|o| o.class == c)))
        .collect();
    let evaluated: Vec<usize> = (0..num_classes).filter(|&c| has_gt[c]).collect();
    let table: Vec<Vec<f64>> = evaluated
        .iter()
        .map(|&c| {
            iou_thresholds
                .iter()
                .map(|&t| class_ap(results, gts, c, t, &recall_thr))
                .collect()
        })
        .collect();
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let per_threshold: Vec<f64> = (0..iou_thresholds.len())
        .map(|t| mean(&table.iter().map(|row| row[t]).collect::<Vec<_>>()))
        .collect();
    let mut per_class = vec![None; num_classes];
    for (row, &c) in table.iter().zip(&evaluated) {
        per_class[c] = Some(mean(row));
    }
    let at = |thr: f64| {
        iou_thresholds
            .iter()
            .position(|&t| (t - thr).abs() < 1e-9)
            .map_or(f64::NAN, |i| per_threshold[i])
    };
    Ok(EvalReport {
        map: mean(&per_threshold),
        ap50: at(0.5),
        ap75: at(0.75),
        per_class,
        per_threshold,
        iou_thresholds: iou_thresholds.to_vec(),
    })
}

/// COCO mAP over the standard thresholds.
pub fn coco_map(results: &[DetectionResult], gts: &[ImageGroundTruth], num_classes: usize) -> Result<EvalReport> {
    average_precision(results, gts, &coco_iou_thresholds(), num_classes)
}

#[derive(Debug, Serialize, Deserialize)]
struct ResultRecord {
    image_id: u64,
    class: usize,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    score: f64,
}

/// One detection per line, like the annotation file plus a `score` field.
pub fn write_results(path: &Path, results: &[DetectionResult]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| GidError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in results {
        for d in &r.detections {
            let rec = ResultRecord {
                image_id: r.image_id,
                class: d.class,
                bbox: d.bbox.to_array(),
                score: d.score,
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n").map_err(|e| GidError::io(path, e))?;
        }
    }
    w.flush().map_err(|e| GidError::io(path, e))
}

/// Reads a results file, grouping detections under the given image ids.
pub fn read_results(path: &Path, image_ids: &[u64]) -> Result<Vec<DetectionResult>> {
    let file = std::fs::File::open(path).map_err(|e| GidError::io(path, e))?;
    let mut out: Vec<DetectionResult> = image_ids
        .iter()
        .map(|&image_id| DetectionResult {
            image_id,
            detections: Vec::new(),
        })
        .collect();
    let index: std::collections::HashMap<u64, usize> = image_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| GidError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| GidError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: ResultRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if !(0.0..=1.0).contains(&rec.score) {
            return Err(parse_err(format!("score {} outside [0, 1]", rec.score)));
        }
        let slot = *index
            .get(&rec.image_id)
            .ok_or_else(|| parse_err(format!("unknown image id {}", rec.image_id)))?;
        out[slot].detections.push(Detection {
            bbox: BoundingBox::from(rec.bbox),
            score: rec.score,
            class: rec.class,
        });
    }
    Ok(out)
}
