//! General instance selection.
//!
//! Every prediction location gets a GI score (largest per-class probability
//! gap between teacher and student) and a GI box (the box of whichever model
//! is more confident there, student on ties). Locations are deduplicated with
//! class-agnostic NMS and truncated to the top `k`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{GidError, Result};
use crate::geometry::{iop, iou, nms, BoundingBox};

/// Detector outputs for one image: `scores` is row-major `[R x C]` of
/// post-activation probabilities, `boxes` has one entry per row.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionBatch {
    pub scores: Vec<f64>,
    pub boxes: Vec<BoundingBox>,
    pub num_classes: usize,
}

impl PredictionBatch {
    pub fn new(scores: Vec<f64>, boxes: Vec<BoundingBox>, num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(GidError::contract("prediction batch needs at least one class"));
        }
        if scores.len() != boxes.len() * num_classes {
            return Err(GidError::contract(format!(
                "score matrix has {} entries, expected {} x {}",
                scores.len(),
                boxes.len(),
                num_classes
            )));
        }
        if let Some(bad) = scores.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(GidError::contract(format!("score {bad} outside [0, 1]")));
        }
        Ok(Self {
            scores,
            boxes,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.scores[r * self.num_classes..(r + 1) * self.num_classes]
    }

    pub fn max_score(&self, r: usize) -> f64 {
        self.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GiSource {
    Teacher,
    Student,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GiType {
    Pos,
    SemiPos,
    Neg,
    Ignore,
}

impl GiType {
    pub const ALL: [GiType; 4] = [GiType::Pos, GiType::SemiPos, GiType::Neg, GiType::Ignore];

    pub fn name(self) -> &'static str {
        match self {
            GiType::Pos => "pos",
            GiType::SemiPos => "semipos",
            GiType::Neg => "neg",
            GiType::Ignore => "ignore",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneralInstance {
    /// Prediction row the instance was taken from.
    pub location: usize,
    pub score: f64,
    pub bbox: BoundingBox,
    pub source: GiSource,
    pub gi_type: Option<GiType>,
}

fn check_matched(teacher: &PredictionBatch, student: &PredictionBatch) -> Result<()> {
    if teacher.len() != student.len() || teacher.num_classes != student.num_classes {
        return Err(GidError::contract(format!(
            "teacher batch is {}x{} but student batch is {}x{}",
            teacher.len(),
            teacher.num_classes,
            student.len(),
            student.num_classes
        )));
    }
    Ok(())
}

/// Per-location GI score: `max_c |P_t[r,c] - P_s[r,c]|`.
pub fn gi_scores(teacher: &PredictionBatch, student: &PredictionBatch) -> Result<Vec<f64>> {
    check_matched(teacher, student)?;
    Ok(teacher
        .scores
        .chunks_exact(teacher.num_classes)
        .zip(student.scores.chunks_exact(student.num_classes))
        .map(|(t, s)| {
            t.iter()
                .zip(s)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        })
        .collect())
}

/// Per-location GI box: the teacher box when the teacher's top class score is
/// strictly higher, otherwise the student box.
pub fn gi_boxes(
    teacher: &PredictionBatch,
    student: &PredictionBatch,
) -> Result<(Vec<BoundingBox>, Vec<GiSource>)> {
    check_matched(teacher, student)?;
    let mut boxes = Vec::with_capacity(teacher.len());
    let mut sources = Vec::with_capacity(teacher.len());
    for r in 0..teacher.len() {
        if teacher.max_score(r) > student.max_score(r) {
            boxes.push(teacher.boxes[r]);
            sources.push(GiSource::Teacher);
        } else {
            boxes.push(student.boxes[r]);
            sources.push(GiSource::Student);
        }
    }
    Ok((boxes, sources))
}

/// Runs the full selection: score, box, NMS at `iou_threshold`, top `k`.
/// Returned instances are in descending score order and untyped.
pub fn select_gis(
    teacher: &PredictionBatch,
    student: &PredictionBatch,
    iou_threshold: f64,
    k: usize,
) -> Result<Vec<GeneralInstance>> {
    if k == 0 {
        check_matched(teacher, student)?;
        return Ok(Vec::new());
    }
    let scores = gi_scores(teacher, student)?;
    let (boxes, sources) = gi_boxes(teacher, student)?;
    Ok(nms(&scores, &boxes, iou_threshold)
        .into_iter()
        .take(k)
        .map(|r| GeneralInstance {
            location: r,
            score: scores[r],
            bbox: boxes[r],
            source: sources[r],
            gi_type: None,
        })
        .collect())
}

pub const POS_IOU: f64 = 0.5;
pub const SEMIPOS_IOP: f64 = 0.7;
pub const NEG_IOP: f64 = 0.3;

/// Labels a GI against ground truth using its best-IoU match; the IoP is
/// measured against that same GT box.
pub fn classify_gi(gi_box: &BoundingBox, gts: &[BoundingBox]) -> GiType {
    let mut best_iou = 0.0;
    let mut best: Option<&BoundingBox> = None;
    for gt in gts {
        let v = iou(gi_box, gt);
        if best.is_none() || v > best_iou {
            best_iou = v;
            best = Some(gt);
        }
    }
    let best_iop = best.map_or(0.0, |gt| iop(gi_box, gt));
    type_from_overlaps(best_iou, best_iop)
}

pub fn type_from_overlaps(iou: f64, iop: f64) -> GiType {
    if iou > POS_IOU {
        GiType::Pos
    } else if iop > SEMIPOS_IOP {
        GiType::SemiPos
    } else if iop < NEG_IOP {
        GiType::Neg
    } else {
        GiType::Ignore
    }
}

/// Assigns `gi_type` on every instance in place.
pub fn classify_all(gis: &mut [GeneralInstance], gts: &[BoundingBox]) {
    for gi in gis {
        gi.gi_type = Some(classify_gi(&gi.bbox, gts));
    }
}

/// One line of the GI debug dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GiRecord {
    pub step: usize,
    pub image_id: u64,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub source: GiSource,
    pub gi_type: Option<GiType>,
}

pub fn write_gi_records<W: Write>(mut out: W, records: &[GiRecord]) -> Result<()> {
    for rec in records {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n")
            .map_err(|e| GidError::io("<gi dump>", e))?;
    }
    Ok(())
}
