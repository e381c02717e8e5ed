use serde::{Deserialize, Serialize};

use crate::error::{GidError, Result};
use crate::functional::{focal_loss, iou_loss_ltrb, smooth_l1, smooth_l1_grad};
use crate::geometry::{iou, LabeledBox};

use super::head::{encode_anchor_deltas, LocationGrid, MAX_LOG_DISTANCE};
use super::HeadVariant;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskLossConfig {
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Anchors at or above this IoU with a ground truth are positive.
    pub positive_iou: f64,
    /// Anchors below this IoU with every ground truth are negative.
    pub negative_iou: f64,
    pub smooth_l1_beta: f64,
}

impl Default for TaskLossConfig {
    fn default() -> Self {
        Self {
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            positive_iou: 0.5,
            negative_iou: 0.4,
            smooth_l1_beta: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Negative,
    Ignore,
    Positive { gt: usize },
}

/// Matches every location to at most one ground truth.
///
/// Anchors: IoU matching with low-quality matches, so every ground truth
/// keeps its best anchors. Points: the smallest box strictly containing the
/// point whose largest side distance falls in the level's range.
pub fn assign_targets(grid: &LocationGrid, gts: &[LabeledBox], cfg: &TaskLossConfig) -> Vec<Target> {
    let r = grid.len();
    if gts.is_empty() {
        return vec![Target::Negative; r];
    }
    match grid.variant {
        HeadVariant::AnchorBased => {
            let ious: Vec<Vec<f64>> = grid
                .anchors
                .iter()
                .map(|a| gts.iter().map(|g| iou(a, &g.bbox)).collect())
                .collect();
            let mut targets: Vec<Target> = ious
                .iter()
                .map(|row| {
                    let (best, &m) = row
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                        .unwrap();
                    if m >= cfg.positive_iou {
                        Target::Positive { gt: best }
                    } else if m < cfg.negative_iou {
                        Target::Negative
                    } else {
                        Target::Ignore
                    }
                })
                .collect();
            for g in 0..gts.len() {
                let best = ious.iter().map(|row| row[g]).fold(0.0, f64::max);
                if best <= 0.0 {
                    continue;
                }
                for (i, row) in ious.iter().enumerate() {
                    if row[g] == best && !matches!(targets[i], Target::Positive { .. }) {
                        let own = row
                            .iter()
                            .enumerate()
                            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                            .unwrap()
                            .0;
                        targets[i] = Target::Positive { gt: own };
                    }
                }
            }
            targets
        }
        HeadVariant::AnchorFree => (0..r)
            .map(|i| {
                let (px, py) = grid.points[i];
                let (lo, hi) = grid.level_ranges[grid.levels[i]];
                gts.iter()
                    .enumerate()
                    .filter(|(_, g)| {
                        let b = &g.bbox;
                        let m = (px - b.x1).max(py - b.y1).max(b.x2 - px).max(b.y2 - py);
                        b.contains_point(px, py) && m > lo && m <= hi
                    })
                    .min_by(|a, b| a.1.bbox.area().total_cmp(&b.1.bbox.area()).then(a.0.cmp(&b.0)))
                    .map_or(Target::Negative, |(g, _)| Target::Positive { gt: g })
            })
            .collect(),
    }
}

/// Unnormalised task loss sums for one image. Batches divide the sums and
/// gradients by `max(1, total positives)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTaskLoss {
    pub cls_sum: f64,
    pub reg_sum: f64,
    pub num_pos: usize,
    pub grad_cls: Vec<f64>,
    pub grad_reg: Vec<f64>,
}

/// Focal classification over non-ignored locations plus regression at
/// positives: smooth L1 on deltas (anchors) or `-ln IoU` on distances
/// (points). `raw_reg` is the raw head output.
pub fn image_task_loss(
    grid: &LocationGrid,
    cls_logits: &[f64],
    raw_reg: &[f64],
    gts: &[LabeledBox],
    cfg: &TaskLossConfig,
) -> Result<ImageTaskLoss> {
    let r = grid.len();
    let c = grid.num_classes;
    if cls_logits.len() != r * c || raw_reg.len() != r * 4 {
        return Err(GidError::contract(format!(
            "task loss expects {} logits and {} regression values, got {} and {}",
            r * c,
            r * 4,
            cls_logits.len(),
            raw_reg.len()
        )));
    }
    if let Some(g) = gts.iter().find(|g| g.class >= c) {
        return Err(GidError::contract(format!("ground-truth class {} out of range", g.class)));
    }
    let targets = assign_targets(grid, gts, cfg);
    let mut out = ImageTaskLoss {
        cls_sum: 0.0,
        reg_sum: 0.0,
        num_pos: 0,
        grad_cls: vec![0.0; r * c],
        grad_reg: vec![0.0; r * 4],
    };
    for (i, t) in targets.iter().enumerate() {
        let positive_class = match *t {
            Target::Ignore => continue,
            Target::Negative => None,
            Target::Positive { gt } => Some(gts[gt].class),
        };
        for k in 0..c {
            let (l, g) = focal_loss(cls_logits[i * c + k], positive_class == Some(k), cfg.focal_alpha, cfg.focal_gamma);
            out.cls_sum += l;
            out.grad_cls[i * c + k] = g;
        }
        let Target::Positive { gt } = *t else { continue };
        out.num_pos += 1;
        let b = &gts[gt].bbox;
        let raw = &raw_reg[i * 4..i * 4 + 4];
        match grid.variant {
            HeadVariant::AnchorBased => {
                let target = encode_anchor_deltas(&grid.anchors[i], b);
                for j in 0..4 {
                    let d = raw[j] - target[j];
                    out.reg_sum += smooth_l1(d, cfg.smooth_l1_beta);
                    out.grad_reg[i * 4 + j] = smooth_l1_grad(d, cfg.smooth_l1_beta);
                }
            }
            HeadVariant::AnchorFree => {
                let (px, py) = grid.points[i];
                let s = grid.stride_of(i);
                let pred = [0, 1, 2, 3].map(|j| s * raw[j].min(MAX_LOG_DISTANCE).exp());
                let target = [px - b.x1, py - b.y1, b.x2 - px, b.y2 - py];
                let (l, g) = iou_loss_ltrb(pred, target);
                out.reg_sum += l;
                for j in 0..4 {
                    out.grad_reg[i * 4 + j] = if raw[j] < MAX_LOG_DISTANCE { g[j] * pred[j] } else { 0.0 };
                }
            }
        }
    }
    Ok(out)
}
