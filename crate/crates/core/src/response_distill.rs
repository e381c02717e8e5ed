//! Masked distillation of detector head outputs.
//!
//! GI boxes are turned into a binary mask over head locations (anchor IoU for
//! anchor-based heads, point-in-box for anchor-free heads). Masked locations
//! contribute a soft-target classification loss and a regression loss in
//! the head's own parameterisation, normalised by the mask count.

use crate::error::{GidError, Result};
use crate::functional::{iou_loss_ltrb, smooth_l1, smooth_l1_grad, soft_bce};
use crate::geometry::{iou, BoundingBox};
use crate::gism::GeneralInstance;

pub const DEFAULT_ANCHOR_IOU: f64 = 0.5;

/// Where each head output location lives in the image.
#[derive(Debug, Clone, Copy)]
pub enum HeadGeometry<'a> {
    Anchors(&'a [BoundingBox]),
    Points(&'a [(f64, f64)]),
}

impl HeadGeometry<'_> {
    pub fn len(&self) -> usize {
        match self {
            HeadGeometry::Anchors(a) => a.len(),
            HeadGeometry::Points(p) => p.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistillMask {
    pub mask: Vec<bool>,
    pub count: usize,
}

impl DistillMask {
    pub fn empty(len: usize) -> Self {
        Self {
            mask: vec![false; len],
            count: 0,
        }
    }

    pub fn from_bools(mask: Vec<bool>) -> Self {
        let count = mask.iter().filter(|&&m| m).count();
        Self { mask, count }
    }
}

pub fn assign_mask(gis: &[GeneralInstance], geometry: HeadGeometry<'_>, anchor_iou: f64) -> DistillMask {
    let boxes: Vec<BoundingBox> = gis.iter().map(|g| g.bbox).collect();
    assign_mask_boxes(&boxes, geometry, anchor_iou)
}

pub fn assign_mask_boxes(boxes: &[BoundingBox], geometry: HeadGeometry<'_>, anchor_iou: f64) -> DistillMask {
    if boxes.is_empty() {
        return DistillMask::empty(geometry.len());
    }
    let mask = match geometry {
        HeadGeometry::Anchors(anchors) => anchors
            .iter()
            .map(|a| boxes.iter().any(|b| iou(a, b) >= anchor_iou))
            .collect(),
        HeadGeometry::Points(points) => points
            .iter()
            .map(|&(x, y)| boxes.iter().any(|b| b.contains_point(x, y)))
            .collect(),
    };
    DistillMask::from_bools(mask)
}

/// How regression outputs are compared.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RegressionKind {
    /// Encoded box deltas compared with smooth L1 of the given beta, summed
    /// over the four coordinates.
    Deltas { beta: f64 },
    /// Positive `(l, t, r, b)` distances compared with `-ln IoU`.
    Distances,
}

/// Head outputs of one model for one image: row-major `[R x C]` logits and
/// `[R x 4]` regression values.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutputs<'a> {
    pub cls_logits: &'a [f64],
    pub reg: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResponseLoss {
    /// `cls + reg`
    pub value: f64,
    /// `alpha`-weighted, mask-normalised classification part.
    pub cls: f64,
    /// `beta`-weighted, mask-normalised regression part.
    pub reg: f64,
    pub grad_cls: Vec<f64>,
    pub grad_reg: Vec<f64>,
}

pub fn response_loss(
    mask: &DistillMask,
    teacher: HeadOutputs<'_>,
    student: HeadOutputs<'_>,
    num_classes: usize,
    kind: RegressionKind,
    alpha: f64,
    beta: f64,
) -> Result<ResponseLoss> {
    let r = mask.mask.len();
    if teacher.cls_logits.len() != r * num_classes
        || student.cls_logits.len() != r * num_classes
        || teacher.reg.len() != r * 4
        || student.reg.len() != r * 4
    {
        return Err(GidError::contract(format!(
            "response shapes disagree with a mask of {r} locations and {num_classes} classes"
        )));
    }
    let mut out = ResponseLoss {
        value: 0.0,
        cls: 0.0,
        reg: 0.0,
        grad_cls: vec![0.0; r * num_classes],
        grad_reg: vec![0.0; r * 4],
    };
    if mask.count == 0 {
        return Ok(out);
    }
    let norm = 1.0 / mask.count as f64;
    for i in (0..r).filter(|&i| mask.mask[i]) {
        let cls_range = i * num_classes..(i + 1) * num_classes;
        for c in cls_range {
            let (l, g) = soft_bce(teacher.cls_logits[c], student.cls_logits[c]);
            out.cls += l;
            out.grad_cls[c] = alpha * norm * g;
        }
        let t = &teacher.reg[i * 4..i * 4 + 4];
        let s = &student.reg[i * 4..i * 4 + 4];
        match kind {
            RegressionKind::Deltas { beta: sl1_beta } => {
                for j in 0..4 {
                    let d = s[j] - t[j];
                    out.reg += smooth_l1(d, sl1_beta);
                    out.grad_reg[i * 4 + j] = beta * norm * smooth_l1_grad(d, sl1_beta);
                }
            }
            RegressionKind::Distances => {
                let (l, g) = iou_loss_ltrb([s[0], s[1], s[2], s[3]], [t[0], t[1], t[2], t[3]]);
                out.reg += l;
                for j in 0..4 {
                    out.grad_reg[i * 4 + j] = beta * norm * g[j];
                }
            }
        }
    }
    out.cls *= alpha * norm;
    out.reg *= beta * norm;
    out.value = out.cls + out.reg;
    Ok(out)
}
