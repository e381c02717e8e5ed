//! Axis-aligned box arithmetic.
//!
//! Boxes are half-open real intervals in image pixel coordinates, so
//! `area = max(0, x2 - x1) * max(0, y2 - y1)` with no `+1` pixel convention.
//! Degenerate (zero-area) boxes have IoU and IoP 0 against everything and
//! therefore never suppress anything in [`nms`].

use serde::{Deserialize, Serialize};

use crate::error::{GidError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    /// Builds a box without validation. Callers inside the crate only use this
    /// with coordinates that already satisfy the invariants.
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn try_new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self::new(x1, y1, x2, y2);
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite()) {
            return Err(GidError::contract(format!("non-finite box {self:?}")));
        }
        if self.x2 < self.x1 || self.y2 < self.y1 {
            return Err(GidError::contract(format!("inverted box {self:?}")));
        }
        Ok(())
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_ok()
    }

    #[inline]
    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    #[inline]
    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) * 0.5, (self.y1 + self.y2) * 0.5)
    }

    #[inline]
    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Strict interior test, used by point-based (anchor-free) assignment.
    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x > self.x1 && x < self.x2 && y > self.y1 && y < self.y2
    }

    /// Clips to `[0, width] x [0, height]`; the result keeps `x2 >= x1`.
    pub fn clip(&self, width: f64, height: f64) -> BoundingBox {
        let x1 = self.x1.clamp(0.0, width);
        let y1 = self.y1.clamp(0.0, height);
        BoundingBox {
            x1,
            y1,
            x2: self.x2.clamp(x1, width),
            y2: self.y2.clamp(y1, height),
        }
    }

    pub fn flip_horizontal(&self, image_width: f64) -> BoundingBox {
        BoundingBox {
            x1: image_width - self.x2,
            y1: self.y1,
            x2: image_width - self.x1,
            y2: self.y2,
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

impl From<[f64; 4]> for BoundingBox {
    fn from(v: [f64; 4]) -> Self {
        BoundingBox::new(v[0], v[1], v[2], v[3])
    }
}

/// A ground-truth object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    #[serde(rename = "box", with = "box_array")]
    pub bbox: BoundingBox,
    pub class: usize,
}

/// Serde helper writing a box as `[x1, y1, x2, y2]`.
pub mod box_array {
    use super::BoundingBox;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(b: &BoundingBox, s: S) -> Result<S::Ok, S::Error> {
        b.to_array().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BoundingBox, D::Error> {
        <[f64; 4]>::deserialize(d).map(BoundingBox::from)
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Intersection over the proposal (`gi`) area; 0 when `gi` has no area.
pub fn iop(gi: &BoundingBox, gt: &BoundingBox) -> f64 {
    let area = gi.area();
    if area <= 0.0 {
        return 0.0;
    }
    gi.intersection_area(gt) / area
}

/// Indices sorted by descending score, ties broken by lower index.
pub fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Greedy class-agnostic non-maximum suppression.
///
/// A candidate is dropped when its IoU with an already kept box is strictly
/// greater than `iou_threshold`. Kept indices come back in descending-score
/// order.
pub fn nms(scores: &[f64], boxes: &[BoundingBox], iou_threshold: f64) -> Vec<usize> {
    assert_eq!(
        scores.len(),
        boxes.len(),
        "nms: scores and boxes must have equal length"
    );
    let mut keep: Vec<usize> = Vec::new();
    for idx in descending_order(scores) {
        let candidate = &boxes[idx];
        if keep
            .iter()
            .all(|&k| iou(&boxes[k], candidate) <= iou_threshold)
        {
            keep.push(idx);
        }
    }
    keep
}
