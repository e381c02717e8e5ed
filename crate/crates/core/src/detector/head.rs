use crate::geometry::{descending_order, nms, BoundingBox};
use crate::nn::{Real, Tensor};
use crate::response_distill::{HeadGeometry, RegressionKind};

use super::{DetectorConfig, HeadVariant};

/// Upper bound on the raw anchor-free regression output before `exp`.
pub const MAX_LOG_DISTANCE: f64 = 8.0;
/// Clamp for encoded width/height deltas, as in common detector code.
const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Image-space layout of every head prediction.
///
/// Locations are ordered by pyramid level, then row, then column, then
/// anchor. Anchors are centred on the location's point.
#[derive(Debug, Clone)]
pub struct LocationGrid {
    pub variant: HeadVariant,
    pub num_classes: usize,
    pub image_size: usize,
    pub anchors_per_location: usize,
    pub points: Vec<(f64, f64)>,
    /// Empty for anchor-free heads.
    pub anchors: Vec<BoundingBox>,
    pub levels: Vec<usize>,
    pub level_strides: Vec<f64>,
    pub level_offsets: Vec<usize>,
    pub level_sizes: Vec<usize>,
    /// Anchor-free `(lo, hi]` range of the largest target distance per level.
    pub level_ranges: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub score: f64,
    pub class: usize,
}

impl LocationGrid {
    pub fn new(config: &DetectorConfig) -> Self {
        let a = config.anchors_per_location();
        let mut grid = Self {
            variant: config.variant,
            num_classes: config.num_classes,
            image_size: config.image_size,
            anchors_per_location: a,
            points: Vec::new(),
            anchors: Vec::new(),
            levels: Vec::new(),
            level_strides: config.fpn_strides.iter().map(|&s| s as f64).collect(),
            level_offsets: Vec::new(),
            level_sizes: Vec::new(),
            level_ranges: Vec::new(),
        };
        let half_scale = config.anchor_scales.first().copied().unwrap_or(4.0) / 2.0;
        let nlev = config.fpn_strides.len();
        for (l, &stride) in config.fpn_strides.iter().enumerate() {
            let s = stride as f64;
            let size = config.level_size(l);
            grid.level_offsets.push(grid.points.len());
            grid.level_sizes.push(size);
            let lo = if l == 0 { 0.0 } else { half_scale * s / 2.0 };
            let hi = if l + 1 == nlev { f64::INFINITY } else { half_scale * s };
            grid.level_ranges.push((lo, hi));
            for y in 0..size {
                for x in 0..size {
                    let (cx, cy) = ((x as f64 + 0.5) * s, (y as f64 + 0.5) * s);
                    match config.variant {
                        HeadVariant::AnchorBased => {
                            for &scale in &config.anchor_scales {
                                for &ratio in &config.anchor_ratios {
                                    let side = scale * s;
                                    let w = side / ratio.sqrt();
                                    let h = side * ratio.sqrt();
                                    grid.anchors.push(BoundingBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0));
                                    grid.points.push((cx, cy));
                                    grid.levels.push(l);
                                }
                            }
                        }
                        HeadVariant::AnchorFree => {
                            grid.points.push((cx, cy));
                            grid.levels.push(l);
                        }
                    }
                }
            }
        }
        grid
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn stride_of(&self, location: usize) -> f64 {
        self.level_strides[self.levels[location]]
    }

    pub fn head_geometry(&self) -> HeadGeometry<'_> {
        match self.variant {
            HeadVariant::AnchorBased => HeadGeometry::Anchors(&self.anchors),
            HeadVariant::AnchorFree => HeadGeometry::Points(&self.points),
        }
    }

    /// Regression space compared by response distillation.
    pub fn regression_kind(&self) -> RegressionKind {
        match self.variant {
            HeadVariant::AnchorBased => RegressionKind::Deltas { beta: 0.1 },
            HeadVariant::AnchorFree => RegressionKind::Distances,
        }
    }

    /// Flattens image `n` of per-level maps with `per` values per anchor
    /// into a row-major `[R x per]` vector.
    pub fn flatten<F: Real>(&self, maps: &[Tensor<F>], n: usize, per: usize) -> Vec<f64> {
        let a = self.anchors_per_location;
        let mut out = vec![0.0; self.len() * per];
        for (l, map) in maps.iter().enumerate() {
            let size = self.level_sizes[l];
            debug_assert_eq!(map.shape[1..], [a * per, size, size]);
            let hw = size * size;
            let img = map.image(n);
            let base = self.level_offsets[l];
            for pos in 0..hw {
                for ai in 0..a {
                    let loc = base + pos * a + ai;
                    for j in 0..per {
                        out[loc * per + j] = img[(ai * per + j) * hw + pos].as_f64();
                    }
                }
            }
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten) for a whole batch of per-image
    /// vectors.
    pub fn unflatten<F: Real>(&self, flat: &[Vec<f64>], per: usize) -> Vec<Tensor<F>> {
        let a = self.anchors_per_location;
        let n = flat.len();
        let mut maps = Vec::with_capacity(self.level_sizes.len());
        for (l, &size) in self.level_sizes.iter().enumerate() {
            let hw = size * size;
            let mut t = Tensor::zeros([n, a * per, size, size]);
            let base = self.level_offsets[l];
            for (b, image) in flat.iter().enumerate() {
                let img = t.image_mut(b);
                for pos in 0..hw {
                    for ai in 0..a {
                        let loc = base + pos * a + ai;
                        for j in 0..per {
                            img[(ai * per + j) * hw + pos] = F::from_f64_lossy(image[loc * per + j]);
                        }
                    }
                }
            }
            maps.push(t);
        }
        maps
    }

    /// Regression outputs in the space compared by response distillation:
    /// deltas for anchors, pixel distances for points.
    pub fn native_regression(&self, raw: &[f64]) -> Vec<f64> {
        match self.variant {
            HeadVariant::AnchorBased => raw.to_vec(),
            HeadVariant::AnchorFree => raw
                .iter()
                .enumerate()
                .map(|(i, &r)| self.stride_of(i / 4) * r.min(MAX_LOG_DISTANCE).exp())
                .collect(),
        }
    }

    /// Chains a gradient on [`native_regression`](Self::native_regression)
    /// back to the raw outputs, in place.
    pub fn native_grad_to_raw(&self, raw: &[f64], grad: &mut [f64]) {
        if self.variant == HeadVariant::AnchorFree {
            for (i, g) in grad.iter_mut().enumerate() {
                let r = raw[i];
                *g = if r < MAX_LOG_DISTANCE {
                    *g * self.stride_of(i / 4) * r.exp()
                } else {
                    0.0
                };
            }
        }
    }

    /// Boxes predicted at every location, clipped to the image.
    pub fn decode(&self, raw: &[f64]) -> Vec<BoundingBox> {
        let size = self.image_size as f64;
        (0..self.len())
            .map(|i| {
                let r = [raw[4 * i], raw[4 * i + 1], raw[4 * i + 2], raw[4 * i + 3]];
                let b = match self.variant {
                    HeadVariant::AnchorBased => decode_anchor_deltas(&self.anchors[i], r),
                    HeadVariant::AnchorFree => {
                        let s = self.stride_of(i);
                        let d = r.map(|v| s * v.min(MAX_LOG_DISTANCE).exp());
                        let (px, py) = self.points[i];
                        BoundingBox::new(px - d[0], py - d[1], px + d[2], py + d[3])
                    }
                };
                b.clip(size, size)
            })
            .collect()
    }

    /// Thresholded, class-wise NMS'd detections for one image.
    pub fn postprocess(
        &self,
        cls_logits: &[f64],
        raw_reg: &[f64],
        score_threshold: f64,
        nms_threshold: f64,
        max_detections: usize,
    ) -> Vec<Detection> {
        const PRE_NMS_TOP: usize = 1000;
        let c = self.num_classes;
        let mut cands: Vec<(usize, usize, f64)> = cls_logits
            .iter()
            .enumerate()
            .filter_map(|(idx, &logit)| {
                let p = crate::functional::sigmoid(logit);
                (p > score_threshold).then_some((idx / c, idx % c, p))
            })
            .collect();
        let scores: Vec<f64> = cands.iter().map(|c| c.2).collect();
        let order = descending_order(&scores);
        cands = order.into_iter().take(PRE_NMS_TOP).map(|i| cands[i]).collect();
        if cands.is_empty() {
            return Vec::new();
        }
        let boxes = self.decode(raw_reg);
        let mut dets = Vec::new();
        for class in 0..c {
            let sel: Vec<&(usize, usize, f64)> = cands.iter().filter(|x| x.1 == class).collect();
            let s: Vec<f64> = sel.iter().map(|x| x.2).collect();
            let b: Vec<BoundingBox> = sel.iter().map(|x| boxes[x.0]).collect();
            for k in nms(&s, &b, nms_threshold) {
                dets.push(Detection {
                    bbox: b[k],
                    score: s[k],
                    class,
                });
            }
        }
        let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
        descending_order(&scores)
            .into_iter()
            .take(max_detections)
            .map(|i| dets[i])
            .collect()
    }
}

/// Standard `(dx, dy, dw, dh)` encoding of `target` relative to `anchor`.
pub fn encode_anchor_deltas(anchor: &BoundingBox, target: &BoundingBox) -> [f64; 4] {
    let (aw, ah) = (anchor.width(), anchor.height());
    let (ax, ay) = anchor.center();
    let (tw, th) = (target.width(), target.height());
    let (tx, ty) = target.center();
    [(tx - ax) / aw, (ty - ay) / ah, (tw / aw).ln(), (th / ah).ln()]
}

pub fn decode_anchor_deltas(anchor: &BoundingBox, d: [f64; 4]) -> BoundingBox {
    let (aw, ah) = (anchor.width(), anchor.height());
    let (ax, ay) = anchor.center();
    let cx = ax + d[0] * aw;
    let cy = ay + d[1] * ah;
    let w = aw * d[2].min(MAX_LOG_SCALE).exp();
    let h = ah * d[3].min(MAX_LOG_SCALE).exp();
    BoundingBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
}
