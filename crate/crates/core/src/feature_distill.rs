//! Feature imitation on general instances.
//!
//! Each GI box is pooled from the FPN level matching its size with ROIAlign
//! (10x10 bins, 2x2 samples per bin), student features pass through a 3x3
//! linear adaptation conv, and the loss is the mean over GIs of the squared
//! L2 distance to the teacher's pooled feature.

use crate::error::{GidError, Result};
use crate::geometry::BoundingBox;
use crate::nn::{Conv2d, Param, Parameterized, Real, Tensor};

pub const POOL_SIZE: usize = 10;
pub const SAMPLING_RATIO: usize = 2;

/// Borrowed `[channels x height x width]` feature map of one image.
#[derive(Debug, Clone, Copy)]
pub struct FeatureMap<'a> {
    pub data: &'a [f64],
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl<'a> FeatureMap<'a> {
    pub fn new(data: &'a [f64], channels: usize, height: usize, width: usize) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(GidError::contract(format!(
                "feature map has {} values, expected {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            data,
            channels,
            height,
            width,
        })
    }
}

/// A fixed-size pooled feature `[channels x POOL_SIZE x POOL_SIZE]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledFeature {
    pub data: Vec<f64>,
    pub channels: usize,
    /// Index of the GI this feature was pooled for.
    pub gi: usize,
}

impl PooledFeature {
    pub fn bins() -> usize {
        POOL_SIZE * POOL_SIZE
    }
}

/// Picks the pyramid level for a box: `floor(log2(sqrt(area) / canonical))`
/// clamped into `[0, num_levels)`. Zero-area boxes map to level 0.
pub fn assign_fpn_level(bbox: &BoundingBox, num_levels: usize, canonical_size: f64) -> usize {
    let side = bbox.area().sqrt();
    if side <= 0.0 || num_levels == 0 {
        return 0;
    }
    let raw = (side / canonical_size).log2().floor();
    if raw <= 0.0 {
        0
    } else {
        (raw as usize).min(num_levels - 1)
    }
}

/// Sparse bilinear weights for every output bin of one ROI. Shared by the
/// forward and backward passes.
#[derive(Debug, Clone)]
pub struct RoiSampling {
    /// Per bin, `(flat spatial index, weight)` pairs.
    bins: Vec<Vec<(usize, f64)>>,
    height: usize,
    width: usize,
}

impl RoiSampling {
    /// Aligned convention: a box corner at pixel `x` sits at feature
    /// coordinate `x / stride - 0.5`. Samples are taken at regular sub-bin
    /// centres; neighbours outside the map contribute zero.
    pub fn new(
        bbox: &BoundingBox,
        stride: f64,
        height: usize,
        width: usize,
        out_size: usize,
        sampling_ratio: usize,
    ) -> Self {
        let x0 = bbox.x1 / stride - 0.5;
        let y0 = bbox.y1 / stride - 0.5;
        let bin_w = (bbox.x2 - bbox.x1) / stride / out_size as f64;
        let bin_h = (bbox.y2 - bbox.y1) / stride / out_size as f64;
        let norm = 1.0 / (sampling_ratio * sampling_ratio) as f64;
        let mut bins = Vec::with_capacity(out_size * out_size);
        for oy in 0..out_size {
            for ox in 0..out_size {
                let mut taps: Vec<(usize, f64)> = Vec::with_capacity(16);
                for sy in 0..sampling_ratio {
                    let y = y0 + (oy as f64 + (sy as f64 + 0.5) / sampling_ratio as f64) * bin_h;
                    for sx in 0..sampling_ratio {
                        let x = x0 + (ox as f64 + (sx as f64 + 0.5) / sampling_ratio as f64) * bin_w;
                        push_bilinear(&mut taps, y, x, height, width, norm);
                    }
                }
                taps.sort_by_key(|t| t.0);
                let mut merged: Vec<(usize, f64)> = Vec::with_capacity(taps.len());
                for (idx, w) in taps {
                    match merged.last_mut() {
                        Some(last) if last.0 == idx => last.1 += w,
                        _ => merged.push((idx, w)),
                    }
                }
                bins.push(merged);
            }
        }
        Self {
            bins,
            height,
            width,
        }
    }

    pub fn forward(&self, map: &FeatureMap<'_>, gi: usize) -> PooledFeature {
        assert_eq!((map.height, map.width), (self.height, self.width));
        let hw = self.height * self.width;
        let nbins = self.bins.len();
        let mut data = vec![0.0; map.channels * nbins];
        for c in 0..map.channels {
            let plane = &map.data[c * hw..(c + 1) * hw];
            let out = &mut data[c * nbins..(c + 1) * nbins];
            for (o, taps) in out.iter_mut().zip(&self.bins) {
                *o = taps.iter().map(|&(i, w)| w * plane[i]).sum();
            }
        }
        PooledFeature {
            data,
            channels: map.channels,
            gi,
        }
    }

    /// Scatters `grad` (same layout as a pooled feature) into `grad_map`.
    pub fn backward(&self, grad: &[f64], channels: usize, grad_map: &mut [f64]) {
        let hw = self.height * self.width;
        let nbins = self.bins.len();
        assert_eq!(grad.len(), channels * nbins);
        assert_eq!(grad_map.len(), channels * hw);
        for c in 0..channels {
            let g = &grad[c * nbins..(c + 1) * nbins];
            let plane = &mut grad_map[c * hw..(c + 1) * hw];
            for (gv, taps) in g.iter().zip(&self.bins) {
                for &(i, w) in taps {
                    plane[i] += w * gv;
                }
            }
        }
    }
}

fn push_bilinear(taps: &mut Vec<(usize, f64)>, y: f64, x: f64, height: usize, width: usize, scale: f64) {
    let yl = y.floor();
    let xl = x.floor();
    let ly = y - yl;
    let lx = x - xl;
    for (dy, wy) in [(0.0, 1.0 - ly), (1.0, ly)] {
        let iy = yl + dy;
        if iy < 0.0 || iy >= height as f64 || wy == 0.0 {
            continue;
        }
        for (dx, wx) in [(0.0, 1.0 - lx), (1.0, lx)] {
            let ix = xl + dx;
            if ix < 0.0 || ix >= width as f64 || wx == 0.0 {
                continue;
            }
            taps.push((iy as usize * width + ix as usize, scale * wy * wx));
        }
    }
}

/// ROIAlign of one box from one level.
pub fn roi_align(
    map: &FeatureMap<'_>,
    stride: f64,
    bbox: &BoundingBox,
    out_size: usize,
    sampling_ratio: usize,
) -> PooledFeature {
    RoiSampling::new(bbox, stride, map.height, map.width, out_size, sampling_ratio).forward(map, 0)
}

/// Linear 3x3 same-padding convolution mapping student channels to teacher
/// channels on pooled features.
#[derive(Debug, Clone, PartialEq)]
pub struct Adaptation<F> {
    pub conv: Conv2d<F>,
}

pub struct AdaptationCache<F> {
    cache: crate::nn::ConvCache<F>,
    count: usize,
}

impl<F: Real> Adaptation<F> {
    /// Identity-like init: output channel `i` copies input channel `i`
    /// (when it exists) through the kernel centre.
    pub fn identity(student_channels: usize, teacher_channels: usize) -> Self {
        let mut conv = Conv2d::zeros(student_channels, teacher_channels, 3, 1, 1);
        for c in 0..student_channels.min(teacher_channels) {
            conv.weight.value[((c * student_channels + c) * 3 + 1) * 3 + 1] = F::one();
        }
        Self { conv }
    }

    pub fn in_channels(&self) -> usize {
        self.conv.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels
    }

    fn to_tensor(&self, feats: &[PooledFeature]) -> Result<Tensor<F>> {
        let mut data = Vec::with_capacity(feats.len() * self.in_channels() * PooledFeature::bins());
        for f in feats {
            if f.channels != self.in_channels() || f.data.len() != f.channels * PooledFeature::bins() {
                return Err(GidError::contract(format!(
                    "adaptation expects {} channels, got {}",
                    self.in_channels(),
                    f.channels
                )));
            }
            data.extend(f.data.iter().map(|v| F::from_f64_lossy(*v)));
        }
        Ok(Tensor::from_vec(
            data,
            [feats.len(), self.in_channels(), POOL_SIZE, POOL_SIZE],
        ))
    }

    pub fn forward(&self, feats: &[PooledFeature]) -> Result<Vec<PooledFeature>> {
        Ok(self.forward_cached(feats, false)?.0)
    }

    pub fn forward_cached(
        &self,
        feats: &[PooledFeature],
        keep_cache: bool,
    ) -> Result<(Vec<PooledFeature>, Option<AdaptationCache<F>>)> {
        if feats.is_empty() {
            return Ok((Vec::new(), None));
        }
        let x = self.to_tensor(feats)?;
        let (y, cache) = self.conv.forward(&x, keep_cache);
        let out = feats
            .iter()
            .enumerate()
            .map(|(i, f)| PooledFeature {
                data: y.image(i).iter().map(|v| v.as_f64()).collect(),
                channels: self.out_channels(),
                gi: f.gi,
            })
            .collect();
        Ok((
            out,
            cache.map(|cache| AdaptationCache {
                cache,
                count: feats.len(),
            }),
        ))
    }

    /// Accumulates weight gradients and returns gradients with respect to the
    /// (pre-adaptation) student features.
    pub fn backward(&mut self, cache: &AdaptationCache<F>, grads: &[Vec<f64>]) -> Vec<Vec<f64>> {
        assert_eq!(grads.len(), cache.count);
        let data = grads
            .iter()
            .flat_map(|g| g.iter().map(|v| F::from_f64_lossy(*v)))
            .collect();
        let gy = Tensor::from_vec(data, [cache.count, self.out_channels(), POOL_SIZE, POOL_SIZE]);
        let gx = self
            .conv
            .backward(&cache.cache, &gy, true)
            .expect("input gradient requested");
        (0..cache.count)
            .map(|i| gx.image(i).iter().map(|v| v.as_f64()).collect())
            .collect()
    }
}

impl<F: Real> Parameterized<F> for Adaptation<F> {
    fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<F>)>) {
        self.conv.visit_params(prefix, out);
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<F>)>) {
        self.conv.visit_params_mut(prefix, out);
    }
}

/// A scalar loss with its gradient for each student-side feature.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGradLoss {
    pub value: f64,
    pub grads: Vec<Vec<f64>>,
}

fn check_pairs(teacher: &[PooledFeature], student: &[PooledFeature]) -> Result<()> {
    if teacher.len() != student.len() {
        return Err(GidError::contract(format!(
            "{} teacher features vs {} student features",
            teacher.len(),
            student.len()
        )));
    }
    for (t, s) in teacher.iter().zip(student) {
        if t.data.len() != s.data.len() {
            return Err(GidError::contract(format!(
                "pooled feature sizes differ: {} vs {}",
                t.data.len(),
                s.data.len()
            )));
        }
    }
    Ok(())
}

/// `(1/K) * sum_i ||t_i - s'_i||^2`, zero for an empty GI set.
pub fn feature_loss(teacher: &[PooledFeature], adapted_student: &[PooledFeature]) -> Result<FeatureGradLoss> {
    check_pairs(teacher, adapted_student)?;
    let k = teacher.len();
    if k == 0 {
        return Ok(FeatureGradLoss {
            value: 0.0,
            grads: Vec::new(),
        });
    }
    let inv_k = 1.0 / k as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(k);
    for (t, s) in teacher.iter().zip(adapted_student) {
        let mut g = Vec::with_capacity(s.data.len());
        for (tv, sv) in t.data.iter().zip(&s.data) {
            let d = sv - tv;
            value += d * d;
            g.push(2.0 * d * inv_k);
        }
        grads.push(g);
    }
    Ok(FeatureGradLoss {
        value: value * inv_k,
        grads,
    })
}
