//! Small one-stage detectors used as teacher/student pairs.
//!
//! A stack of stride-2 stages (optionally with extra stride-1 blocks) feeds a
//! top-down FPN. A head shared across levels predicts per-location class
//! logits and box regression, either against one or more square anchors
//! (anchor-based) or as `(l, t, r, b)` distances from the location's point
//! (anchor-free).

mod checkpoint;
mod head;
mod loss;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GidError, Result};
use crate::nn::{
    prefixed, relu_backward_inplace, relu_inplace, upsample2, upsample2_backward, Conv2d, ConvCache, Param,
    Parameterized, Real, Tensor,
};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use head::{decode_anchor_deltas, encode_anchor_deltas, Detection, LocationGrid, MAX_LOG_DISTANCE};
pub use loss::{assign_targets, image_task_loss, ImageTaskLoss, Target, TaskLossConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadVariant {
    AnchorBased,
    AnchorFree,
}

impl HeadVariant {
    pub fn name(self) -> &'static str {
        match self {
            HeadVariant::AnchorBased => "anchor_based",
            HeadVariant::AnchorFree => "anchor_free",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub variant: HeadVariant,
    pub num_classes: usize,
    /// Square input side in pixels.
    pub image_size: usize,
    pub in_channels: usize,
    /// Output channels of each stride-2 stage; stage `i` has stride `2^(i+1)`.
    pub stage_channels: Vec<usize>,
    /// Extra stride-1 conv blocks after the first conv of each stage.
    pub stage_depth: Vec<usize>,
    /// Strides of the pyramid levels, each twice the previous.
    pub fpn_strides: Vec<usize>,
    pub fpn_channels: usize,
    /// Conv+ReLU blocks in each head tower before the predictor.
    pub head_convs: usize,
    /// Anchor sides as multiples of the level stride.
    pub anchor_scales: Vec<f64>,
    /// Height/width ratios of the anchors.
    pub anchor_ratios: Vec<f64>,
    /// Initial foreground probability of the classifier.
    pub prior_prob: f64,
}

impl DetectorConfig {
    /// Shallow 4-block student.
    pub fn student(variant: HeadVariant, num_classes: usize) -> Self {
        Self {
            variant,
            num_classes,
            image_size: 64,
            in_channels: 3,
            stage_channels: vec![16, 32, 48, 64],
            stage_depth: vec![0, 0, 0, 0],
            fpn_strides: vec![4, 8, 16],
            fpn_channels: 64,
            head_convs: 1,
            anchor_scales: vec![4.0],
            anchor_ratios: vec![1.0],
            prior_prob: 0.01,
        }
    }

    /// Deeper, wider 8-block teacher with a head identical to the student's.
    pub fn teacher(variant: HeadVariant, num_classes: usize) -> Self {
        Self {
            stage_channels: vec![32, 64, 96, 128],
            stage_depth: vec![1, 1, 1, 1],
            ..Self::student(variant, num_classes)
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stage_channels.len()
    }

    pub fn conv_blocks(&self) -> usize {
        self.num_stages() + self.stage_depth.iter().sum::<usize>()
    }

    pub fn anchors_per_location(&self) -> usize {
        match self.variant {
            HeadVariant::AnchorBased => self.anchor_scales.len() * self.anchor_ratios.len(),
            HeadVariant::AnchorFree => 1,
        }
    }

    pub fn level_size(&self, level: usize) -> usize {
        self.image_size / self.fpn_strides[level]
    }

    /// Total prediction count per image.
    pub fn num_locations(&self) -> usize {
        (0..self.fpn_strides.len())
            .map(|l| self.level_size(l).pow(2) * self.anchors_per_location())
            .sum()
    }

    /// Stage index producing each pyramid level.
    fn level_stages(&self) -> Vec<usize> {
        self.fpn_strides
            .iter()
            .map(|s| s.trailing_zeros() as usize - 1)
            .collect()
    }

    /// Side of the box considered canonical for pyramid level 0.
    pub fn canonical_box_size(&self) -> f64 {
        let scale = self.anchor_scales.first().copied().unwrap_or(4.0);
        scale * self.fpn_strides[0] as f64 / std::f64::consts::SQRT_2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: String| Err(GidError::config(f, m));
        if self.num_classes == 0 {
            return bad("num_classes", "must be positive".into());
        }
        if self.in_channels == 0 {
            return bad("in_channels", "must be positive".into());
        }
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return bad("stage_channels", "need at least one stage, all widths positive".into());
        }
        if self.stage_depth.len() != self.stage_channels.len() {
            return bad(
                "stage_depth",
                format!("has {} entries, expected {}", self.stage_depth.len(), self.stage_channels.len()),
            );
        }
        if self.fpn_strides.is_empty() {
            return bad("fpn_strides", "need at least one level".into());
        }
        for (i, s) in self.fpn_strides.iter().enumerate() {
            if !s.is_power_of_two() || *s < 2 {
                return bad("fpn_strides", format!("stride {s} is not a power of two >= 2"));
            }
            if i > 0 && *s != 2 * self.fpn_strides[i - 1] {
                return bad("fpn_strides", "each stride must double the previous one".into());
            }
        }
        let max_stride = *self.fpn_strides.last().unwrap();
        if max_stride != 1 << self.num_stages() {
            return bad(
                "stage_channels",
                format!("{} stages reach stride {}, pyramid needs {max_stride}", self.num_stages(), 1usize << self.num_stages()),
            );
        }
        if self.image_size == 0 || self.image_size % max_stride != 0 {
            return bad("image_size", format!("{} is not divisible by the largest stride {max_stride}", self.image_size));
        }
        if self.fpn_channels == 0 {
            return bad("fpn_channels", "must be positive".into());
        }
        if self.variant == HeadVariant::AnchorBased
            && (self.anchor_scales.is_empty()
                || self.anchor_ratios.is_empty()
                || self.anchor_scales.iter().chain(&self.anchor_ratios).any(|v| !(*v > 0.0)))
        {
            return bad("anchor_scales", "anchor scales and ratios must be non-empty and positive".into());
        }
        if !(self.prior_prob > 0.0 && self.prior_prob < 1.0) {
            return bad("prior_prob", "must lie in (0, 1)".into());
        }
        Ok(())
    }

    /// Teacher and student must agree on everything the head sees.
    pub fn check_head_compatible(&self, other: &DetectorConfig) -> Result<()> {
        let same = self.variant == other.variant
            && self.num_classes == other.num_classes
            && self.image_size == other.image_size
            && self.fpn_strides == other.fpn_strides
            && self.anchor_scales == other.anchor_scales
            && self.anchor_ratios == other.anchor_ratios;
        if same {
            Ok(())
        } else {
            Err(GidError::contract(
                "teacher and student heads differ (variant, classes, image size, strides or anchors)",
            ))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detector<F> {
    pub config: DetectorConfig,
    pub stages: Vec<Vec<Conv2d<F>>>,
    pub lateral: Vec<Conv2d<F>>,
    pub fpn_out: Vec<Conv2d<F>>,
    pub cls_tower: Vec<Conv2d<F>>,
    pub cls_pred: Conv2d<F>,
    pub reg_tower: Vec<Conv2d<F>>,
    pub reg_pred: Conv2d<F>,
}

/// Raw network outputs for a batch: per pyramid level, FPN features
/// `[N, D, H, W]`, class logits `[N, A*C, H, W]` and regression `[N, A*4, H, W]`.
#[derive(Debug, Clone)]
pub struct DetectorOutput<F> {
    pub features: Vec<Tensor<F>>,
    pub cls: Vec<Tensor<F>>,
    pub reg: Vec<Tensor<F>>,
}

/// Gradients flowing into a [`DetectorOutput`]. `features` entries are
/// optional extra gradients on the FPN maps.
#[derive(Debug, Clone)]
pub struct OutputGrads<F> {
    pub cls: Vec<Tensor<F>>,
    pub reg: Vec<Tensor<F>>,
    pub features: Vec<Option<Tensor<F>>>,
}

struct LayerCache<F> {
    conv: ConvCache<F>,
    /// Post-activation output, kept for ReLU layers only.
    activated: Option<Tensor<F>>,
}

struct HeadCache<F> {
    cls_tower: Vec<LayerCache<F>>,
    cls_pred: ConvCache<F>,
    reg_tower: Vec<LayerCache<F>>,
    reg_pred: ConvCache<F>,
}

pub struct ForwardCache<F> {
    stages: Vec<Vec<LayerCache<F>>>,
    lateral: Vec<ConvCache<F>>,
    fpn_out: Vec<ConvCache<F>>,
    heads: Vec<HeadCache<F>>,
}

fn conv_relu<F: Real>(conv: &Conv2d<F>, x: &Tensor<F>, train: bool) -> (Tensor<F>, Option<LayerCache<F>>) {
    let (mut y, cache) = conv.forward(x, train);
    relu_inplace(&mut y);
    let cache = cache.map(|conv| LayerCache {
        conv,
        activated: Some(y.clone()),
    });
    (y, cache)
}

fn conv_relu_backward<F: Real>(conv: &mut Conv2d<F>, cache: &LayerCache<F>, mut grad: Tensor<F>, need_input: bool) -> Option<Tensor<F>> {
    if let Some(out) = &cache.activated {
        relu_backward_inplace(&mut grad, out);
    }
    conv.backward(&cache.conv, &grad, need_input)
}

impl<F: Real> Detector<F> {
    /// Deterministic initialisation from `seed`.
    pub fn new(config: DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::with_capacity(config.num_stages());
        let mut in_ch = config.in_channels;
        for (&ch, &depth) in config.stage_channels.iter().zip(&config.stage_depth) {
            let mut stage = Vec::with_capacity(depth + 1);
            let mut first = Conv2d::zeros(in_ch, ch, 3, 2, 1);
            first.init_kaiming(&mut rng);
            stage.push(first);
            for _ in 0..depth {
                let mut c = Conv2d::zeros(ch, ch, 3, 1, 1);
                c.init_kaiming(&mut rng);
                stage.push(c);
            }
            stages.push(stage);
            in_ch = ch;
        }
        let d = config.fpn_channels;
        let mut lateral = Vec::new();
        let mut fpn_out = Vec::new();
        for stage in config.level_stages() {
            let mut lat = Conv2d::zeros(config.stage_channels[stage], d, 1, 1, 0);
            lat.init_normal(&mut rng, (1.0 / config.stage_channels[stage] as f64).sqrt(), 0.0);
            lateral.push(lat);
            let mut out = Conv2d::zeros(d, d, 3, 1, 1);
            out.init_normal(&mut rng, (1.0 / (9 * d) as f64).sqrt(), 0.0);
            fpn_out.push(out);
        }
        let tower = |rng: &mut ChaCha8Rng| {
            (0..config.head_convs)
                .map(|_| {
                    let mut c = Conv2d::zeros(d, d, 3, 1, 1);
                    c.init_normal(rng, 0.01, 0.0);
                    c
                })
                .collect::<Vec<_>>()
        };
        let a = config.anchors_per_location();
        let cls_tower = tower(&mut rng);
        let mut cls_pred = Conv2d::zeros(d, a * config.num_classes, 3, 1, 1);
        let prior_bias = -((1.0 - config.prior_prob) / config.prior_prob).ln();
        cls_pred.init_normal(&mut rng, 0.01, prior_bias);
        let reg_tower = tower(&mut rng);
        let mut reg_pred = Conv2d::zeros(d, a * 4, 3, 1, 1);
        reg_pred.init_normal(&mut rng, 0.01, 0.0);
        Ok(Self {
            config,
            stages,
            lateral,
            fpn_out,
            cls_tower,
            cls_pred,
            reg_tower,
            reg_pred,
        })
    }

    pub fn grid(&self) -> LocationGrid {
        LocationGrid::new(&self.config)
    }

    /// Runs the network. The cache is only kept when `train` is set.
    pub fn forward(&self, images: &Tensor<F>, train: bool) -> Result<(DetectorOutput<F>, Option<ForwardCache<F>>)> {
        let [_, c, h, w] = images.shape;
        if c != self.config.in_channels || h != self.config.image_size || w != self.config.image_size {
            return Err(GidError::contract(format!(
                "expected {}x{}x{} images, got {c}x{h}x{w}",
                self.config.in_channels, self.config.image_size, self.config.image_size
            )));
        }
        let mut stage_caches = Vec::new();
        let mut stage_outputs = Vec::new();
        let mut x = images.clone();
        for stage in &self.stages {
            let mut caches = Vec::new();
            for conv in stage {
                let (y, cache) = conv_relu(conv, &x, train);
                caches.extend(cache);
                x = y;
            }
            stage_caches.push(caches);
            stage_outputs.push(x.clone());
        }

        let level_stages = self.config.level_stages();
        let levels = level_stages.len();
        let mut lat_caches = Vec::new();
        let mut merged: Vec<Option<Tensor<F>>> = vec![None; levels];
        for l in (0..levels).rev() {
            let (mut lat, cache) = self.lateral[l].forward(&stage_outputs[level_stages[l]], train);
            lat_caches.push(cache);
            if let Some(top) = merged.get(l + 1).and_then(|m| m.as_ref()) {
                lat.add_assign(&upsample2(top));
            }
            merged[l] = Some(lat);
        }
        lat_caches.reverse();

        let mut features = Vec::with_capacity(levels);
        let mut fpn_caches = Vec::new();
        for (l, m) in merged.iter().enumerate() {
            let (p, cache) = self.fpn_out[l].forward(m.as_ref().unwrap(), train);
            fpn_caches.extend(cache);
            features.push(p);
        }

        let mut cls = Vec::with_capacity(levels);
        let mut reg = Vec::with_capacity(levels);
        let mut heads = Vec::new();
        for p in &features {
            let (cl, ct, cp) = Self::branch(&self.cls_tower, &self.cls_pred, p, train);
            let (rg, rt, rp) = Self::branch(&self.reg_tower, &self.reg_pred, p, train);
            cls.push(cl);
            reg.push(rg);
            if train {
                heads.push(HeadCache {
                    cls_tower: ct,
                    cls_pred: cp.unwrap(),
                    reg_tower: rt,
                    reg_pred: rp.unwrap(),
                });
            }
        }
        let cache = train.then(|| ForwardCache {
            stages: stage_caches,
            lateral: lat_caches.into_iter().map(Option::unwrap).collect(),
            fpn_out: fpn_caches,
            heads,
        });
        Ok((DetectorOutput { features, cls, reg }, cache))
    }

    fn branch(
        tower: &[Conv2d<F>],
        pred: &Conv2d<F>,
        p: &Tensor<F>,
        train: bool,
    ) -> (Tensor<F>, Vec<LayerCache<F>>, Option<ConvCache<F>>) {
        let mut caches = Vec::new();
        let mut h = p.clone();
        for conv in tower {
            let (y, cache) = conv_relu(conv, &h, train);
            caches.extend(cache);
            h = y;
        }
        let (out, cache) = pred.forward(&h, train);
        (out, caches, cache)
    }

    fn branch_backward(
        tower: &mut [Conv2d<F>],
        pred: &mut Conv2d<F>,
        tower_cache: &[LayerCache<F>],
        pred_cache: &ConvCache<F>,
        grad: &Tensor<F>,
    ) -> Tensor<F> {
        let mut g = pred.backward(pred_cache, grad, true).unwrap();
        for (conv, cache) in tower.iter_mut().zip(tower_cache).rev() {
            g = conv_relu_backward(conv, cache, g, true).unwrap();
        }
        g
    }

    /// Accumulates parameter gradients for the given output gradients.
    pub fn backward(&mut self, cache: &ForwardCache<F>, grads: &OutputGrads<F>) {
        let levels = self.config.fpn_strides.len();
        assert_eq!(grads.cls.len(), levels);
        assert_eq!(grads.reg.len(), levels);

        let mut grad_p = Vec::with_capacity(levels);
        for l in 0..levels {
            let hc = &cache.heads[l];
            let mut g = Self::branch_backward(&mut self.cls_tower, &mut self.cls_pred, &hc.cls_tower, &hc.cls_pred, &grads.cls[l]);
            g.add_assign(&Self::branch_backward(
                &mut self.reg_tower,
                &mut self.reg_pred,
                &hc.reg_tower,
                &hc.reg_pred,
                &grads.reg[l],
            ));
            if let Some(Some(extra)) = grads.features.get(l) {
                g.add_assign(extra);
            }
            grad_p.push(g);
        }

        // top-down pathway: merged[l] = lateral[l] + up(merged[l + 1])
        let mut grad_merged: Vec<Tensor<F>> = Vec::with_capacity(levels);
        for l in 0..levels {
            let mut g = self.fpn_out[l].backward(&cache.fpn_out[l], &grad_p[l], true).unwrap();
            if l > 0 {
                g.add_assign(&upsample2_backward(&grad_merged[l - 1]));
            }
            grad_merged.push(g);
        }

        let level_stages = self.config.level_stages();
        let mut stage_grads: Vec<Option<Tensor<F>>> = vec![None; self.stages.len()];
        for l in 0..levels {
            let g = self.lateral[l].backward(&cache.lateral[l], &grad_merged[l], true).unwrap();
            stage_grads[level_stages[l]] = Some(g);
        }

        let mut carry: Option<Tensor<F>> = None;
        for s in (0..self.stages.len()).rev() {
            let mut g = match (carry.take(), stage_grads[s].take()) {
                (Some(mut a), Some(b)) => {
                    a.add_assign(&b);
                    a
                }
                (Some(a), None) => a,
                (None, Some(b)) => b,
                (None, None) => continue,
            };
            let n = self.stages[s].len();
            for i in (0..n).rev() {
                let need_input = s > 0 || i > 0;
                match conv_relu_backward(&mut self.stages[s][i], &cache.stages[s][i], g, need_input) {
                    Some(next) => g = next,
                    None => return,
                }
            }
            carry = Some(g);
        }
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.value.len()).sum()
    }

    pub fn cast<G: Real>(&self) -> Detector<G> {
        let conv = |c: &Conv2d<F>| Conv2d {
            weight: Param::new(c.weight.value.iter().map(|v| G::from_f64_lossy(v.as_f64())).collect(), c.weight.shape.clone()),
            bias: Param::new(c.bias.value.iter().map(|v| G::from_f64_lossy(v.as_f64())).collect(), c.bias.shape.clone()),
            in_channels: c.in_channels,
            out_channels: c.out_channels,
            kernel: c.kernel,
            stride: c.stride,
            padding: c.padding,
        };
        Detector {
            config: self.config.clone(),
            stages: self.stages.iter().map(|s| s.iter().map(conv).collect()).collect(),
            lateral: self.lateral.iter().map(conv).collect(),
            fpn_out: self.fpn_out.iter().map(conv).collect(),
            cls_tower: self.cls_tower.iter().map(conv).collect(),
            cls_pred: conv(&self.cls_pred),
            reg_tower: self.reg_tower.iter().map(conv).collect(),
            reg_pred: conv(&self.reg_pred),
        }
    }
}

impl<F: Real> Parameterized<F> for Detector<F> {
    fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<F>)>) {
        for (s, stage) in self.stages.iter().enumerate() {
            for (i, c) in stage.iter().enumerate() {
                c.visit_params(&prefixed(prefix, &format!("backbone.{s}.{i}")), out);
            }
        }
        for (l, c) in self.lateral.iter().enumerate() {
            c.visit_params(&prefixed(prefix, &format!("fpn.lateral.{l}")), out);
        }
        for (l, c) in self.fpn_out.iter().enumerate() {
            c.visit_params(&prefixed(prefix, &format!("fpn.output.{l}")), out);
        }
        for (i, c) in self.cls_tower.iter().enumerate() {
            c.visit_params(&prefixed(prefix, &format!("head.cls_tower.{i}")), out);
        }
        self.cls_pred.visit_params(&prefixed(prefix, "head.cls_pred"), out);
        for (i, c) in self.reg_tower.iter().enumerate() {
            c.visit_params(&prefixed(prefix, &format!("head.reg_tower.{i}")), out);
        }
        self.reg_pred.visit_params(&prefixed(prefix, "head.reg_pred"), out);
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<F>)>) {
        for (s, stage) in self.stages.iter_mut().enumerate() {
            for (i, c) in stage.iter_mut().enumerate() {
                c.visit_params_mut(&prefixed(prefix, &format!("backbone.{s}.{i}")), out);
            }
        }
        for (l, c) in self.lateral.iter_mut().enumerate() {
            c.visit_params_mut(&prefixed(prefix, &format!("fpn.lateral.{l}")), out);
        }
        for (l, c) in self.fpn_out.iter_mut().enumerate() {
            c.visit_params_mut(&prefixed(prefix, &format!("fpn.output.{l}")), out);
        }
        for (i, c) in self.cls_tower.iter_mut().enumerate() {
            c.visit_params_mut(&prefixed(prefix, &format!("head.cls_tower.{i}")), out);
        }
        self.cls_pred.visit_params_mut(&prefixed(prefix, "head.cls_pred"), out);
        for (i, c) in self.reg_tower.iter_mut().enumerate() {
            c.visit_params_mut(&prefixed(prefix, &format!("head.reg_tower.{i}")), out);
        }
        self.reg_pred.visit_params_mut(&prefixed(prefix, "head.reg_pred"), out);
    }
}
