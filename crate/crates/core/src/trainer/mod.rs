//! Training loops for teachers, baseline students and distilled students.
//!
//! All three share one step function. A distillation step additionally runs
//! the frozen teacher, selects GIs per image and adds the enabled
//! distillation terms to the task loss:
//! `total = task + l1 * feature + l2 * relation + l3 * response`.
//! Distillation terms are averaged over the images of a batch; the task loss
//! is normalised by the batch's positive count.

mod ablate;
mod optim;
mod run;
mod trace;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{to_tensor, Dataset, Sample};
use crate::detector::{image_task_loss, Detector, LocationGrid, OutputGrads, TaskLossConfig};
use crate::error::{GidError, Result};
use crate::evaluation::{coco_map, ground_truth, DetectionResult, EvalReport};
use crate::feature_distill::{
    assign_fpn_level, feature_loss, Adaptation, FeatureMap, PooledFeature, RoiSampling, POOL_SIZE, SAMPLING_RATIO,
};
use crate::functional::sigmoid;
use crate::geometry::BoundingBox;
use crate::gism::{classify_all, gi_scores, select_gis, GiRecord, GiType, PredictionBatch};
use crate::nn::{Parameterized, Tensor};
use crate::relation_distill::relation_loss;
use crate::response_distill::{assign_mask, response_loss, HeadOutputs};

pub use ablate::{ablate, AblationCell, AblationGrid, AblationTable, GridKind};
pub use optim::{OptimConfig, Sgd};
pub use run::{
    run_distill, run_eval, run_train, teacher_checksum, DatasetRef, EvalPoint, RunKind, RunManifest, RunOutput,
    ADAPTATION_PREFIX, CHECKPOINT_FILE, LOSSES_FILE, MANIFEST_FILE, RESULTS_FILE,
};
pub use trace::{
    read_jsonl, type_counts, write_jsonl, GiTrace, Heatmap, TraceStep, TRACE_NEW_WEIGHT, TRACE_SMOOTHING,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Seeds model initialisation and the data order.
    pub seed: u64,
    pub hflip: bool,
    pub optim: OptimConfig,
    pub task: TaskLossConfig,
    /// Validation interval in steps; 0 evaluates only at the end.
    pub eval_every: usize,
    pub score_threshold: f64,
    pub nms_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 8,
            seed: 0,
            hflip: true,
            optim: OptimConfig::default(),
            task: TaskLossConfig::default(),
            eval_every: 0,
            score_threshold: 0.05,
            nms_threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(GidError::config("batch_size", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(GidError::config("score_threshold", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.nms_threshold) {
            return Err(GidError::config("nms_threshold", "must lie in [0, 1]"));
        }
        self.optim.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Knowledge {
    pub feature: bool,
    pub relation: bool,
    pub response: bool,
}

impl Default for Knowledge {
    fn default() -> Self {
        Self::ALL
    }
}

impl Knowledge {
    pub const NONE: Knowledge = Knowledge {
        feature: false,
        relation: false,
        response: false,
    };
    pub const ALL: Knowledge = Knowledge {
        feature: true,
        relation: true,
        response: true,
    };

    pub fn any(&self) -> bool {
        self.feature || self.relation || self.response
    }

    pub fn label(&self) -> String {
        let parts: Vec<&str> = [(self.feature, "feature"), (self.relation, "relation"), (self.response, "response")]
            .iter()
            .filter(|p| p.0)
            .map(|p| p.1)
            .collect();
        match parts.len() {
            0 => "none".into(),
            3 => "all".into(),
            _ => parts.join("+"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub k: usize,
    pub nms_iou: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub alpha: f64,
    pub beta: f64,
    pub relation_smooth_l1_beta: f64,
    pub anchor_iou: f64,
    pub knowledge: Knowledge,
    /// When set, only GIs of these types are distilled; Ignore-type GIs are
    /// always dropped under a filter.
    pub gi_types: Option<Vec<GiType>>,
    /// Heatmap and GI dump interval in steps; 0 disables them.
    pub heatmap_every: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            k: 10,
            nms_iou: 0.3,
            lambda1: 5e-4,
            lambda2: 40.0,
            lambda3: 1.0,
            alpha: 0.1,
            beta: 1.0,
            relation_smooth_l1_beta: 1.0,
            anchor_iou: 0.5,
            knowledge: Knowledge::ALL,
            gi_types: None,
            heatmap_every: 100,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("alpha", self.alpha),
            ("beta", self.beta),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(GidError::config(name, "must be a finite non-negative weight"));
            }
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(GidError::config("nms_iou", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.anchor_iou) {
            return Err(GidError::config("anchor_iou", "must lie in [0, 1]"));
        }
        if !(self.relation_smooth_l1_beta >= 0.0) {
            return Err(GidError::config("relation_smooth_l1_beta", "must be non-negative"));
        }
        if let Some(types) = &self.gi_types {
            if types.contains(&GiType::Ignore) {
                return Err(GidError::config("gi_types", "ignore-type GIs cannot be selected"));
            }
        }
        Ok(())
    }

    /// Whether any distillation term can be non-zero.
    pub fn active(&self) -> bool {
        self.k > 0 && self.knowledge.any()
    }
}

/// Loss components of one step, already averaged over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub feature: f64,
    pub relation: f64,
    pub response: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(task: f64, feature: f64, relation: f64, response: f64, d: Option<&DistillConfig>) -> Self {
        let (l1, l2, l3) = d.map_or((0.0, 0.0, 0.0), |d| (d.lambda1, d.lambda2, d.lambda3));
        Self {
            task,
            feature,
            relation,
            response,
            total: task + l1 * feature + l2 * relation + l3 * response,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub losses: LossBreakdown,
    pub num_pos: usize,
    pub grad_norm: f64,
}

pub struct TrainOutcome {
    pub model: Detector<f32>,
    pub adaptation: Option<Adaptation<f64>>,
    pub history: Vec<StepLog>,
    pub trace: Option<GiTrace>,
    pub evals: Vec<(usize, EvalReport)>,
    pub final_eval: Option<EvalReport>,
    pub final_results: Vec<DetectionResult>,
}

/// Deterministic epoch-shuffled sampler with optional horizontal flips.
struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    len: usize,
}

impl BatchSampler {
    fn new(seed: u64, len: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Self {
            rng,
            order: Vec::new(),
            pos: 0,
            len,
        }
    }

    fn next(&mut self, batch: usize) -> Vec<(usize, bool)> {
        (0..batch)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order = (0..self.len).collect();
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                let idx = self.order[self.pos];
                self.pos += 1;
                (idx, self.rng.random_bool(0.5))
            })
            .collect()
    }
}

fn check_finite(value: f64, component: &str, step: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(GidError::Diverged {
            component: component.into(),
            step,
        })
    }
}

fn level_maps(features: &[Tensor<f32>], b: usize) -> Vec<Vec<f64>> {
    features
        .iter()
        .map(|t| t.image(b).iter().map(|&v| v as f64).collect())
        .collect()
}

/// Per-image GI bookkeeping handed to the trace.
struct ImageGiInfo {
    counts: [usize; 4],
}

struct StepResult {
    log: StepLog,
    gi_counts: Vec<ImageGiInfo>,
}

/// Everything one step needs beyond the student.
struct StepContext<'a> {
    grid: &'a LocationGrid,
    cfg: &'a TrainConfig,
    teacher: Option<&'a Detector<f32>>,
    distill: Option<&'a DistillConfig>,
    canonical: f64,
}

fn gt_boxes(sample: &Sample) -> Vec<BoundingBox> {
    sample.objects.iter().map(|o| o.bbox).collect()
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    ctx: &StepContext<'_>,
    student: &mut Detector<f32>,
    adaptation: &mut Option<Adaptation<f64>>,
    batch: &[Sample],
    step: usize,
    lr: f64,
    trace: Option<&mut GiTrace>,
    want_heatmap: bool,
) -> Result<StepResult> {
    let grid = ctx.grid;
    let c = grid.num_classes;
    let n = batch.len();
    let refs: Vec<&Sample> = batch.iter().collect();
    let x = to_tensor::<f32>(&refs);
    let (out_s, cache) = student.forward(&x, true)?;
    let cache = cache.expect("training forward keeps its cache");

    let cls_s: Vec<Vec<f64>> = (0..n).map(|b| grid.flatten(&out_s.cls, b, c)).collect();
    let reg_s: Vec<Vec<f64>> = (0..n).map(|b| grid.flatten(&out_s.reg, b, 4)).collect();

    let mut grad_cls = Vec::with_capacity(n);
    let mut grad_reg = Vec::with_capacity(n);
    let mut sums = 0.0;
    let mut num_pos = 0;
    for b in 0..n {
        let l = image_task_loss(grid, &cls_s[b], &reg_s[b], &batch[b].objects, &ctx.cfg.task)?;
        sums += l.cls_sum + l.reg_sum;
        num_pos += l.num_pos;
        grad_cls.push(l.grad_cls);
        grad_reg.push(l.grad_reg);
    }
    let norm = 1.0 / num_pos.max(1) as f64;
    let task = sums * norm;
    check_finite(task, "task", step)?;
    for g in grad_cls.iter_mut().chain(grad_reg.iter_mut()) {
        g.iter_mut().for_each(|v| *v *= norm);
    }

    let (mut feat_sum, mut rel_sum, mut resp_sum) = (0.0, 0.0, 0.0);
    let mut feature_grads: Option<Vec<Vec<f64>>> = None;
    let mut gi_counts = Vec::new();
    let distill = ctx.distill.filter(|d| d.active());
    if let (Some(d), Some(teacher)) = (distill, ctx.teacher) {
        let (out_t, _) = teacher.forward(&x, false)?;
        let levels = grid.level_sizes.len();
        let d_s = student.config.fpn_channels;
        let d_t = teacher.config.fpn_channels;
        let inv_n = 1.0 / n as f64;
        let pooled_needed = d.knowledge.feature || d.knowledge.relation;
        let mut fgrads: Vec<Vec<f64>> = (0..levels).map(|l| vec![0.0; out_s.features[l].data.len()]).collect();
        let mut trace = trace;
        for b in 0..n {
            let cls_t = grid.flatten(&out_t.cls, b, c);
            let reg_t = grid.flatten(&out_t.reg, b, 4);
            let tb = PredictionBatch::new(cls_t.iter().map(|&v| sigmoid(v)).collect(), grid.decode(&reg_t), c)?;
            let sb = PredictionBatch::new(cls_s[b].iter().map(|&v| sigmoid(v)).collect(), grid.decode(&reg_s[b]), c)?;
            let mut gis = select_gis(&tb, &sb, d.nms_iou, d.k)?;
            classify_all(&mut gis, &gt_boxes(&batch[b]));
            gi_counts.push(ImageGiInfo {
                counts: type_counts(&gis),
            });
            if want_heatmap && b == 0 {
                if let Some(tr) = trace.as_deref_mut() {
                    tr.heatmaps.push(Heatmap {
                        step,
                        image_id: batch[0].id,
                        level_sizes: grid.level_sizes.clone(),
                        anchors_per_location: grid.anchors_per_location,
                        scores: gi_scores(&tb, &sb)?,
                    });
                    tr.records.extend(gis.iter().map(|g| GiRecord {
                        step,
                        image_id: batch[0].id,
                        score: g.score,
                        bbox: g.bbox.to_array(),
                        source: g.source,
                        gi_type: g.gi_type,
                    }));
                }
            }
            if let Some(types) = &d.gi_types {
                gis.retain(|g| g.gi_type.is_some_and(|t| types.contains(&t)));
            }

            if pooled_needed && !gis.is_empty() {
                let t_maps = level_maps(&out_t.features, b);
                let s_maps = level_maps(&out_s.features, b);
                let mut samplings = Vec::with_capacity(gis.len());
                let mut t_pooled = Vec::with_capacity(gis.len());
                let mut s_pooled = Vec::with_capacity(gis.len());
                for (i, gi) in gis.iter().enumerate() {
                    let l = assign_fpn_level(&gi.bbox, levels, ctx.canonical);
                    let size = grid.level_sizes[l];
                    let samp = RoiSampling::new(&gi.bbox, grid.level_strides[l], size, size, POOL_SIZE, SAMPLING_RATIO);
                    t_pooled.push(samp.forward(&FeatureMap::new(&t_maps[l], d_t, size, size)?, i));
                    s_pooled.push(samp.forward(&FeatureMap::new(&s_maps[l], d_s, size, size)?, i));
                    samplings.push((l, samp));
                }
                let adapt = adaptation.as_mut().expect("adaptation exists while distilling");
                let (adapted, acache) = adapt.forward_cached(&s_pooled, true)?;
                let mut g_adapted: Vec<Vec<f64>> = adapted.iter().map(|a| vec![0.0; a.data.len()]).collect();
                if d.knowledge.feature {
                    let fl = feature_loss(&t_pooled, &adapted)?;
                    feat_sum += fl.value;
                    accumulate(&mut g_adapted, &fl.grads, d.lambda1 * inv_n);
                }
                if d.knowledge.relation {
                    let rl = relation_loss(&t_pooled, &adapted, d.relation_smooth_l1_beta)?;
                    rel_sum += rl.value;
                    accumulate(&mut g_adapted, &rl.grads, d.lambda2 * inv_n);
                }
                let g_pooled = adapt.backward(acache.as_ref().expect("cache kept"), &g_adapted);
                let plane = d_s * PooledFeature::bins();
                debug_assert!(g_pooled.iter().all(|g| g.len() == plane));
                for ((l, samp), g) in samplings.iter().zip(&g_pooled) {
                    let size = grid.level_sizes[*l];
                    let len = d_s * size * size;
                    samp.backward(g, d_s, &mut fgrads[*l][b * len..(b + 1) * len]);
                }
            }

            if d.knowledge.response {
                let mask = assign_mask(&gis, grid.head_geometry(), d.anchor_iou);
                let native_t = grid.native_regression(&reg_t);
                let native_s = grid.native_regression(&reg_s[b]);
                let rl = response_loss(
                    &mask,
                    HeadOutputs {
                        cls_logits: &cls_t,
                        reg: &native_t,
                    },
                    HeadOutputs {
                        cls_logits: &cls_s[b],
                        reg: &native_s,
                    },
                    c,
                    grid.regression_kind(),
                    d.alpha,
                    d.beta,
                )?;
                resp_sum += rl.value;
                let w = d.lambda3 * inv_n;
                for (g, r) in grad_cls[b].iter_mut().zip(&rl.grad_cls) {
                    *g += w * r;
                }
                let mut gr = rl.grad_reg;
                grid.native_grad_to_raw(&reg_s[b], &mut gr);
                for (g, r) in grad_reg[b].iter_mut().zip(&gr) {
                    *g += w * r;
                }
            }
        }
        if pooled_needed {
            feature_grads = Some(fgrads);
        }
        feat_sum *= inv_n;
        rel_sum *= inv_n;
        resp_sum *= inv_n;
        check_finite(feat_sum, "feature", step)?;
        check_finite(rel_sum, "relation", step)?;
        check_finite(resp_sum, "response", step)?;
    }

    let losses = LossBreakdown::combine(task, feat_sum, rel_sum, resp_sum, distill);
    check_finite(losses.total, "total", step)?;

    let grads = OutputGrads {
        cls: grid.unflatten::<f32>(&grad_cls, c),
        reg: grid.unflatten::<f32>(&grad_reg, 4),
        features: match feature_grads {
            Some(fg) => fg
                .into_iter()
                .zip(&out_s.features)
                .map(|(g, t)| Some(Tensor::from_vec(g.into_iter().map(|v| v as f32).collect(), t.shape)))
                .collect(),
            None => vec![None; grid.level_sizes.len()],
        },
    };
    student.backward(&cache, &grads);

    let grad_norm = Sgd::grad_norm(&student.named_params_mut());
    check_finite(grad_norm, "gradient", step)?;
    Ok(StepResult {
        log: StepLog {
            step,
            lr,
            losses,
            num_pos,
            grad_norm,
        },
        gi_counts,
    })
}

fn accumulate(dst: &mut [Vec<f64>], src: &[Vec<f64>], w: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        for (a, b) in d.iter_mut().zip(s) {
            *a += w * b;
        }
    }
}

/// Runs detection over `samples` in batches.
pub fn predict(det: &Detector<f32>, samples: &[Sample], batch_size: usize, cfg: &TrainConfig) -> Result<Vec<DetectionResult>> {
    let grid = det.grid();
    let c = det.config.num_classes;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (o, _) = det.forward(&to_tensor::<f32>(&refs), false)?;
        for (b, s) in chunk.iter().enumerate() {
            let cls = grid.flatten(&o.cls, b, c);
            let reg = grid.flatten(&o.reg, b, 4);
            out.push(DetectionResult {
                image_id: s.id,
                detections: grid.postprocess(
                    &cls,
                    &reg,
                    cfg.score_threshold,
                    cfg.nms_threshold,
                    crate::evaluation::MAX_DETECTIONS,
                ),
            });
        }
    }
    Ok(out)
}

/// Predicts and scores `samples`.
pub fn evaluate(det: &Detector<f32>, samples: &[Sample], cfg: &TrainConfig) -> Result<(Vec<DetectionResult>, EvalReport)> {
    let results = predict(det, samples, cfg.batch_size.max(16), cfg)?;
    let report = coco_map(&results, &ground_truth(samples), det.config.num_classes)?;
    Ok((results, report))
}

/// The shared training loop. Without a teacher (or with an inactive
/// distillation config) this is plain task-loss training.
pub fn train(
    mut student: Detector<f32>,
    teacher: Option<&Detector<f32>>,
    data: &Dataset,
    cfg: &TrainConfig,
    distill: Option<&DistillConfig>,
    progress: &mut dyn FnMut(&StepLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if let Some(d) = distill {
        d.validate()?;
    }
    if data.train.is_empty() && cfg.steps > 0 {
        return Err(GidError::contract("cannot train on an empty training split"));
    }
    if data.spec.num_classes != student.config.num_classes {
        return Err(GidError::contract(format!(
            "dataset has {} classes, detector {}",
            data.spec.num_classes, student.config.num_classes
        )));
    }
    let distilling = distill.is_some_and(|d| d.active());
    if distilling {
        let t = teacher.ok_or_else(|| GidError::contract("distillation needs a teacher"))?;
        t.config.check_head_compatible(&student.config)?;
    }
    let grid = student.grid();
    let ctx = StepContext {
        grid: &grid,
        cfg,
        teacher,
        distill,
        canonical: student.config.canonical_box_size(),
    };
    let mut adaptation = match (distilling, teacher) {
        (true, Some(t)) => Some(Adaptation::<f64>::identity(student.config.fpn_channels, t.config.fpn_channels)),
        _ => None,
    };
    let mut trace = distill.map(|d| GiTrace::new(d.k));
    let mut sgd = Sgd::<f32>::new();
    let mut sgd_adapt = Sgd::<f64>::new();
    let mut sampler = BatchSampler::new(cfg.seed, data.train.len());
    let mut history = Vec::with_capacity(cfg.steps);
    let mut evals = Vec::new();

    for step in 0..cfg.steps {
        let picks = sampler.next(cfg.batch_size);
        let batch: Vec<Sample> = picks
            .iter()
            .map(|&(i, flip)| {
                if cfg.hflip && flip {
                    data.train[i].flip_horizontal()
                } else {
                    data.train[i].clone()
                }
            })
            .collect();
        let lr = cfg.optim.lr_at(step, cfg.steps);
        student.zero_grad();
        if let Some(a) = adaptation.as_mut() {
            a.zero_grad();
        }
        let want_heatmap = distill.is_some_and(|d| d.heatmap_every > 0 && step % d.heatmap_every == 0);
        let res = train_step(&ctx, &mut student, &mut adaptation, &batch, step, lr, trace.as_mut(), want_heatmap)?;
        if let Some(tr) = trace.as_mut() {
            if distilling {
                tr.push(step, res.gi_counts.iter().map(|g| g.counts).collect());
            }
        }
        sgd.step(&mut student.named_params_mut(), &cfg.optim, lr);
        if let Some(a) = adaptation.as_mut() {
            sgd_adapt.step(&mut a.named_params_mut(), &cfg.optim, lr);
        }
        progress(&res.log);
        history.push(res.log);
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 && step + 1 < cfg.steps && !data.val.is_empty() {
            evals.push((step + 1, evaluate(&student, &data.val, cfg)?.1));
        }
    }

    let (final_results, final_eval) = if data.val.is_empty() {
        (Vec::new(), None)
    } else {
        let (r, e) = evaluate(&student, &data.val, cfg)?;
        (r, Some(e))
    };
    Ok(TrainOutcome {
        model: student,
        adaptation,
        history,
        trace,
        evals,
        final_eval,
        final_results,
    })
}
