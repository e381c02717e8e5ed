//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL line
//! each and exits non-zero if any failed.
//!
//! `GID_ACCEPTANCE_ONLY=1,4,7` restricts the run to the listed criteria.

mod common;

use std::path::{Path, PathBuf};
use std::time::Instant;

use num::{BigRational, Signed, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::eval_oracle::{perfect, random_case, reference_map, reference_per_threshold};
use gid_core::data::{generate, to_tensor, Dataset, DatasetSpec, Sample};
use gid_core::detector::{Detector, DetectorConfig, HeadVariant};
use gid_core::evaluation::{coco_map, EvalReport};
use gid_core::feature_distill::{
    assign_fpn_level, feature_loss, roi_align, Adaptation, FeatureMap, PooledFeature, RoiSampling, POOL_SIZE,
    SAMPLING_RATIO,
};
use gid_core::functional::sigmoid;
use gid_core::geometry::{iop, iou, nms, BoundingBox};
use gid_core::gism::{select_gis, GiSource, PredictionBatch};
use gid_core::nn::Parameterized;
use gid_core::relation_distill::relation_loss;
use gid_core::response_distill::{assign_mask, response_loss, DistillMask, HeadOutputs, RegressionKind};
use gid_core::trainer::{
    ablate, run_distill, run_train, train, AblationTable, DatasetRef, DistillConfig, GiTrace, GridKind, Knowledge,
    RunKind, TrainConfig, TrainOutcome, CHECKPOINT_FILE,
};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Final evaluation reports seen by any criterion, for the AP50 >= AP95 check.
#[derive(Default)]
struct Shared {
    reports: Vec<(String, EvalReport)>,
}

fn work_dir(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

// ---------------------------------------------------------------------------
// 1. geometry

fn quarter(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(0..=256) as f64 / 4.0
}

fn random_box(rng: &mut ChaCha8Rng) -> BoundingBox {
    let (a, b) = (quarter(rng), quarter(rng));
    let (c, d) = (quarter(rng), quarter(rng));
    let mut bx = BoundingBox::new(a.min(b), c.min(d), a.max(b), c.max(d));
    if rng.random_bool(0.05) {
        bx.x2 = bx.x1;
    }
    bx
}

fn near_box(rng: &mut ChaCha8Rng, a: &BoundingBox) -> BoundingBox {
    let j = |v: f64, rng: &mut ChaCha8Rng| (v + rng.random_range(-24..=24) as f64 / 4.0).clamp(0.0, 64.0);
    let (x1, x2) = (j(a.x1, rng), j(a.x2, rng));
    let (y1, y2) = (j(a.y1, rng), j(a.y2, rng));
    BoundingBox::new(x1.min(x2), y1.min(y2), x1.max(x2), y1.max(y2))
}

fn rat(v: f64) -> BigRational {
    BigRational::from_float(v).unwrap()
}

fn rat_area(b: &BoundingBox) -> BigRational {
    (rat(b.x2) - rat(b.x1)) * (rat(b.y2) - rat(b.y1))
}

fn rat_inter(a: &BoundingBox, b: &BoundingBox) -> BigRational {
    let w = rat(a.x2.min(b.x2)) - rat(a.x1.max(b.x1));
    let h = rat(a.y2.min(b.y2)) - rat(a.y1.max(b.y1));
    if w.is_positive() && h.is_positive() {
        w * h
    } else {
        BigRational::zero()
    }
}

fn rat_iou(a: &BoundingBox, b: &BoundingBox) -> BigRational {
    let inter = rat_inter(a, b);
    let union = rat_area(a) + rat_area(b) - &inter;
    if inter.is_zero() || !union.is_positive() {
        BigRational::zero()
    } else {
        inter / union
    }
}

fn rat_iop(gi: &BoundingBox, gt: &BoundingBox) -> BigRational {
    let area = rat_area(gi);
    if area.is_positive() {
        rat_inter(gi, gt) / area
    } else {
        BigRational::zero()
    }
}

/// Whether `x` is the f64 nearest to the exact value `r`.
fn correctly_rounded(x: f64, r: &BigRational) -> bool {
    let err = |v: f64| (rat(v) - r).abs();
    let e = err(x);
    e <= err(x.next_up()) && e <= err(x.next_down())
}

/// IoU from exact integer areas in 1/16 pixel units, so the one division is
/// the only rounding.
fn oracle_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let q = |v: f64| (v * 4.0) as i64;
    let area = |b: &BoundingBox| (q(b.x2) - q(b.x1)) * (q(b.y2) - q(b.y1));
    let w = q(a.x2).min(q(b.x2)) - q(a.x1).max(q(b.x1));
    let h = q(a.y2).min(q(b.y2)) - q(a.y1).max(q(b.y1));
    if w <= 0 || h <= 0 {
        return 0.0;
    }
    let inter = w * h;
    let union = area(a) + area(b) - inter;
    if union <= 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn oracle_nms(scores: &[f64], boxes: &[BoundingBox], t: f64) -> Vec<usize> {
    let n = boxes.len();
    let m: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| oracle_iou(&boxes[i], &boxes[j])).collect()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        if !kept.iter().any(|&j| m[j][i] > t) {
            kept.push(i);
        }
    }
    kept
}

fn criterion_1(_: &mut Shared) -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut overlapping = 0;
    for case in 0..1000 {
        let a = random_box(&mut rng);
        let b = if case % 2 == 0 { near_box(&mut rng, &a) } else { random_box(&mut rng) };
        let exact = rat_iou(&a, &b);
        overlapping += usize::from(exact.is_positive());
        ensure(correctly_rounded(iou(&a, &b), &exact), || format!("IoU {a:?} {b:?}"))?;
        ensure(correctly_rounded(iop(&a, &b), &rat_iop(&a, &b)), || format!("IoP {a:?} {b:?}"))?;
        ensure(correctly_rounded(iop(&b, &a), &rat_iop(&b, &a)), || format!("IoP {b:?} {a:?}"))?;
    }
    for case in 0..1000 {
        let n = rng.random_range(0..=200);
        let mut boxes: Vec<BoundingBox> = Vec::with_capacity(n);
        for _ in 0..n {
            let b = match boxes.last() {
                Some(prev) if rng.random_bool(0.5) => near_box(&mut rng, prev),
                _ => random_box(&mut rng),
            };
            boxes.push(b);
        }
        // coarse scores so ties occur
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..20) as f64 / 20.0).collect();
        let t = [0.3, 0.5, 0.7, rng.random_range(0.0..1.0)][case % 4];
        let got = nms(&scores, &boxes, t);
        ensure(got == oracle_nms(&scores, &boxes, t), || format!("NMS set {case} (n = {n}, t = {t})"))?;
    }
    let secs = started.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "1000 IoU/IoP pairs correctly rounded ({overlapping} overlapping), 1000 NMS sets match, {secs:.1}s"
    ))
}

// ---------------------------------------------------------------------------
// 2. GISM

fn random_batch_pair(rng: &mut ChaCha8Rng) -> (PredictionBatch, PredictionBatch) {
    let r = rng.random_range(0..60);
    let c = rng.random_range(1..5);
    let score = |rng: &mut ChaCha8Rng| {
        if rng.random_bool(0.3) {
            rng.random_range(0..=10) as f64 / 10.0
        } else {
            rng.random_range(0.0..=1.0)
        }
    };
    let ts: Vec<f64> = (0..r * c).map(|_| score(rng)).collect();
    let ss: Vec<f64> = (0..r * c).map(|_| score(rng)).collect();
    let tb: Vec<BoundingBox> = (0..r).map(|_| random_box(rng)).collect();
    let sb: Vec<BoundingBox> = tb.iter().map(|b| near_box(rng, b)).collect();
    (
        PredictionBatch::new(ts, tb, c).unwrap(),
        PredictionBatch::new(ss, sb, c).unwrap(),
    )
}

type OracleGi = (usize, f64, BoundingBox, GiSource);

fn oracle_select(t: &PredictionBatch, s: &PredictionBatch, k: usize) -> Vec<OracleGi> {
    let c = t.num_classes;
    let mut scores = Vec::new();
    let mut boxes = Vec::new();
    let mut sources = Vec::new();
    for r in 0..t.boxes.len() {
        let (tr, sr) = (&t.scores[r * c..(r + 1) * c], &s.scores[r * c..(r + 1) * c]);
        let mut gap: f64 = 0.0;
        let (mut max_t, mut max_s) = (f64::MIN, f64::MIN);
        for j in 0..c {
            gap = gap.max((tr[j] - sr[j]).abs());
            max_t = max_t.max(tr[j]);
            max_s = max_s.max(sr[j]);
        }
        scores.push(gap);
        if max_t > max_s {
            boxes.push(t.boxes[r]);
            sources.push(GiSource::Teacher);
        } else {
            boxes.push(s.boxes[r]);
            sources.push(GiSource::Student);
        }
    }
    oracle_nms(&scores, &boxes, 0.3)
        .into_iter()
        .take(k)
        .map(|r| (r, scores[r], boxes[r], sources[r]))
        .collect()
}

fn criterion_2(_: &mut Shared) -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut selected = 0;
    for case in 0..500 {
        let (t, s) = random_batch_pair(&mut rng);
        let k = [0, 1, 3, 10, 40][case % 5];
        let got: Vec<OracleGi> = select_gis(&t, &s, 0.3, k)
            .unwrap()
            .into_iter()
            .map(|g| (g.location, g.score, g.bbox, g.source))
            .collect();
        ensure(got == oracle_select(&t, &s, k), || format!("batch {case} (K = {k})"))?;
        selected += got.len();
    }
    // ties on the top class score go to the student; a strict lead goes to the teacher
    let tb = BoundingBox::new(0.0, 0.0, 10.0, 10.0);
    let sb = BoundingBox::new(30.0, 30.0, 40.0, 40.0);
    let sb2 = BoundingBox::new(50.0, 0.0, 60.0, 10.0);
    let t = PredictionBatch::new(vec![0.7, 0.1, 0.2, 0.7], vec![tb, tb], 2).unwrap();
    let s = PredictionBatch::new(vec![0.3, 0.7, 0.2, 0.6999], vec![sb, sb2], 2).unwrap();
    let gis = select_gis(&t, &s, 0.3, 10).unwrap();
    let by_row = |r: usize| gis.iter().find(|g| g.location == r).unwrap();
    ensure(by_row(0).source == GiSource::Student && by_row(0).bbox == sb, || "tie did not pick the student".into())?;
    ensure(by_row(1).source == GiSource::Teacher && by_row(1).bbox == tb, || "strict lead did not pick the teacher".into())?;
    let secs = started.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!("500 batches match ({selected} GIs), tie rule holds, {secs:.1}s"))
}

// ---------------------------------------------------------------------------
// 3. ROIAlign

fn tent(u: f64) -> f64 {
    (1.0 - u.abs()).max(0.0)
}

/// Dense reference: every sample is a tent-weighted sum over the whole map.
fn dense_roi_align(data: &[f64], c: usize, h: usize, w: usize, stride: f64, b: &BoundingBox) -> Vec<f64> {
    let (n, ratio) = (POOL_SIZE, SAMPLING_RATIO);
    let (x0, y0) = (b.x1 / stride - 0.5, b.y1 / stride - 0.5);
    let (bw, bh) = ((b.x2 - b.x1) / stride / n as f64, (b.y2 - b.y1) / stride / n as f64);
    let mut out = vec![0.0; c * n * n];
    for ch in 0..c {
        for oy in 0..n {
            for ox in 0..n {
                let mut acc = 0.0;
                for sy in 0..ratio {
                    for sx in 0..ratio {
                        let y = y0 + oy as f64 * bh + (sy as f64 + 0.5) * bh / ratio as f64;
                        let x = x0 + ox as f64 * bw + (sx as f64 + 0.5) * bw / ratio as f64;
                        for iy in 0..h {
                            for ix in 0..w {
                                acc += tent(y - iy as f64) * tent(x - ix as f64) * data[(ch * h + iy) * w + ix];
                            }
                        }
                    }
                }
                out[(ch * n + oy) * n + ox] = acc / (ratio * ratio) as f64;
            }
        }
    }
    out
}

fn criterion_3(_: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut outside = 0;
    for case in 0..200 {
        let c = rng.random_range(1..=4);
        let (h, w) = (rng.random_range(2..=12), rng.random_range(2..=12));
        let stride = [4.0, 8.0, 16.0][rng.random_range(0..3)];
        let data: Vec<f64> = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (iw, ih) = (w as f64 * stride, h as f64 * stride);
        let x1 = rng.random_range(-0.5 * iw..iw);
        let y1 = rng.random_range(-0.5 * ih..ih);
        let b = BoundingBox::new(x1, y1, x1 + rng.random_range(0.5..iw), y1 + rng.random_range(0.5..ih));
        if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > iw || b.y2 > ih {
            outside += 1;
        }
        let got = roi_align(&FeatureMap::new(&data, c, h, w).unwrap(), stride, &b, POOL_SIZE, SAMPLING_RATIO);
        let want = dense_roi_align(&data, c, h, w, stride, &b);
        ensure(got.data.len() == want.len(), || format!("case {case}: wrong output size"))?;
        for (g, r) in got.data.iter().zip(&want) {
            worst = worst.max((g - r).abs());
        }
        ensure(worst <= 1e-5, || format!("case {case}: deviation {worst:e}"))?;
    }
    ensure(outside >= 50, || format!("only {outside} boxes crossed the border"))?;
    Ok(format!("200 cases ({outside} partially outside), max deviation {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// 4. gradient checks

const FD_EPS: f64 = 1e-5;

fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-9 {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

fn central<F: FnMut(f64) -> f64>(x: f64, mut f: F) -> f64 {
    (f(x + FD_EPS) - f(x - FD_EPS)) / (2.0 * FD_EPS)
}

fn random_pooled(rng: &mut ChaCha8Rng, k: usize, channels: usize) -> Vec<PooledFeature> {
    (0..k)
        .map(|gi| PooledFeature {
            data: (0..channels * PooledFeature::bins()).map(|_| rng.random_range(-1.0..1.0)).collect(),
            channels,
            gi,
        })
        .collect()
}

/// Feature loss through ROIAlign and the adaptation conv, checked against the
/// student map and the adaptation weights.
fn feature_grad_check(rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let (cs, ct, size, stride) = (3, 4, 6, 8.0);
    let boxes = [
        BoundingBox::new(3.0, 5.0, 30.0, 41.0),
        BoundingBox::new(-6.0, 10.0, 20.0, 52.0),
        BoundingBox::new(17.5, 0.5, 47.0, 22.0),
    ];
    let teacher = random_pooled(rng, boxes.len(), ct);
    let map: Vec<f64> = (0..cs * size * size).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut adapt = Adaptation::<f64>::identity(cs, ct);
    adapt.conv.weight.value.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
    adapt.conv.bias.value.iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
    let samplings: Vec<RoiSampling> = boxes
        .iter()
        .map(|b| RoiSampling::new(b, stride, size, size, POOL_SIZE, SAMPLING_RATIO))
        .collect();
    let loss = |map: &[f64], adapt: &Adaptation<f64>| {
        let fm = FeatureMap::new(map, cs, size, size).unwrap();
        let pooled: Vec<PooledFeature> = samplings.iter().enumerate().map(|(i, s)| s.forward(&fm, i)).collect();
        feature_loss(&teacher, &adapt.forward(&pooled).unwrap()).unwrap().value
    };

    let fm = FeatureMap::new(&map, cs, size, size).unwrap();
    let pooled: Vec<PooledFeature> = samplings.iter().enumerate().map(|(i, s)| s.forward(&fm, i)).collect();
    adapt.conv.weight.zero_grad();
    adapt.conv.bias.zero_grad();
    let (adapted, cache) = adapt.forward_cached(&pooled, true).unwrap();
    let fl = feature_loss(&teacher, &adapted).unwrap();
    let g_pooled = adapt.backward(cache.as_ref().unwrap(), &fl.grads);
    let mut g_map = vec![0.0; map.len()];
    for (s, g) in samplings.iter().zip(&g_pooled) {
        s.backward(g, cs, &mut g_map);
    }

    let mut worst: f64 = 0.0;
    for i in 0..map.len() {
        let n = central(map[i], |v| {
            let mut m = map.clone();
            m[i] = v;
            loss(&m, &adapt)
        });
        worst = worst.max(rel_err(g_map[i], n));
    }
    let grads = adapt.conv.weight.grad.clone();
    for i in (0..grads.len()).step_by(3) {
        let n = central(adapt.conv.weight.value[i], |v| {
            let mut a = adapt.clone();
            a.conv.weight.value[i] = v;
            loss(&map, &a)
        });
        worst = worst.max(rel_err(grads[i], n));
    }
    for i in 0..ct {
        let n = central(adapt.conv.bias.value[i], |v| {
            let mut a = adapt.clone();
            a.conv.bias.value[i] = v;
            loss(&map, &a)
        });
        worst = worst.max(rel_err(adapt.conv.bias.grad[i], n));
    }
    Ok(worst)
}

fn small_feats(rng: &mut ChaCha8Rng, k: usize, dim: usize) -> Vec<PooledFeature> {
    (0..k)
        .map(|gi| PooledFeature {
            data: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            channels: dim,
            gi,
        })
        .collect()
}

fn relation_grad_check(rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let beta = 1.0;
    let (k, dim) = (5, 12);
    let teacher = small_feats(rng, k, dim);
    // keep every normalised-distance gap away from the smooth-L1 kink
    let student = loop {
        let s = small_feats(rng, k, dim);
        let norm = |f: &[PooledFeature]| {
            let d: Vec<f64> = (0..k)
                .flat_map(|i| (0..k).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| f[i].data.iter().zip(&f[j].data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
                .collect();
            let phi = d.iter().sum::<f64>() / d.len() as f64;
            d.into_iter().map(|x| x / phi).collect::<Vec<_>>()
        };
        let gaps = norm(&teacher).iter().zip(norm(&s)).map(|(a, b)| ((a - b).abs() - beta).abs()).fold(f64::MAX, f64::min);
        if gaps > 1e-2 {
            break s;
        }
    };
    let rl = relation_loss(&teacher, &student, beta).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..k {
        for j in 0..dim {
            let n = central(student[i].data[j], |v| {
                let mut s = student.clone();
                s[i].data[j] = v;
                relation_loss(&teacher, &s, beta).unwrap().value
            });
            worst = worst.max(rel_err(rl.grads[i][j], n));
        }
    }
    Ok(worst)
}

fn response_grad_check(rng: &mut ChaCha8Rng, kind: RegressionKind) -> Result<f64, String> {
    let (r, c) = (7, 3);
    let mut mask: Vec<bool> = (0..r).map(|_| rng.random_bool(0.6)).collect();
    mask[0] = true;
    let mask = DistillMask::from_bools(mask);
    let logits = |rng: &mut ChaCha8Rng| (0..r * c).map(|_| rng.random_range(-4.0..4.0)).collect::<Vec<f64>>();
    let (t_cls, s_cls) = (logits(rng), logits(rng));
    let t_reg: Vec<f64>;
    let s_reg: Vec<f64>;
    match kind {
        RegressionKind::Deltas { beta } => {
            t_reg = (0..r * 4).map(|_| rng.random_range(-2.0..2.0)).collect();
            s_reg = t_reg
                .iter()
                .map(|t| loop {
                    let s = rng.random_range(-2.0..2.0);
                    if ((s - t).abs() - beta).abs() > 1e-2 {
                        break s;
                    }
                })
                .collect();
        }
        RegressionKind::Distances => {
            t_reg = (0..r * 4).map(|_| rng.random_range(0.5..12.0)).collect();
            s_reg = (0..r * 4).map(|_| rng.random_range(0.5..12.0)).collect();
        }
    }
    let value = |s_cls: &[f64], s_reg: &[f64]| {
        response_loss(
            &mask,
            HeadOutputs {
                cls_logits: &t_cls,
                reg: &t_reg,
            },
            HeadOutputs {
                cls_logits: s_cls,
                reg: s_reg,
            },
            c,
            kind,
            0.1,
            1.0,
        )
        .unwrap()
    };
    let base = value(&s_cls, &s_reg);
    let mut worst: f64 = 0.0;
    for i in 0..s_cls.len() {
        let n = central(s_cls[i], |v| {
            let mut x = s_cls.clone();
            x[i] = v;
            value(&x, &s_reg).value
        });
        worst = worst.max(rel_err(base.grad_cls[i], n));
    }
    for i in 0..s_reg.len() {
        let n = central(s_reg[i], |v| {
            let mut x = s_reg.clone();
            x[i] = v;
            value(&s_cls, &x).value
        });
        worst = worst.max(rel_err(base.grad_reg[i], n));
    }
    Ok(worst)
}

fn criterion_4(_: &mut Shared) -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = [0.0f64; 3];
    for _ in 0..3 {
        worst[0] = worst[0].max(feature_grad_check(&mut rng)?);
        worst[1] = worst[1].max(relation_grad_check(&mut rng)?);
        worst[2] = worst[2].max(response_grad_check(&mut rng, RegressionKind::Deltas { beta: 1.0 })?);
        worst[2] = worst[2].max(response_grad_check(&mut rng, RegressionKind::Distances)?);
    }
    for (name, w) in ["feature", "relation", "response"].iter().zip(worst) {
        ensure(w < 1e-3, || format!("{name} relative error {w:e}"))?;
    }
    let secs = started.elapsed().as_secs_f64();
    ensure(secs < 120.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "max relative error feature {:.1e}, relation {:.1e}, response {:.1e}, {secs:.1}s",
        worst[0], worst[1], worst[2]
    ))
}

// ---------------------------------------------------------------------------
// 5. identity

fn tiny_data() -> Dataset {
    generate(&DatasetSpec {
        seed: 3,
        train_count: 10,
        val_count: 4,
        ..DatasetSpec::default()
    })
    .unwrap()
}

fn tiny_cfg(steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 2,
        seed,
        ..TrainConfig::default()
    }
}

fn criterion_5(_: &mut Shared) -> Outcome {
    let data = tiny_data();
    let mut summary = Vec::new();
    for variant in [HeadVariant::AnchorBased, HeadVariant::AnchorFree] {
        let det = Detector::<f32>::new(DetectorConfig::student(variant, 4), 11).unwrap();
        let grid = det.grid();
        let c = grid.num_classes;
        let refs: Vec<&Sample> = data.train.iter().take(3).collect();
        let (out, _) = det.forward(&to_tensor::<f32>(&refs), false).unwrap();
        let (t_out, _) = det.clone().forward(&to_tensor::<f32>(&refs), false).unwrap();
        let d = det.config.fpn_channels;
        let adapt = Adaptation::<f64>::identity(d, d);
        let (mut feat, mut rel, mut cls): (f64, f64, f64) = (0.0, 0.0, 0.0);
        for b in 0..refs.len() {
            let (cls_s, reg_s) = (grid.flatten(&out.cls, b, c), grid.flatten(&out.reg, b, 4));
            let (cls_t, reg_t) = (grid.flatten(&t_out.cls, b, c), grid.flatten(&t_out.reg, b, 4));
            let probs = |l: &[f64]| l.iter().map(|&v| sigmoid(v)).collect::<Vec<_>>();
            let tb = PredictionBatch::new(probs(&cls_t), grid.decode(&reg_t), c).unwrap();
            let sb = PredictionBatch::new(probs(&cls_s), grid.decode(&reg_s), c).unwrap();
            let gis = select_gis(&tb, &sb, 0.3, 10).unwrap();
            ensure(gis.len() == 10, || format!("only {} GIs selected", gis.len()))?;
            let mut tp = Vec::new();
            let mut sp = Vec::new();
            for (i, gi) in gis.iter().enumerate() {
                let l = assign_fpn_level(&gi.bbox, grid.level_sizes.len(), det.config.canonical_box_size());
                let size = grid.level_sizes[l];
                let plane = d * size * size;
                let level = |o: &Vec<gid_core::nn::Tensor<f32>>| -> Vec<f64> {
                    o[l].data[b * plane..(b + 1) * plane].iter().map(|&v| v as f64).collect()
                };
                let (tm, sm) = (level(&t_out.features), level(&out.features));
                let samp = RoiSampling::new(&gi.bbox, grid.level_strides[l], size, size, POOL_SIZE, SAMPLING_RATIO);
                tp.push(samp.forward(&FeatureMap::new(&tm, d, size, size).unwrap(), i));
                sp.push(samp.forward(&FeatureMap::new(&sm, d, size, size).unwrap(), i));
            }
            let adapted = adapt.forward(&sp).unwrap();
            feat = feat.max(feature_loss(&tp, &adapted).unwrap().value);
            rel = rel.max(relation_loss(&tp, &adapted, 1.0).unwrap().value);
            let mask = assign_mask(&gis, grid.head_geometry(), 0.5);
            ensure(mask.count > 0, || "empty response mask".into())?;
            let (nt, ns) = (grid.native_regression(&reg_t), grid.native_regression(&reg_s));
            let resp = response_loss(
                &mask,
                HeadOutputs {
                    cls_logits: &cls_t,
                    reg: &nt,
                },
                HeadOutputs {
                    cls_logits: &cls_s,
                    reg: &ns,
                },
                c,
                grid.regression_kind(),
                0.1,
                1.0,
            )
            .unwrap();
            ensure(resp.reg == 0.0, || format!("{variant:?}: response regression {}", resp.reg))?;
            cls = cls.max(resp.cls.abs());
        }
        ensure(feat < 1e-12 && rel < 1e-12 && cls < 1e-12, || {
            format!("{variant:?}: feature {feat:e}, relation {rel:e}, response cls {cls:e}")
        })?;

        // the same through a training step
        let first = train(det.clone(), Some(&det), &data, &tiny_cfg(1, 2), Some(&DistillConfig::default()), &mut |_| {})
            .unwrap()
            .history[0]
            .losses;
        ensure(
            first.feature.abs() < 1e-12 && first.relation.abs() < 1e-12 && first.response.abs() < 1e-12,
            || format!("{variant:?}: first training step {first:?}"),
        )?;
        summary.push(format!("{}: max {:.0e}", variant.name(), feat.max(rel).max(cls)));
    }
    Ok(format!("{}; regression term exactly 0", summary.join(", ")))
}

// ---------------------------------------------------------------------------
// 6. relation invariances

fn householder(rng: &mut ChaCha8Rng, dim: usize) -> impl Fn(&[f64]) -> Vec<f64> {
    let vs: Vec<Vec<f64>> = (0..3)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    move |x: &[f64]| {
        let mut y = x.to_vec();
        for v in &vs {
            let dot: f64 = y.iter().zip(v).map(|(a, b)| a * b).sum();
            y.iter_mut().zip(v).for_each(|(a, b)| *a -= 2.0 * dot * b);
        }
        y
    }
}

fn criterion_6(_: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (k, dim) = (rng.random_range(2..=10), 16);
        let t = small_feats(&mut rng, k, dim);
        let s = small_feats(&mut rng, k, dim);
        let base = relation_loss(&t, &s, 1.0).unwrap().value;
        let scale = rng.random_range(0.01..100.0);
        let shift: Vec<f64> = (0..dim).map(|_| rng.random_range(-10.0..10.0)).collect();
        let q = householder(&mut rng, dim);
        let map = |f: &[PooledFeature], g: &dyn Fn(&[f64]) -> Vec<f64>| -> Vec<PooledFeature> {
            f.iter().map(|p| PooledFeature { data: g(&p.data), ..p.clone() }).collect()
        };
        let transforms: [&dyn Fn(&[f64]) -> Vec<f64>; 3] = [
            &|x| x.iter().map(|v| v * scale).collect(),
            &|x| x.iter().zip(&shift).map(|(v, d)| v + d).collect(),
            &q,
        ];
        for g in transforms {
            worst = worst.max((relation_loss(&t, &map(&s, g), 1.0).unwrap().value - base).abs());
            worst = worst.max((relation_loss(&map(&t, g), &s, 1.0).unwrap().value - base).abs());
        }
    }
    ensure(worst < 1e-6, || format!("loss moved by {worst:e}"))?;
    Ok(format!("scaling, translation, orthogonal map on either side: max change {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// 7. reduction identity

fn student(variant: HeadVariant) -> Detector<f32> {
    Detector::new(DetectorConfig::student(variant, 4), 5).unwrap()
}

fn teacher(variant: HeadVariant) -> Detector<f32> {
    Detector::new(DetectorConfig::teacher(variant, 4), 9).unwrap()
}

fn weights(det: &Detector<f32>) -> Vec<(String, Vec<f32>)> {
    det.named_params().into_iter().map(|(n, p)| (n, p.value.clone())).collect()
}

fn criterion_7(shared: &mut Shared) -> Outcome {
    let data = tiny_data();
    let steps = 12;
    for variant in [HeadVariant::AnchorBased, HeadVariant::AnchorFree] {
        let t = teacher(variant);
        let run = |d: Option<&DistillConfig>| -> TrainOutcome {
            let tt = d.map(|_| &t);
            train(student(variant), tt, &data, &tiny_cfg(steps, 7), d, &mut |_| {}).unwrap()
        };
        let base = run(None);
        for (name, d) in [
            (
                "K = 0",
                DistillConfig {
                    k: 0,
                    ..DistillConfig::default()
                },
            ),
            (
                "toggles off",
                DistillConfig {
                    knowledge: Knowledge::NONE,
                    ..DistillConfig::default()
                },
            ),
        ] {
            let out = run(Some(&d));
            ensure(out.history == base.history, || format!("{variant:?} {name}: step logs differ"))?;
            ensure(weights(&out.model) == weights(&base.model), || format!("{variant:?} {name}: weights differ"))?;
            ensure(out.final_eval == base.final_eval, || format!("{variant:?} {name}: final metrics differ"))?;
        }
        if let Some(e) = base.final_eval {
            shared.reports.push((format!("c7 {}", variant.name()), e));
        }
    }
    Ok(format!("{steps}-step trajectories bit-identical for both heads"))
}

// ---------------------------------------------------------------------------
// 8. desk-scale distillation gain

pub const C8_SEEDS: [u64; 3] = [0, 1, 2];
pub const C8_TEACHER_STEPS: usize = 1500;
pub const C8_STUDENT_STEPS: usize = 1500;
pub const C8_MIN_GAIN: f64 = 1.0;

fn criterion_8(shared: &mut Shared) -> Outcome {
    let dir = work_dir("c8");
    let data = generate(&DatasetSpec::default()).unwrap();
    let data_path = dir.join("data");
    data.save(&data_path).unwrap();
    let data_ref = DatasetRef::new(&data_path, &data);
    let mut lines = Vec::new();
    let mut failed = Vec::new();
    for variant in [HeadVariant::AnchorBased, HeadVariant::AnchorFree] {
        let vdir = dir.join(variant.name());
        let tcfg = TrainConfig {
            steps: C8_TEACHER_STEPS,
            ..TrainConfig::default()
        };
        let t = run_train(
            RunKind::Teacher,
            &DetectorConfig::teacher(variant, data.spec.num_classes),
            &tcfg,
            &data,
            data_ref.clone(),
            &vdir.join("teacher"),
            &mut |_| {},
        )
        .map_err(|e| format!("{variant:?} teacher: {e}"))?;
        let teacher_map = t.manifest.final_map().unwrap_or(0.0);
        let mut gains = Vec::new();
        for seed in C8_SEEDS {
            let cfg = TrainConfig {
                steps: C8_STUDENT_STEPS,
                seed,
                ..TrainConfig::default()
            };
            let sdet = DetectorConfig::student(variant, data.spec.num_classes);
            let base = run_train(
                RunKind::Baseline,
                &sdet,
                &cfg,
                &data,
                data_ref.clone(),
                &vdir.join(format!("baseline_{seed}")),
                &mut |_| {},
            )
            .map_err(|e| format!("{variant:?} baseline seed {seed}: {e}"))?;
            let dist = run_distill(
                &vdir.join("teacher").join(CHECKPOINT_FILE),
                &sdet,
                &cfg,
                &DistillConfig::default(),
                &data,
                data_ref.clone(),
                &vdir.join(format!("distill_{seed}")),
                &mut |_| {},
            );
            let b = base.manifest.final_map().unwrap_or(0.0);
            if let Some(e) = base.manifest.final_eval.clone() {
                shared.reports.push((format!("c8 {} baseline {seed}", variant.name()), e));
            }
            // a diverged run scores zero rather than aborting the other seeds
            let (d, note) = match &dist {
                Ok(o) => {
                    if let Some(e) = o.manifest.final_eval.clone() {
                        shared.reports.push((format!("c8 {} distill {seed}", variant.name()), e));
                    }
                    (o.manifest.final_map().unwrap_or(0.0), String::new())
                }
                Err(e) => (0.0, format!(" ({e})")),
            };
            println!(
                "    {} seed {seed}: baseline {:.2} distilled {:.2}{note}",
                variant.name(),
                100.0 * b,
                100.0 * d
            );
            gains.push(100.0 * (d - b));
        }
        let mean = gains.iter().sum::<f64>() / gains.len() as f64;
        lines.push(format!(
            "{} teacher {:.2}, mean gain {mean:+.2}",
            variant.name(),
            100.0 * teacher_map
        ));
        if mean < C8_MIN_GAIN {
            failed.push(variant.name());
        }
    }
    let msg = format!("{}; artifacts in {}", lines.join("; "), dir.display());
    if failed.is_empty() {
        Ok(msg)
    } else {
        Err(format!("gain below {C8_MIN_GAIN} mAP for {}: {msg}", failed.join(", ")))
    }
}

// ---------------------------------------------------------------------------
// 9. ablation harness

fn criterion_9(_: &mut Shared) -> Outcome {
    let dir = work_dir("c9");
    let data = tiny_data();
    let data_path = dir.join("data");
    data.save(&data_path).unwrap();
    let data_ref = DatasetRef::new(&data_path, &data);
    let variant = HeadVariant::AnchorBased;
    let cfg = tiny_cfg(4, 9);
    run_train(
        RunKind::Teacher,
        &DetectorConfig::teacher(variant, 4),
        &cfg,
        &data,
        data_ref.clone(),
        &dir.join("teacher"),
        &mut |_| {},
    )
    .map_err(|e| e.to_string())?;
    let expected: [(GridKind, Vec<&str>); 3] = [
        (
            GridKind::Knowledge,
            vec!["none", "feature", "relation", "response", "feature+response", "all"],
        ),
        (
            GridKind::GiTypes,
            vec![
                "pos",
                "semipos",
                "neg",
                "pos+semipos",
                "pos+neg",
                "semipos+neg",
                "pos+semipos+neg",
                "unfiltered",
            ],
        ),
        (GridKind::TopK, vec!["k=0", "k=5", "k=10", "k=40"]),
    ];
    let mut notes = Vec::new();
    for (kind, labels) in expected {
        let table: AblationTable = ablate(
            kind,
            &dir.join("teacher").join(CHECKPOINT_FILE),
            &DetectorConfig::student(variant, 4),
            &cfg,
            &DistillConfig::default(),
            &data,
            data_ref.clone(),
            &dir.join(kind.name()),
            &mut |_, _| {},
        )
        .map_err(|e| format!("{}: {e}", kind.name()))?;
        let got: Vec<&str> = table.rows.iter().map(|r| r.label.as_str()).collect();
        ensure(got == labels, || format!("{} rows {got:?}", kind.name()))?;
        ensure(table.all_completed(), || format!("{} has failed cells", kind.name()))?;
        ensure(AblationTable::load(&dir.join(kind.name())).ok().as_ref() == Some(&table), || {
            format!("{} table did not round-trip", kind.name())
        })?;
        for r in &table.rows {
            if r.label == "k=0" || r.label == "none" {
                ensure(r.matches_baseline == Some(true) && r.map == Some(table.baseline_map), || {
                    format!("{} cell {} differs from the baseline", kind.name(), r.label)
                })?;
            }
        }
        if kind == GridKind::Knowledge {
            let map = |l: &str| table.rows.iter().find(|r| r.label == l).and_then(|r| r.map).unwrap_or(0.0);
            let best_single = ["feature", "relation", "response"].map(map).into_iter().fold(0.0, f64::max);
            notes.push(format!(
                "all {:.2} vs best single {:.2} (reported, not gated)",
                100.0 * map("all"),
                100.0 * best_single
            ));
        }
        notes.push(format!("{} {} cells", kind.name(), table.rows.len()));
    }
    Ok(notes.join(", "))
}

// ---------------------------------------------------------------------------
// 10. evaluator

fn criterion_10(shared: &mut Shared) -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let (results, gts) = random_case(seed, 4);
        let report = coco_map(&results, &gts, 4).map_err(|e| e.to_string())?;
        worst = worst.max((report.map - reference_map(&results, &gts, 4)).abs());
        for (a, b) in report.per_threshold.iter().zip(reference_per_threshold(&results, &gts, 4)) {
            worst = worst.max((a - b).abs());
        }
        let p = coco_map(&perfect(&gts), &gts, 4).map_err(|e| e.to_string())?;
        ensure(p.map == 1.0, || format!("perfect detector scored {}", p.map))?;
        shared.reports.push((format!("random case {seed}"), report));
    }
    ensure(worst <= 1e-6, || format!("deviation from the reference {worst:e}"))?;
    for (name, r) in &shared.reports {
        let last = *r.per_threshold.last().unwrap();
        ensure(r.ap50 >= last, || format!("{name}: AP50 {} < AP95 {last}", r.ap50))?;
    }
    Ok(format!(
        "perfect = 1.0, max deviation {worst:.1e} over 20 ten-image cases, AP50 >= AP95 on {} reports",
        shared.reports.len()
    ))
}

// ---------------------------------------------------------------------------
// 11. GI trace

fn criterion_11(_: &mut Shared) -> Outcome {
    let dir = work_dir("c11");
    let data = tiny_data();
    let data_path = dir.join("data");
    data.save(&data_path).unwrap();
    let data_ref = DatasetRef::new(&data_path, &data);
    let mut logged = 0;
    for variant in [HeadVariant::AnchorBased, HeadVariant::AnchorFree] {
        let tdir = dir.join(format!("teacher_{}", variant.name()));
        run_train(RunKind::Teacher, &DetectorConfig::teacher(variant, 4), &tiny_cfg(3, 1), &data, data_ref.clone(), &tdir, &mut |_| {})
            .map_err(|e| e.to_string())?;
        for k in [1, 3, 10] {
            let out = dir.join(format!("{}_{k}", variant.name()));
            let d = DistillConfig {
                k,
                ..DistillConfig::default()
            };
            run_distill(
                &tdir.join(CHECKPOINT_FILE),
                &DetectorConfig::student(variant, 4),
                &tiny_cfg(10, 2),
                &d,
                &data,
                data_ref.clone(),
                &out,
                &mut |_| {},
            )
            .map_err(|e| e.to_string())?;
            let trace = GiTrace::load(&out).map_err(|e| e.to_string())?;
            ensure(trace.steps.len() == 10 && trace.k == k, || format!("{out:?}: {} steps", trace.steps.len()))?;
            for s in &trace.steps {
                ensure(s.per_image.len() == 2, || format!("step {}: {} images", s.step, s.per_image.len()))?;
                for counts in &s.per_image {
                    let n: usize = counts.iter().sum();
                    ensure(n <= k, || format!("step {}: {n} GIs with K = {k}", s.step))?;
                }
            }
            ensure(trace.steps[0].smoothed == trace.steps[0].mean, || "first smoothed value".into())?;
            for w in trace.steps.windows(2) {
                for t in 0..4 {
                    let want = 0.9 * w[0].smoothed[t] + 0.1 * w[1].mean[t];
                    ensure(w[1].smoothed[t] == want, || format!("step {}: recurrence broken", w[1].step))?;
                }
            }
            logged += trace.steps.len();
        }
    }
    Ok(format!("{logged} logged steps: counts <= K, smoothing recurrence exact"))
}

// ---------------------------------------------------------------------------

type Criterion = fn(&mut Shared) -> Outcome;

fn main() {
    let criteria: [(usize, &str, Criterion); 11] = [
        (1, "geometry oracle equivalence", criterion_1),
        (2, "GISM literal-formula equivalence", criterion_2),
        (3, "ROIAlign oracle", criterion_3),
        (4, "gradient checks", criterion_4),
        (5, "identity zero-loss", criterion_5),
        (6, "relation-loss invariances", criterion_6),
        (7, "reduction identity", criterion_7),
        (8, "desk-scale distillation gain", criterion_8),
        (9, "ablation harness structure", criterion_9),
        (10, "mAP evaluator", criterion_10),
        (11, "GI trace", criterion_11),
    ];
    let only: Option<Vec<usize>> = std::env::var("GID_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|p| p.trim().parse().ok()).collect());
    let mut shared = Shared::default();
    let mut failures = 0;
    for (id, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let started = Instant::now();
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| f(&mut shared)))
            .unwrap_or_else(|_| Err("panicked".into()));
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(msg) => println!("criterion {id:>2} PASS  {name} [{secs:.1}s]: {msg}"),
            Err(msg) => {
                failures += 1;
                println!("criterion {id:>2} FAIL  {name} [{secs:.1}s]: {msg}");
            }
        }
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
