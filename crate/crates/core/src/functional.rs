//! Scalar loss primitives shared by the task and distillation losses.

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `ln(sigmoid(x))`
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// Huber-style smooth L1: quadratic below `beta`, linear above.
#[inline]
pub fn smooth_l1(x: f64, beta: f64) -> f64 {
    let a = x.abs();
    if beta <= 0.0 {
        a
    } else if a < beta {
        0.5 * a * a / beta
    } else {
        a - 0.5 * beta
    }
}

#[inline]
pub fn smooth_l1_grad(x: f64, beta: f64) -> f64 {
    if beta > 0.0 && x.abs() < beta {
        x / beta
    } else if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Sigmoid focal loss for one logit against a hard `{0, 1}` target.
/// Returns `(loss, d loss / d logit)`.
pub fn focal_loss(logit: f64, target: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(logit);
    // p_t and the log-likelihood of the target class
    let (pt, log_pt, a, sign) = if target {
        (p, log_sigmoid(logit), alpha, 1.0)
    } else {
        (1.0 - p, log_sigmoid(-logit), 1.0 - alpha, -1.0)
    };
    let one_minus = (1.0 - pt).max(0.0);
    let modulator = one_minus.powf(gamma);
    let loss = -a * modulator * log_pt;
    // d pt / d logit = sign * p * (1 - p)
    let dpt = sign * p * (1.0 - p);
    let dmod = if gamma == 0.0 {
        0.0
    } else {
        -gamma * one_minus.powf(gamma - 1.0)
    };
    // d log_pt / d logit = sign * (1 - pt)
    let grad = -a * (dmod * dpt * log_pt + modulator * sign * one_minus);
    (loss, grad)
}

/// Soft-target binary cross-entropy minus the target's own entropy (the
/// Bernoulli KL divergence), in logit space. Returns `(loss, d/d student)`.
pub fn soft_bce(teacher_logit: f64, student_logit: f64) -> (f64, f64) {
    let pt = sigmoid(teacher_logit);
    let lpt = log_sigmoid(teacher_logit);
    let lnt = log_sigmoid(-teacher_logit);
    let lps = log_sigmoid(student_logit);
    let lns = log_sigmoid(-student_logit);
    let loss = pt * (lpt - lps) + (1.0 - pt) * (lnt - lns);
    (loss.max(0.0), sigmoid(student_logit) - pt)
}

/// Negative log IoU between two boxes given as `(left, top, right, bottom)`
/// distances from a shared point. Returns the loss and its gradient with
/// respect to the predicted distances.
pub fn iou_loss_ltrb(pred: [f64; 4], target: [f64; 4]) -> (f64, [f64; 4]) {
    let [pl, pt, pr, pb] = pred;
    let [tl, tt, tr, tb] = target;
    let pred_area = (pl + pr) * (pt + pb);
    let target_area = (tl + tr) * (tt + tb);
    let (wl, wr) = (pl.min(tl), pr.min(tr));
    let (ht, hb) = (pt.min(tt), pb.min(tb));
    let iw = wl + wr;
    let ih = ht + hb;
    let inter = iw * ih;
    let union = pred_area + target_area - inter;
    let eps = 1e-9;
    let iou = (inter + eps) / (union + eps);
    let loss = -iou.ln();
    // L = ln(union + eps) - ln(inter + eps)
    let d_union = 1.0 / (union + eps);
    let d_inter = -1.0 / (inter + eps) - d_union;
    let mut grad = [0.0; 4];
    // pred area partials
    grad[0] += d_union * (pt + pb);
    grad[2] += d_union * (pt + pb);
    grad[1] += d_union * (pl + pr);
    grad[3] += d_union * (pl + pr);
    // intersection partials; min() passes gradient to the prediction when it is the smaller side
    if pl <= tl {
        grad[0] += d_inter * ih;
    }
    if pr <= tr {
        grad[2] += d_inter * ih;
    }
    if pt <= tt {
        grad[1] += d_inter * iw;
    }
    if pb <= tb {
        grad[3] += d_inter * iw;
    }
    (loss, grad)
}
