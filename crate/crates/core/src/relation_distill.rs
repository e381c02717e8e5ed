//! Relation distillation over the GI set of one image.
//!
//! Pairwise Euclidean distances between pooled features are divided by their
//! mean over ordered off-diagonal pairs, and student distances are pulled
//! towards teacher distances with smooth L1.

use crate::error::{GidError, Result};
use crate::feature_distill::{FeatureGradLoss, PooledFeature};
use crate::functional::{smooth_l1, smooth_l1_grad};

/// Below this mean distance a side is treated as collapsed and the loss is 0.
pub const PHI_EPSILON: f64 = 1e-8;
pub const DEFAULT_SMOOTH_L1_BETA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct RelationGraph {
    /// Row-major `[K x K]`, symmetric with a zero diagonal.
    pub distances: Vec<f64>,
    pub k: usize,
    /// Mean distance over ordered pairs `i != j`; 0 when `K < 2`.
    pub phi: f64,
}

impl RelationGraph {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.distances[i * self.k + j]
    }
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn pairwise_distances(feats: &[PooledFeature]) -> Result<RelationGraph> {
    let k = feats.len();
    if let Some(f) = feats.iter().find(|f| f.data.len() != feats[0].data.len()) {
        return Err(GidError::contract(format!(
            "relation features differ in size: {} vs {}",
            f.data.len(),
            feats[0].data.len()
        )));
    }
    let mut distances = vec![0.0; k * k];
    let mut total = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            let d = l2(&feats[i].data, &feats[j].data);
            distances[i * k + j] = d;
            distances[j * k + i] = d;
            total += 2.0 * d;
        }
    }
    let pairs = k * k.saturating_sub(1);
    let phi = if pairs == 0 { 0.0 } else { total / pairs as f64 };
    Ok(RelationGraph { distances, k, phi })
}

/// Sum over ordered pairs of `smooth_l1(d_t / phi_t - d_s / phi_s)`.
///
/// Gradients flow through the student distances and the student `phi`.
/// Fewer than two GIs, or a collapsed side, yields zero loss and gradient.
pub fn relation_loss(
    teacher: &[PooledFeature],
    adapted_student: &[PooledFeature],
    beta: f64,
) -> Result<FeatureGradLoss> {
    if teacher.len() != adapted_student.len() {
        return Err(GidError::contract(format!(
            "{} teacher features vs {} student features",
            teacher.len(),
            adapted_student.len()
        )));
    }
    let k = teacher.len();
    let zero = || FeatureGradLoss {
        value: 0.0,
        grads: adapted_student.iter().map(|s| vec![0.0; s.data.len()]).collect(),
    };
    if k < 2 {
        return Ok(zero());
    }
    let tg = pairwise_distances(teacher)?;
    let sg = pairwise_distances(adapted_student)?;
    if tg.phi < PHI_EPSILON || sg.phi < PHI_EPSILON {
        return Ok(zero());
    }
    let pairs = (k * (k - 1)) as f64;

    let mut value = 0.0;
    // dL/du for u = d_s / phi_s, per ordered pair
    let mut g_u = vec![0.0; k * k];
    let mut s_dot = 0.0;
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            let u = sg.get(i, j) / sg.phi;
            let x = tg.get(i, j) / tg.phi - u;
            value += smooth_l1(x, beta);
            let g = -smooth_l1_grad(x, beta);
            g_u[i * k + j] = g;
            s_dot += g * u;
        }
    }

    let mut grads = zero().grads;
    for i in 0..k {
        for j in i + 1..k {
            let d = sg.get(i, j);
            if d <= 0.0 {
                continue;
            }
            // both orderings share the same distance
            let coeff = (g_u[i * k + j] + g_u[j * k + i] - 2.0 * s_dot / pairs) / sg.phi;
            let scale = coeff / d;
            let (si, sj) = (&adapted_student[i].data, &adapted_student[j].data);
            for idx in 0..si.len() {
                let diff = scale * (si[idx] - sj[idx]);
                grads[i][idx] += diff;
                grads[j][idx] -= diff;
            }
        }
    }
    Ok(FeatureGradLoss { value, grads })
}
